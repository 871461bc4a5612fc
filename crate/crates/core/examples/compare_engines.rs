//! Runs the four engines on a seeded MNIST subset and prints metrics.
//!
//! `cargo run --release --example compare_engines -- [n] [seed]`

use gdr::pipeline::{default_mnist_dir, reduce, DataSource, DatasetSpec, PipelineConfig, Preset, ReduceOptions};

fn main() -> gdr::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(6000);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = DatasetSpec {
        subsample: Some(n),
        subsample_seed: seed,
        ..DatasetSpec::new(DataSource::Mnist { dir: default_mnist_dir() })
    };
    let data = spec.load()?;
    let engines = [
        ("umap", PipelineConfig::preset(Preset::Umap)),
        ("gdr_umap", PipelineConfig::preset_with(Preset::Gdr, false)),
        ("tsne", PipelineConfig::preset(Preset::Tsne)),
        ("gdr_tsne", PipelineConfig::preset_with(Preset::Gdr, true)),
    ];
    let cache = std::env::temp_dir().join("gdr-knn-cache");
    println!("{:<10} {:>8} {:>8} {:>10} {:>10}", "engine", "knn%", "v", "opt_ms", "total_ms");
    for (name, mut cfg) in engines {
        cfg.set_seed(seed);
        let opts = ReduceOptions {
            cache_dir: Some(cache.clone()),
            ..ReduceOptions::default()
        };
        let out = reduce(&data, &cfg, &opts)?;
        let m = out.report.metrics.expect("labels");
        let t = out.report.timings;
        println!(
            "{:<10} {:>8.2} {:>8.2} {:>10.0} {:>10.0}",
            name,
            m.knn_accuracy,
            100.0 * m.v_score,
            t.optimize_ms,
            t.total_ms
        );
    }
    Ok(())
}
