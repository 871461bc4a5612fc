//! Embeds Gaussian blobs with the GDR preset and writes CSV, SVG and report.
//!
//! `cargo run --release --example reduce_blobs -- [out_dir]`

use std::path::PathBuf;

use gdr::pipeline::{reduce, write_artifacts, DataSource, DatasetSpec, PipelineConfig, Preset, ReduceOptions};

fn main() -> gdr::Result<()> {
    let out_dir = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("gdr-blobs"), PathBuf::from);
    let spec = DatasetSpec::new(DataSource::Blobs {
        n: 3000,
        centers: 6,
        dim: 20,
        sep: 6.0,
        seed: 7,
    });
    let data = spec.load()?;
    let cfg = PipelineConfig::preset(Preset::Gdr);
    let opts = ReduceOptions {
        dataset_spec: Some(spec),
        ..ReduceOptions::default()
    };
    let mut out = reduce(&data, &cfg, &opts)?;
    let files = write_artifacts(&mut out, data.labels(), &out_dir, "blobs")?;
    let m = out.report.metrics.as_ref().expect("blobs are labeled");
    println!("kNN accuracy {:.1}%  V-score {:.3}", m.knn_accuracy, m.v_score);
    println!("optimize {:.0} ms of {:.0} ms total", out.report.timings.optimize_ms, out.report.timings.total_ms);
    for p in [files.embedding_csv, files.plot_svg, files.report_json].into_iter().flatten() {
        println!("wrote {}", p.display());
    }
    Ok(())
}
