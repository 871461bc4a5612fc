//! Single-switch sweep: base preset plus one run per swapped parameter.
//!
//! `cargo run --release --example parameter_sweep -- [engine] [n] [seed] [out_dir]`
//! where engine is one of tsne, umap, gdr, gdr_tsne.

use gdr::bench::{sweep, Engine};
use gdr::pipeline::{default_mnist_dir, DataSource, DatasetSpec, ReduceOptions, Switch};

fn main() -> gdr::Result<()> {
    let mut args = std::env::args().skip(1);
    let engine = match args.next().as_deref() {
        Some("tsne") => Engine::Tsne,
        Some("umap") => Engine::Umap,
        Some("gdr_tsne") => Engine::GdrTsne,
        _ => Engine::Gdr,
    };
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(6000);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let out_dir = args.next().map(std::path::PathBuf::from);
    let spec = DatasetSpec {
        subsample: Some(n),
        subsample_seed: seed,
        ..DatasetSpec::new(DataSource::Mnist { dir: default_mnist_dir() })
    };
    let data = spec.load()?;
    let mut base = engine.config();
    base.set_seed(seed);
    let opts = ReduceOptions {
        cache_dir: Some(std::env::temp_dir().join("gdr-knn-cache")),
        ..ReduceOptions::default()
    };
    let table = sweep(&data, engine.name(), &base, &Switch::SWEEP, &opts, out_dir.as_deref())?;
    print!("{}", table.to_markdown());
    for (s, d) in table.base_deltas() {
        println!("{:<16} kNN change {d:+.2}", s.name());
    }
    Ok(())
}
