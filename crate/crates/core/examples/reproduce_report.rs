//! Writes a run report, reloads it, re-runs it and checks the embedding is
//! bitwise identical.
//!
//! `cargo run --release --example reproduce_report`

use gdr::pipeline::{
    read_report, reduce, rerun, write_artifacts, DataSource, DatasetSpec, PipelineConfig, Preset, ReduceOptions,
};

fn main() -> gdr::Result<()> {
    let spec = DatasetSpec::new(DataSource::SwissRoll {
        n: 1500,
        noise: 0.05,
        seed: 4,
    });
    let data = spec.load()?;
    let mut cfg = PipelineConfig::preset(Preset::Umap);
    cfg.set_seed(11);
    let opts = ReduceOptions {
        dataset_spec: Some(spec),
        skip_metrics: true,
        ..ReduceOptions::default()
    };
    let mut first = reduce(&data, &cfg, &opts)?;
    let dir = std::env::temp_dir().join("gdr-reproduce");
    let files = write_artifacts(&mut first, None, &dir, "run")?;
    let report = read_report(files.report_json.expect("report written"))?;
    println!("config hash {}", report.config_hash);

    let again = rerun(&report, &ReduceOptions { skip_metrics: true, ..ReduceOptions::default() })?;
    let same = first
        .embedding
        .coords
        .iter()
        .zip(&again.embedding.coords)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!("bitwise identical: {same}");
    Ok(())
}
