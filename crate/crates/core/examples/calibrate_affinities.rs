//! Perplexity and UMAP-style row calibration, then both symmetrizations.
//!
//! `cargo run --release --example calibrate_affinities`

use gdr::affinity::{
    build_affinity, calibrate_perplexity, calibrate_umap, AffinityConfig, Calibration, PseudoShift, Symmetrization,
};
use gdr::data::make_blobs;
use gdr::knn::exact_knn;

fn main() -> gdr::Result<()> {
    let row = [0.8, 1.0, 1.1, 1.5, 2.0, 2.2, 3.0, 4.5];
    let tsne = calibrate_perplexity(&row, 5.0)?;
    println!("perplexity 5: sigma {:.4}, reached {:.6}", tsne.sigma, tsne.perplexity);
    let umap = calibrate_umap(&row, true, PseudoShift::Squared)?;
    let sum: f64 = umap.p_row.iter().sum();
    println!(
        "umap: tau {:.4}, rho {:.2}, sum {:.6} (target log2 k = {:.6}), nearest p = {}",
        umap.tau,
        umap.rho,
        sum,
        (row.len() as f64).log2(),
        umap.p_row[0]
    );

    let data = make_blobs(1000, 4, 10, 5.0, 1)?;
    let graph = exact_knn(&data, 90)?;
    for (calibration, sym) in [
        (Calibration::Perplexity, Symmetrization::Average),
        (Calibration::UmapEntropy, Symmetrization::Probabilistic),
    ] {
        let cfg = AffinityConfig {
            calibration,
            symmetrization: sym,
            pseudo_distance: calibration == Calibration::UmapEntropy,
            ..AffinityConfig::default()
        };
        let (g, stats) = build_affinity(&graph, &cfg)?;
        println!(
            "{calibration:?}/{sym:?}: {} edges, max weight {:.4}, sum {:.3}, degenerate rows {}",
            stats.edges,
            g.max_weight(),
            g.directed_sum(),
            stats.degenerate_rows
        );
    }
    Ok(())
}
