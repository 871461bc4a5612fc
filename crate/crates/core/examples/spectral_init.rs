//! Laplacian eigenmap initialization on a swiss roll, with solver residuals.
//!
//! `cargo run --release --example spectral_init -- [n] [out.svg]`

use gdr::affinity::{build_affinity, AffinityConfig};
use gdr::data::make_swiss_roll;
use gdr::init::{component_graphs, laplacian_eigenpairs, spectral_init, InitConfig};
use gdr::knn::exact_knn;
use gdr::plot::plot_embedding;

fn main() -> gdr::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(3000);
    let svg = args.next();
    let data = make_swiss_roll(n, 0.05, 0)?;
    let (g, _) = build_affinity(&exact_knn(&data, 15)?, &AffinityConfig::default())?;

    let comps = component_graphs(&g, true);
    println!("{} component(s)", comps.len());
    let pairs = laplacian_eigenpairs(&comps[0], 2, 0)?;
    println!(
        "eigenvalues {:?}, residuals {:?}, dense solver: {}",
        pairs.values, pairs.residuals, pairs.dense
    );

    let out = spectral_init(&g, 2, &InitConfig::default())?;
    println!(
        "init max |coordinate| {:.3}, fell back to random: {}",
        out.embedding.max_abs(),
        out.fell_back
    );
    if let Some(path) = svg {
        plot_embedding(&out.embedding, None, &path)?;
        println!("wrote {path}");
    }
    Ok(())
}
