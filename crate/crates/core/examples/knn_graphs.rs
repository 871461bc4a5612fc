//! Exact brute-force neighbors against NN-descent on a swiss roll.
//!
//! `cargo run --release --example knn_graphs -- [n] [k]`

use std::time::Instant;

use gdr::data::make_swiss_roll;
use gdr::knn::{exact_knn, nn_descent, NnDescentParams};

fn main() -> gdr::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5000);
    let k: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(15);
    let data = make_swiss_roll(n, 0.05, 0)?;

    let t = Instant::now();
    let exact = exact_knn(&data, k)?;
    let exact_ms = t.elapsed().as_secs_f64() * 1e3;

    let t = Instant::now();
    let approx = nn_descent(&data, k, 0, NnDescentParams::default())?;
    let approx_ms = t.elapsed().as_secs_f64() * 1e3;

    println!("n={n} k={k}");
    println!("exact       {exact_ms:>8.0} ms");
    println!("nn-descent  {approx_ms:>8.0} ms  recall {:.4}", approx.recall(&exact));
    println!("point 0 neighbors {:?}", &exact.neighbors(0)[..5.min(k)]);
    Ok(())
}
