//! Stage timings for each engine over a small grid of MNIST sizes.
//!
//! `cargo run --release --example runtime_bench -- [n|d] [sizes,comma,separated] [out_dir]`

use std::path::PathBuf;

use gdr::bench::{bench, write_bench, Axis, BenchConfig};
use gdr::pipeline::{default_mnist_dir, load_mnist, ReduceOptions};

fn main() -> gdr::Result<()> {
    let mut args = std::env::args().skip(1);
    let axis = match args.next().as_deref() {
        Some("d") => Axis::D,
        _ => Axis::N,
    };
    let sizes: Vec<usize> = args
        .next()
        .map(|s| s.split(',').filter_map(|v| v.parse().ok()).collect())
        .unwrap_or_else(|| match axis {
            Axis::N => vec![1000, 2000, 4000],
            Axis::D => vec![98, 392, 784],
        });
    let out_dir = args.next().map_or_else(|| std::env::temp_dir().join("gdr-bench"), PathBuf::from);
    let mut data = load_mnist(&default_mnist_dir())?;
    if axis == Axis::D {
        data = data.subsample(3000, 0)?;
    }
    let cfg = BenchConfig {
        axis,
        sizes,
        ..BenchConfig::default()
    };
    let rows = bench(&data, &cfg, &ReduceOptions::default(), |r| {
        println!(
            "{:<9} {:>6}  optimize {:>8.0} ms  total {:>8.0} ms",
            r.engine.name(),
            r.size,
            r.optimize_ms,
            r.total_ms
        )
    })?;
    let (csv, svg) = write_bench(&rows, &out_dir)?;
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}
