//! Angle between Barnes-Hut and sampled repulsion along a normalized GDR
//! run, logged in the trace every few epochs.
//!
//! `cargo run --release --example angle_agreement -- [blobs|swiss] [n]`

use gdr::pipeline::{reduce, DataSource, DatasetSpec, PipelineConfig, Preset, ReduceOptions};

fn main() -> gdr::Result<()> {
    let mut args = std::env::args().skip(1);
    let which = args.next().unwrap_or_else(|| "blobs".into());
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let source = match which.as_str() {
        "swiss" => DataSource::SwissRoll { n, noise: 0.05, seed: 0 },
        _ => DataSource::Blobs {
            n,
            centers: 5,
            dim: 10,
            sep: 6.0,
            seed: 0,
        },
    };
    let data = DatasetSpec::new(source).load()?;
    let cfg = PipelineConfig::preset_with(Preset::Gdr, true);
    let opts = ReduceOptions {
        angle_every: 25,
        angle_samples: 200,
        skip_metrics: true,
        ..ReduceOptions::default()
    };
    let out = reduce(&data, &cfg, &opts)?;
    let mut worst: f64 = 0.0;
    for rec in &out.trace {
        if let Some(a) = rec.angle {
            worst = worst.max(a);
            println!("epoch {:>4}  mean angle {:.3} rad", rec.epoch, a);
        }
    }
    println!("largest mean angle {worst:.3} rad (pi/2 = {:.3})", std::f64::consts::FRAC_PI_2);
    Ok(())
}
