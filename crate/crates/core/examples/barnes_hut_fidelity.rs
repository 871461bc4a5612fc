//! Barnes-Hut repulsion and normalizer against the dense sums, over theta.
//!
//! `cargo run --release --example barnes_hut_fidelity -- [n]`

use gdr::bh::QuadTree;
use gdr::data::EmbeddingRecord;
use gdr::kernels::{q_unnorm, KernelParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> gdr::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let coords: Vec<f64> = (0..2 * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let y = EmbeddingRecord::new(coords, n, 2)?;
    let kp = KernelParams::default();

    let mut dense_f = vec![[0.0; 2]; n];
    let mut dense_z = 0.0;
    for i in 0..n {
        for k in (0..n).filter(|&k| k != i) {
            let (dx, dy) = (y.row(i)[0] - y.row(k)[0], y.row(i)[1] - y.row(k)[1]);
            let w = q_unnorm(dx * dx + dy * dy, &kp);
            dense_z += w;
            dense_f[i][0] += w * w * dx;
            dense_f[i][1] += w * w * dy;
        }
    }

    let tree = QuadTree::build(&y)?;
    println!("{n} points, {} nodes, depth {}", tree.num_nodes(), tree.depth());
    println!("{:>6} {:>12} {:>12} {:>10}", "theta", "force rel L2", "Z rel err", "pairs/pt");
    for theta in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let (mut num, mut den, mut z, mut pairs) = (0.0, 0.0, 0.0, 0usize);
        for (i, exact) in dense_f.iter().enumerate() {
            let s = tree.sums_for(i, theta, &kp);
            z += s.z;
            pairs += s.exact_pairs + s.summarized;
            for c in 0..2 {
                num += (s.f2[c] - exact[c]).powi(2);
                den += exact[c].powi(2);
            }
        }
        println!(
            "{theta:>6.2} {:>12.2e} {:>12.2e} {:>10.1}",
            (num / den).sqrt(),
            (z - dense_z).abs() / dense_z,
            pairs as f64 / n as f64
        );
    }
    Ok(())
}
