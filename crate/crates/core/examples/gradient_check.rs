//! Analytic pair forces summed over all pairs against central finite
//! differences of the total loss, for each loss and normalization.
//!
//! `cargo run --release --example gradient_check`

use gdr::kernels::{dense_forces, dense_loss, KernelParams, LossKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let (n, d) = (16, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut p: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
    for i in 0..n {
        p[i * n + i] = 0.0;
        for j in 0..i {
            p[i * n + j] = p[j * n + i];
        }
    }
    let total: f64 = p.iter().sum();
    let p_norm: Vec<f64> = p.iter().map(|v| v / total).collect();
    let kp = KernelParams {
        eps: 1e-12,
        ..KernelParams::default()
    };
    let h = 1e-5;
    for (loss, normalized) in [
        (LossKind::Kl, true),
        (LossKind::Kl, false),
        (LossKind::Frobenius, true),
        (LossKind::Frobenius, false),
    ] {
        let pm = if normalized { &p_norm } else { &p };
        let f = dense_forces(loss, normalized, pm, &y, n, d, &kp);
        let mut worst: f64 = 0.0;
        let mut dot = (0.0, 0.0, 0.0);
        for c in 0..n * d {
            let mut yp = y.clone();
            yp[c] += h;
            let mut ym = y.clone();
            ym[c] -= h;
            let fd = -(dense_loss(loss, normalized, pm, &yp, n, d, &kp) - dense_loss(loss, normalized, pm, &ym, n, d, &kp))
                / (2.0 * h);
            worst = worst.max((f[c] - fd).abs() / fd.abs().max(1e-8));
            dot = (dot.0 + f[c] * fd, dot.1 + f[c] * f[c], dot.2 + fd * fd);
        }
        println!(
            "{loss:?} normalized={normalized:<5}  max rel err {worst:.2e}  cosine {:.6}",
            dot.0 / (dot.1.sqrt() * dot.2.sqrt())
        );
    }
}
