//! Low-dimensional kernel, the two loss families and their per-pair forces.
//!
//! Forces are negative gradients. For a pair `(i, j)` the force on `y_i` is
//! `coef * (y_i - y_j)`, so a negative coefficient pulls `y_i` toward `y_j`.
//! Normalized losses run over ordered pairs (`sum_{i != j} p_ij = 1`);
//! unnormalized losses run over unordered pairs. In both cases the total
//! force on `y_i` is the sum of the pair forces over all `j != i`.

use serde::{Deserialize, Serialize};

use crate::error::{GdrError, Result};

const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub a: f64,
    pub b: f64,
    /// Additive stabilizer in the unnormalized KL repulsion.
    pub eps: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 1.0,
            eps: 1e-3,
        }
    }
}

impl KernelParams {
    pub fn new(a: f64, b: f64) -> Self {
        Self {
            a,
            b,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0 && self.eps > 0.0) {
            return Err(GdrError::InvalidParameter(format!(
                "kernel needs a, b, eps > 0 (got a={}, b={}, eps={})",
                self.a, self.b, self.eps
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn is_student_t(&self) -> bool {
        self.a == 1.0 && self.b == 1.0
    }
}

/// `1 / (1 + a * dist_sq^b)`.
#[inline]
pub fn q_unnorm(dist_sq: f64, kp: &KernelParams) -> f64 {
    if kp.b == 1.0 {
        1.0 / (1.0 + kp.a * dist_sq)
    } else if dist_sq <= 0.0 {
        1.0
    } else {
        1.0 / (1.0 + kp.a * dist_sq.powf(kp.b))
    }
}

/// `a * b * dist_sq^(b-1)`, the chain-rule factor of the kernel. Zero at the
/// origin (the matching displacement is zero there too).
#[inline]
fn kernel_slope(dist_sq: f64, kp: &KernelParams) -> f64 {
    if kp.b == 1.0 {
        kp.a
    } else if dist_sq <= 0.0 {
        0.0
    } else {
        kp.a * kp.b * dist_sq.powf(kp.b - 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbFit {
    pub a: f64,
    pub b: f64,
    /// Max absolute deviation from the target curve over the fitting grid.
    pub max_abs_dev: f64,
    pub iterations: usize,
}

fn ab_target(d: f64, min_dist: f64, spread: f64) -> f64 {
    if d <= min_dist {
        1.0
    } else {
        (-(d - min_dist) / spread).exp()
    }
}

/// Least-squares fit of `q_unnorm(d^2)` to the piecewise target curve.
/// Levenberg-Marquardt over `(ln a, ln b)` so both stay positive.
pub fn fit_ab(min_dist: f64, spread: f64) -> Result<AbFit> {
    if !(min_dist > 0.0 && min_dist < spread) {
        return Err(GdrError::InvalidParameter(format!(
            "fit_ab needs 0 < min_dist < spread (got {min_dist}, {spread})"
        )));
    }
    const SAMPLES: usize = 300;
    const MAX_ITERS: usize = 200;
    let xs: Vec<f64> = (0..SAMPLES)
        .map(|s| 3.0 * spread * s as f64 / (SAMPLES - 1) as f64)
        .collect();
    let ys: Vec<f64> = xs.iter().map(|&x| ab_target(x, min_dist, spread)).collect();

    let sse = |la: f64, lb: f64| -> f64 {
        let kp = KernelParams::new(la.exp(), lb.exp());
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| (q_unnorm(x * x, &kp) - y).powi(2))
            .sum()
    };

    let (mut la, mut lb) = (0.0f64, 0.0f64);
    let mut cost = sse(la, lb);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    for it in 0..MAX_ITERS {
        iterations = it + 1;
        let (a, b) = (la.exp(), lb.exp());
        // J^T J and J^T r for r = model - target
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                continue;
            }
            let x2b = (x * x).powf(b);
            let q = 1.0 / (1.0 + a * x2b);
            let r = q - y;
            let dq_dla = -q * q * a * x2b;
            let dq_dlb = -q * q * a * x2b * (x * x).ln() * b;
            jaa += dq_dla * dq_dla;
            jab += dq_dla * dq_dlb;
            jbb += dq_dlb * dq_dlb;
            ga += dq_dla * r;
            gb += dq_dlb * r;
        }
        let mut improved = false;
        for _ in 0..30 {
            let (m11, m22) = (jaa * (1.0 + lambda), jbb * (1.0 + lambda));
            let det = m11 * m22 - jab * jab;
            if det.abs() < 1e-300 {
                lambda *= 10.0;
                continue;
            }
            let da = -(m22 * ga - jab * gb) / det;
            let db = -(m11 * gb - jab * ga) / det;
            let trial = sse(la + da, lb + db);
            if trial.is_finite() && trial < cost {
                let rel = (cost - trial) / cost.max(1e-300);
                la += da;
                lb += db;
                cost = trial;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel < 1e-12 || (da.abs() + db.abs()) < 1e-12 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved || converged {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GdrError::NoConvergence {
            iterations,
            what: "a,b curve fit".into(),
        });
    }
    let kp = KernelParams::new(la.exp(), lb.exp());
    let max_abs_dev = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| (q_unnorm(x * x, &kp) - y).abs())
        .fold(0.0, f64::max);
    Ok(AbFit {
        a: kp.a,
        b: kp.b,
        max_abs_dev,
        iterations,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Kl,
    Frobenius,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForceKind {
    Attract,
    Repulse,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientContext {
    pub normalized: bool,
    pub loss: LossKind,
    /// Sum of the unnormalized kernel over ordered pairs. Unused when
    /// unnormalized.
    pub z: f64,
    pub n: usize,
}

/// Scalar coefficient of the pair force: force on `y_i` is `coef * (y_i - y_j)`.
#[inline]
pub fn pair_coefficient(
    dist_sq: f64,
    p: f64,
    kind: ForceKind,
    ctx: &GradientContext,
    kp: &KernelParams,
) -> f64 {
    let w = q_unnorm(dist_sq, kp);
    match (ctx.normalized, ctx.loss, kind) {
        (true, LossKind::Kl, ForceKind::Attract) => -4.0 * p * w,
        (true, LossKind::Kl, ForceKind::Repulse) => 4.0 * w * w / ctx.z,
        (true, LossKind::Frobenius, ForceKind::Attract) => {
            let q = w / ctx.z;
            -4.0 * p * ctx.z * (q * q + 2.0 * q * q * q)
        }
        (true, LossKind::Frobenius, ForceKind::Repulse) => {
            let q = w / ctx.z;
            let q3 = q * q * q;
            4.0 * ctx.z * (q3 + 2.0 * q3 * q)
        }
        (false, LossKind::Kl, ForceKind::Attract) => -2.0 * kernel_slope(dist_sq, kp) * w * p,
        (false, LossKind::Kl, ForceKind::Repulse) => {
            2.0 * kp.b * w * (1.0 - p) / (kp.eps + dist_sq)
        }
        (false, LossKind::Frobenius, ForceKind::Attract) => {
            -4.0 * kernel_slope(dist_sq, kp) * p * w * w
        }
        (false, LossKind::Frobenius, ForceKind::Repulse) => {
            4.0 * kernel_slope(dist_sq, kp) * w * w * w
        }
    }
}

#[inline]
pub fn dist_sq(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Per-pair force on `y_i`.
pub fn grad_pair(
    y_i: &[f64],
    y_j: &[f64],
    p_ij: f64,
    kind: ForceKind,
    ctx: &GradientContext,
    kp: &KernelParams,
) -> Vec<f64> {
    let coef = pair_coefficient(dist_sq(y_i, y_j), p_ij, kind, ctx, kp);
    y_i.iter().zip(y_j).map(|(a, b)| coef * (a - b)).collect()
}

/// Monte-Carlo estimate of `Z` from `m` sampled ordered pairs.
pub fn estimate_z(sampled_dist_sq: &[f64], n: usize, m: usize) -> f64 {
    let sum: f64 = sampled_dist_sq.iter().map(|&s| 1.0 / (1.0 + s)).sum();
    (n * (n - 1)) as f64 / m.max(1) as f64 * sum
}

#[inline]
fn clamp_q(q: f64) -> f64 {
    q.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
}

#[inline]
pub(crate) fn xlogx_ratio(p: f64, q: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * (p / clamp_q(q)).ln()
    }
}

/// `sum_{i != j} p_ij log(p_ij / q_ij)` over dense row-major `n x n` matrices.
pub fn loss_kl_normalized(p: &[f64], q: &[f64], n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += xlogx_ratio(p[i * n + j], q[i * n + j]);
            }
        }
    }
    total
}

/// Binary cross-entropy summed over unordered pairs.
pub fn loss_kl_unnormalized(p: &[f64], q: &[f64], n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += kl_unnormalized_term(p[i * n + j], q[i * n + j]);
        }
    }
    total
}

#[inline]
pub fn kl_unnormalized_term(p: f64, q: f64) -> f64 {
    let q = clamp_q(q);
    let first = xlogx_ratio(p, q);
    let second = if p >= 1.0 {
        0.0
    } else {
        (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
    };
    first + second
}

/// Squared Frobenius distance; ordered pairs when `ordered`, else `i < j`.
pub fn loss_frobenius(p: &[f64], q: &[f64], n: usize, ordered: bool) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let start = if ordered { 0 } else { i + 1 };
        for j in start..n {
            if i != j {
                total += (p[i * n + j] - q[i * n + j]).powi(2);
            }
        }
    }
    total
}

/// Dense `n x n` matrix of the unnormalized kernel (zero diagonal).
pub fn dense_kernel(y: &[f64], n: usize, d: usize, kp: &KernelParams) -> Vec<f64> {
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                w[i * n + j] = q_unnorm(dist_sq(&y[i * d..(i + 1) * d], &y[j * d..(j + 1) * d]), kp);
            }
        }
    }
    w
}

/// Total loss of a configuration against a dense `P`.
pub fn dense_loss(
    loss: LossKind,
    normalized: bool,
    p: &[f64],
    y: &[f64],
    n: usize,
    d: usize,
    kp: &KernelParams,
) -> f64 {
    let mut q = dense_kernel(y, n, d, kp);
    if normalized {
        let z: f64 = q.iter().sum();
        q.iter_mut().for_each(|v| *v /= z);
    }
    match (loss, normalized) {
        (LossKind::Kl, true) => loss_kl_normalized(p, &q, n),
        (LossKind::Kl, false) => loss_kl_unnormalized(p, &q, n),
        (LossKind::Frobenius, ordered) => loss_frobenius(p, &q, n, ordered),
    }
}

/// Sum of attraction and repulsion pair forces over all `j != i`, with the
/// exact `Z`. Returns a row-major `n x d` force matrix.
pub fn dense_forces(
    loss: LossKind,
    normalized: bool,
    p: &[f64],
    y: &[f64],
    n: usize,
    d: usize,
    kp: &KernelParams,
) -> Vec<f64> {
    let z: f64 = dense_kernel(y, n, d, kp).iter().sum();
    let ctx = GradientContext {
        normalized,
        loss,
        z,
        n,
    };
    let mut f = vec![0.0; n * d];
    for i in 0..n {
        let yi = &y[i * d..(i + 1) * d];
        for j in 0..n {
            if i == j {
                continue;
            }
            let yj = &y[j * d..(j + 1) * d];
            let s = dist_sq(yi, yj);
            let pij = p[i * n + j];
            let coef = pair_coefficient(s, pij, ForceKind::Attract, &ctx, kp)
                + pair_coefficient(s, pij, ForceKind::Repulse, &ctx, kp);
            for c in 0..d {
                f[i * d + c] += coef * (yi[c] - yj[c]);
            }
        }
    }
    f
}
