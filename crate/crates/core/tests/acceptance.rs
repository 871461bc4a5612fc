//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance`
//!
//! `GDR_ACCEPT_ONLY=1,4,9` runs a subset. `GDR_FULL_MNIST=1` adds the
//! full 60k comparison to criterion 5. Criteria 5-7 read MNIST from
//! `GDR_MNIST_DIR` (default `data/mnist`).

use std::collections::BTreeSet;
use std::f64::consts::FRAC_PI_2;
use std::time::Instant;

use gdr::affinity::{calibrate_perplexity, calibrate_umap, normalize_affinities, AffinityGraph, PseudoShift};
use gdr::bench::{sweep, Engine};
use gdr::bh::QuadTree;
use gdr::data::{DenseDataset, EmbeddingRecord};
use gdr::kernels::{dense_forces, KernelParams, LossKind};
use gdr::metrics::{knn_accuracy, v_score, VMean};
use gdr::optimizer::{epoch_forces, Repulsion, RepulsionWeight, RunConfig, Sampling};
use gdr::pipeline::{
    default_mnist_dir, load_mnist, reduce, rerun, DataSource, DatasetSpec, PipelineConfig, Preset, ReduceOptions,
    RunReport, Switch,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const VARIANTS: [(LossKind, bool, &str); 4] = [
    (LossKind::Kl, true, "kl-normalized"),
    (LossKind::Kl, false, "kl-unnormalized"),
    (LossKind::Frobenius, true, "frobenius-normalized"),
    (LossKind::Frobenius, false, "frobenius-unnormalized"),
];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn w(s: f64) -> f64 {
    1.0 / (1.0 + s)
}

fn sq(y: &[f64], i: usize, j: usize) -> f64 {
    let (a, b) = (&y[2 * i..2 * i + 2], &y[2 * j..2 * j + 2]);
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Total loss written straight from the definitions, a = b = 1.
fn oracle_loss(loss: LossKind, normalized: bool, p: &[f64], y: &[f64], n: usize) -> f64 {
    let z: f64 = if normalized {
        (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| w(sq(y, i, j))).sum()
    } else {
        1.0
    };
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j || (!normalized && j < i) {
                continue;
            }
            let pij = p[i * n + j];
            let q = w(sq(y, i, j)) / z;
            total += match (loss, normalized) {
                (LossKind::Kl, true) => {
                    if pij > 0.0 {
                        pij * (pij / q).ln()
                    } else {
                        0.0
                    }
                }
                (LossKind::Kl, false) => {
                    let a = if pij > 0.0 { pij * (pij / q).ln() } else { 0.0 };
                    let b = if pij < 1.0 { (1.0 - pij) * ((1.0 - pij) / (1.0 - q)).ln() } else { 0.0 };
                    a + b
                }
                (LossKind::Frobenius, _) => (pij - q).powi(2),
            };
        }
    }
    total
}

fn random_config(rng: &mut ChaCha8Rng, n: usize, normalized: bool) -> (Vec<f64>, Vec<f64>) {
    let y: Vec<f64> = (0..2 * n).map(|_| { let v: f64 = StandardNormal.sample(rng); 1.5 * v }).collect();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = if rng.random_bool(0.3) { rng.random_range(0.05..0.95) } else { 0.0 };
            p[i * n + j] = v;
            p[j * n + i] = v;
        }
    }
    if normalized {
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
    }
    (y, p)
}

fn criterion_1() -> Outcome {
    let n = 32;
    let h = 1e-5;
    let mut lines = Vec::new();
    let mut pass = true;
    let fd_errors = |loss, normalized, eps: f64, seed: u64| -> (f64, f64) {
        let kp = KernelParams { a: 1.0, b: 1.0, eps };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut worst, mut min_cos) = (0.0f64, 1.0f64);
        for _ in 0..20 {
            let (y, p) = random_config(&mut rng, n, normalized);
            let f = dense_forces(loss, normalized, &p, &y, n, 2, &kp);
            let fd: Vec<f64> = (0..2 * n)
                .map(|c| {
                    let mut yp = y.clone();
                    yp[c] += h;
                    let mut ym = y.clone();
                    ym[c] -= h;
                    -(oracle_loss(loss, normalized, &p, &yp, n) - oracle_loss(loss, normalized, &p, &ym, n)) / (2.0 * h)
                })
                .collect();
            let floor = 1e-3 * fd.iter().map(|v| v.abs()).sum::<f64>() / fd.len() as f64;
            for (a, b) in f.iter().zip(&fd) {
                worst = worst.max((a - b).abs() / b.abs().max(floor));
            }
            let dot: f64 = f.iter().zip(&fd).map(|(a, b)| a * b).sum();
            let na = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            min_cos = min_cos.min(dot / (na * nb));
        }
        (worst, min_cos)
    };
    for (k, &(loss, normalized, name)) in VARIANTS.iter().enumerate() {
        let (worst, cos) = fd_errors(loss, normalized, 1e-12, 100 + k as u64);
        pass &= worst < 1e-4;
        lines.push(format!("{name} max rel err {worst:.1e} min cosine {cos:.6}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (y, p) = random_config(&mut rng, n, true);
        let f = exact_frobenius_normalized(&p, &y, n);
        for c in 0..2 * n {
            let mut yp = y.clone();
            yp[c] += h;
            let mut ym = y.clone();
            ym[c] -= h;
            let fd = -(oracle_loss(LossKind::Frobenius, true, &p, &yp, n) - oracle_loss(LossKind::Frobenius, true, &p, &ym, n))
                / (2.0 * h);
            worst = worst.max((f[c] - fd).abs() / fd.abs().max(1e-12));
        }
    }
    println!("INFO 1 frobenius-normalized with the global Z coupling term: max rel err {worst:.2e}");
    for eps in [1e-3, 1e-5] {
        let (worst, cos) = fd_errors(LossKind::Kl, false, eps, 101);
        println!("INFO 1 kl-unnormalized at eps={eps:e}: max rel err {worst:.2e}, min cosine {cos:.6}");
    }
    outcome(pass, lines.join("; "))
}

/// Full derivative of the normalized squared error, including the term
/// from Z depending on every coordinate.
fn exact_frobenius_normalized(p: &[f64], y: &[f64], n: usize) -> Vec<f64> {
    let pairs = || (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)));
    let z: f64 = pairs().map(|(i, j)| w(sq(y, i, j))).sum();
    let s: f64 = pairs().map(|(i, j)| (p[i * n + j] - w(sq(y, i, j)) / z) * w(sq(y, i, j))).sum();
    let mut f = vec![0.0; 2 * n];
    for (i, j) in pairs() {
        let wij = w(sq(y, i, j));
        let coef = 8.0 * wij * wij * (-(p[i * n + j] - wij / z) / z + s / (z * z));
        for c in 0..2 {
            f[2 * i + c] += coef * (y[2 * i + c] - y[2 * j + c]);
        }
    }
    f
}

/// Forces written out per variant with the exact `Z`.
fn oracle_forces(loss: LossKind, normalized: bool, p: &[f64], y: &[f64], n: usize, eps: f64) -> Vec<f64> {
    let z: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| w(sq(y, i, j))).sum();
    let mut f = vec![0.0; 2 * n];
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let s = sq(y, i, j);
            let wij = w(s);
            let pij = p[i * n + j];
            let coef = match (loss, normalized) {
                (LossKind::Kl, true) => -4.0 * pij * wij + 4.0 * wij * wij / z,
                (LossKind::Kl, false) => -2.0 * pij * wij + 2.0 * (1.0 - pij) * wij / (eps + s),
                (LossKind::Frobenius, true) => {
                    -4.0 * pij * (wij.powi(2) / z + 2.0 * wij.powi(3) / (z * z))
                        + 4.0 * (wij.powi(3) / (z * z) + 2.0 * wij.powi(4) / z.powi(3))
                }
                (LossKind::Frobenius, false) => -4.0 * pij * wij * wij + 4.0 * wij.powi(3),
            };
            for c in 0..2 {
                f[2 * i + c] += coef * (y[2 * i + c] - y[2 * j + c]);
            }
        }
    }
    f
}

fn criterion_2() -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    for (k, &(loss, normalized, name)) in VARIANTS.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (t, n) in [12usize, 25, 40].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + 10 * k as u64 + t as u64);
            let (yv, _) = random_config(&mut rng, n, false);
            let mut edges = Vec::new();
            for i in 0..n {
                for _ in 0..4 {
                    let j = rng.random_range(0..n);
                    if j != i {
                        edges.push((i as u32, j as u32, rng.random_range(0.05..0.9)));
                    }
                }
            }
            let mut g = AffinityGraph::from_edges(n, edges).unwrap();
            g.k_neighbors = 4;
            if normalized {
                g = normalize_affinities(&g).unwrap();
            } else {
                // summed duplicates can exceed 1
                let max = g.max_weight();
                if max > 0.95 {
                    g = g.scaled(0.95 / max);
                }
            }
            let p = g.to_dense();
            let mut cfg = RunConfig::gdr(normalized);
            cfg.loss = loss;
            cfg.sampling = Sampling::Explicit;
            cfg.neg_rate = n - 1;
            cfg.clip = None;
            cfg.repulsion = Repulsion::Sampled;
            cfg.repulsion_weight = RepulsionWeight::Exact;
            let y = EmbeddingRecord::new(yv.clone(), n, 2).unwrap();
            let (f, _) = epoch_forces(&g, &y, &cfg, 1).unwrap();
            let want = oracle_forces(loss, normalized, &p, &yv, n, cfg.kernel.eps);
            let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
            let err = f.iter().zip(&want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
            worst = worst.max(err);
        }
        pass &= worst <= 1e-6;
        lines.push(format!("{name} {worst:.1e}"));
    }
    outcome(pass, format!("max |optimizer - dense| / max|dense|: {}", lines.join(", ")))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_perp, mut worst_umap) = (0.0f64, 0.0f64);
    let mut pseudo_ok = true;
    let rows = 10_000;
    for _ in 0..rows {
        let k = rng.random_range(5..=100);
        let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..10.0)).collect();
        let perplexity = rng.random_range(2.0..(k as f64 * 0.8));
        let fit = calibrate_perplexity(&row, perplexity).unwrap();
        let sum: f64 = fit.p_row.iter().sum();
        let h: f64 = fit.p_row.iter().filter(|&&v| v > 0.0).map(|&v| -(v / sum) * (v / sum).log2()).sum();
        worst_perp = worst_perp.max((h.exp2() - perplexity).abs() / perplexity);

        let pseudo = rng.random_bool(0.5);
        let u = calibrate_umap(&row, pseudo, PseudoShift::Squared).unwrap();
        let total: f64 = u.p_row.iter().sum();
        worst_umap = worst_umap.max((total - (k as f64).log2()).abs());
        if pseudo {
            let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
            pseudo_ok &= row.iter().zip(&u.p_row).filter(|(&d, _)| d == min).all(|(_, &p)| p == 1.0);
        }
    }
    outcome(
        worst_perp <= 1e-5 && worst_umap <= 1e-5 && pseudo_ok,
        format!(
            "{rows} rows: max |2^H - perp|/perp {worst_perp:.1e}, max |sum p - log2 k| {worst_umap:.1e}, nearest p = 1 exactly: {pseudo_ok}"
        ),
    )
}

fn criterion_4() -> Outcome {
    let n = 300;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let coords: Vec<f64> = (0..2 * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let kp = KernelParams::default();
    let mut dense = vec![[0.0; 2]; n];
    let mut z = 0.0;
    for (i, f) in dense.iter_mut().enumerate() {
        for k in (0..n).filter(|&k| k != i) {
            let wik = w(sq(&coords, i, k));
            z += wik;
            for c in 0..2 {
                f[c] += wik * wik * (coords[2 * i + c] - coords[2 * k + c]);
            }
        }
    }
    let tree = QuadTree::build(&EmbeddingRecord::new(coords, n, 2).unwrap()).unwrap();
    let errors: Vec<(f64, f64, f64)> = [0.1, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|&theta| {
            let (mut num, mut den, mut zt) = (0.0, 0.0, 0.0);
            for (i, exact) in dense.iter().enumerate() {
                let s = tree.sums_for(i, theta, &kp);
                zt += s.z;
                for c in 0..2 {
                    num += (s.f2[c] - exact[c]).powi(2);
                    den += exact[c].powi(2);
                }
            }
            (theta, (num / den).sqrt(), (zt - z).abs() / z)
        })
        .collect();
    let at = errors.iter().find(|e| e.0 == 0.5).unwrap();
    let monotone = errors.windows(2).all(|p| p[1].1 >= p[0].1);
    let table: Vec<String> = errors.iter().map(|e| format!("{}:{:.4}/{:.4}", e.0, e.1, e.2)).collect();
    outcome(
        at.1 <= 0.02 && at.2 <= 0.01 && monotone,
        format!(
            "theta 0.5 force rel L2 {:.4} (<= 0.02), Z rel {:.4} (<= 0.01), monotone {monotone}; theta:force/Z {}",
            at.1,
            at.2,
            table.join(" ")
        ),
    )
}

fn mnist() -> Option<DenseDataset> {
    load_mnist(&default_mnist_dir()).ok()
}

fn cache() -> ReduceOptions {
    ReduceOptions {
        cache_dir: Some(std::env::temp_dir().join("gdr-knn-cache")),
        ..ReduceOptions::default()
    }
}

fn engine_scores(data: &DenseDataset, engine: Engine, seed: u64) -> (f64, f64) {
    let mut cfg = engine.config();
    cfg.set_seed(seed);
    let out = reduce(data, &cfg, &cache()).unwrap();
    let m = out.report.metrics.unwrap();
    (m.knn_accuracy, 100.0 * m.v_score)
}

fn criterion_5(full: &DenseDataset) -> Outcome {
    let engines = [Engine::Tsne, Engine::GdrTsne, Engine::Umap, Engine::Gdr];
    let mut sums = [(0.0, 0.0); 4];
    for seed in 0..3u64 {
        let data = full.subsample(6000, seed).unwrap();
        for (e, s) in engines.iter().zip(sums.iter_mut()) {
            let (k, v) = engine_scores(&data, *e, seed);
            println!("INFO 5 seed {seed} {:<9} kNN {k:.2} V {v:.2}", e.name());
            s.0 += k / 3.0;
            s.1 += v / 3.0;
        }
    }
    let dk_t = sums[1].0 - sums[0].0;
    let dv_t = sums[1].1 - sums[0].1;
    let dk_u = sums[3].0 - sums[2].0;
    let dv_u = sums[3].1 - sums[2].1;
    let pass = dk_t.abs() <= 2.0 && dv_t.abs() <= 5.0 && dk_u.abs() <= 2.0 && dv_u.abs() <= 5.0;
    let mut detail = format!(
        "6k, 3 seeds: gdr_tsne - tsne kNN {dk_t:+.2} V {dv_t:+.2}; gdr - umap kNN {dk_u:+.2} V {dv_u:+.2} (bounds 2.0 / 5.0)"
    );
    if std::env::var_os("GDR_FULL_MNIST").is_some() {
        let reference = [95.1, 96.1, 95.4, 96.2];
        let mut full_ok = true;
        let mut parts = Vec::new();
        for (e, r) in engines.iter().zip(reference) {
            let (k, _) = engine_scores(full, *e, 0);
            full_ok &= (k - r).abs() <= 1.5;
            parts.push(format!("{} {k:.2} (ref {r})", e.name()));
        }
        println!("{} 5b full 60k kNN within 1.5: {}", if full_ok { "PASS" } else { "FAIL" }, parts.join(", "));
        detail.push_str(&format!("; full 60k ok: {full_ok}"));
    }
    outcome(pass, detail)
}

fn criterion_6(full: &DenseDataset) -> Outcome {
    let data = full.subsample(6000, 0).unwrap();
    let mut pass = true;
    let mut lines = Vec::new();
    for engine in [Engine::Gdr, Engine::GdrTsne, Engine::Umap, Engine::Tsne] {
        let mut base = engine.config();
        base.set_seed(0);
        let table = sweep(&data, engine.name(), &base, &Switch::SWEEP, &cache(), None).unwrap();
        let deltas = table.base_deltas();
        let worst = deltas.iter().fold(0.0f64, |m, d| m.max(d.1.abs()));
        let bad: Vec<String> =
            deltas.iter().filter(|d| d.1.abs() > 3.0).map(|d| format!("{} {:+.2}", d.0.name(), d.1)).collect();
        pass &= bad.is_empty();
        let all: Vec<String> = deltas.iter().map(|d| format!("{} {:+.2}", d.0.name(), d.1)).collect();
        println!("INFO 6 {:<9} {}", engine.name(), all.join(", "));
        lines.push(if bad.is_empty() {
            format!("{} max {worst:.2}", engine.name())
        } else {
            format!("{} over bound: {}", engine.name(), bad.join(", "))
        });
    }
    outcome(pass, format!("kNN change vs base <= 3: {}", lines.join("; ")))
}

fn criterion_7(full: &DenseDataset) -> Outcome {
    let mut times = Vec::new();
    for engine in [Engine::Gdr, Engine::Umap, Engine::GdrTsne, Engine::Tsne] {
        let mut cfg = engine.config();
        cfg.set_seed(0);
        let opts = ReduceOptions {
            skip_metrics: true,
            ..cache()
        };
        let out = reduce(full, &cfg, &opts).unwrap();
        let ms = out.report.timings.optimize_ms;
        println!("INFO 7 {:<9} optimize {:.1} s", engine.name(), ms / 1e3);
        times.push(ms);
    }
    let (gdr, umap, gdr_tsne, tsne) = (times[0], times[1], times[2], times[3]);
    outcome(
        gdr <= 1.1 * umap && tsne >= 5.0 * gdr_tsne,
        format!(
            "60k optimize: gdr/umap {:.2} (<= 1.1), tsne/gdr_tsne {:.2} (>= 5)",
            gdr / umap,
            tsne / gdr_tsne
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    for (name, source) in [
        (
            "blobs n=2000",
            DataSource::Blobs {
                n: 2000,
                centers: 5,
                dim: 10,
                sep: 6.0,
                seed: 8,
            },
        ),
        (
            "swiss roll n=5000",
            DataSource::SwissRoll {
                n: 5000,
                noise: 0.05,
                seed: 8,
            },
        ),
    ] {
        let data = DatasetSpec::new(source).load().unwrap();
        let mut cfg = PipelineConfig::preset_with(Preset::Gdr, true);
        cfg.set_seed(8);
        let opts = ReduceOptions {
            angle_every: 10,
            angle_samples: 300,
            skip_metrics: true,
            ..ReduceOptions::default()
        };
        let out = reduce(&data, &cfg, &opts).unwrap();
        let angles: Vec<f64> = out.trace.iter().filter_map(|r| r.angle).collect();
        let worst = angles.iter().cloned().fold(0.0f64, f64::max);
        let mean = angles.iter().sum::<f64>() / angles.len().max(1) as f64;
        pass &= angles.len() == 50 && worst < FRAC_PI_2;
        lines.push(format!("{name}: {} epochs logged, max {worst:.3} rad, mean {mean:.3}", angles.len()));
    }
    outcome(pass, format!("{} (pi/2 = {FRAC_PI_2:.3})", lines.join("; ")))
}

fn criterion_9() -> Outcome {
    let perfect = v_score(&[0, 0, 1, 1, 2, 2], &[5, 5, 3, 3, 1, 1], VMean::Arithmetic).unwrap();
    let single = v_score(&[0, 0, 1, 1, 2, 2], &[0; 6], VMean::Arithmetic).unwrap();
    let degenerate_ok = (perfect.v - 1.0).abs() < 1e-12
        && single.homogeneity.abs() < 1e-12
        && (single.completeness - 1.0).abs() < 1e-12
        && (single.v - 0.5).abs() < 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 2000;
    let coords: Vec<f64> = (0..2 * n).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let chance = knn_accuracy(&EmbeddingRecord::new(coords, n, 2).unwrap(), &labels, 100).unwrap();

    let n = 600;
    let coords: Vec<f64> = (0..2 * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let labels: Vec<u32> =
        (0..n).map(|i| u32::from(coords[2 * i] + 0.5 * coords[2 * i + 1] + rng.random_range(-0.8..0.8) > 0.0)).collect();
    let emb = EmbeddingRecord::new(coords.clone(), n, 2).unwrap();
    let (s, c) = (0.7f64.sin(), 0.7f64.cos());
    let rotated: Vec<f64> = coords.chunks(2).flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect();
    let rot = EmbeddingRecord::new(rotated, n, 2).unwrap();
    let mut rotation_ok = true;
    for k in [1, 7, 25] {
        rotation_ok &= knn_accuracy(&emb, &labels, k).unwrap() == knn_accuracy(&rot, &labels, k).unwrap();
    }
    outcome(
        degenerate_ok && (chance - 50.0).abs() <= 5.0 && rotation_ok,
        format!(
            "perfect v {:.3}; single cluster h {:.3} c {:.3} v {:.3}; random labels kNN {chance:.2}%; rotation invariant {rotation_ok}",
            perfect.v, single.homogeneity, single.completeness, single.v
        ),
    )
}

fn criterion_10() -> Outcome {
    let spec = DatasetSpec::new(DataSource::Blobs {
        n: 600,
        centers: 4,
        dim: 8,
        sep: 5.0,
        seed: 10,
    });
    let data = spec.load().unwrap();
    let mut pass = true;
    let mut lines = Vec::new();
    for (name, mut cfg) in [
        ("tsne", PipelineConfig::preset(Preset::Tsne)),
        ("umap", PipelineConfig::preset(Preset::Umap)),
        ("gdr", PipelineConfig::preset_with(Preset::Gdr, false)),
        ("gdr_tsne", PipelineConfig::preset_with(Preset::Gdr, true)),
    ] {
        cfg.set_seed(10);
        cfg.run.epochs = 150;
        let opts = ReduceOptions {
            dataset_spec: Some(spec.clone()),
            ..ReduceOptions::default()
        };
        let first = reduce(&data, &cfg, &opts).unwrap();
        let json = serde_json::to_string(&first.report).unwrap();
        let report: RunReport = serde_json::from_str(&json).unwrap();
        let again = rerun(&report, &ReduceOptions::default()).unwrap();
        let same = first.embedding.coords.len() == again.embedding.coords.len()
            && first.embedding.coords.iter().zip(&again.embedding.coords).all(|(a, b)| a.to_bits() == b.to_bits());
        pass &= same;
        lines.push(format!("{name} {}", if same { "bitwise" } else { "differs" }));
    }
    outcome(pass, lines.join(", "))
}

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("GDR_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|s| s.contains(&id));
    let needs_mnist = [5, 6, 7].iter().any(|&id| wanted(id));
    let full = if needs_mnist { mnist() } else { None };
    let mnist_missing = || outcome(false, format!("MNIST not found under {}", default_mnist_dir().display()));

    type Check<'a> = (u32, &'a str, Option<f64>, Box<dyn Fn() -> Outcome + 'a>);
    let checks: Vec<Check> = vec![
        (1, "gradient correctness", Some(10.0), Box::new(criterion_1)),
        (2, "exhaustive-sampling oracle", Some(10.0), Box::new(criterion_2)),
        (3, "calibration", Some(30.0), Box::new(criterion_3)),
        (4, "Barnes-Hut fidelity", Some(10.0), Box::new(criterion_4)),
        (5, "normalization switch on 6k MNIST", Some(300.0), Box::new(|| full.as_ref().map_or_else(mnist_missing, criterion_5))),
        (6, "single-switch sweeps", Some(1800.0), Box::new(|| full.as_ref().map_or_else(mnist_missing, criterion_6))),
        (7, "speed ordering on 60k MNIST", None, Box::new(|| full.as_ref().map_or_else(mnist_missing, criterion_7))),
        (8, "repulsion angle agreement", Some(300.0), Box::new(criterion_8)),
        (9, "metrics oracles", None, Box::new(criterion_9)),
        (10, "reproducibility", None, Box::new(criterion_10)),
    ];
    let mut failed = 0;
    for (id, name, budget, check) in checks {
        if !wanted(id) {
            continue;
        }
        let t = Instant::now();
        let o = check();
        let secs = t.elapsed().as_secs_f64();
        let in_time = budget.is_none_or(|b| secs <= b);
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        let limit = budget.map_or(String::new(), |b| format!(" (limit {b:.0} s)"));
        println!(
            "{} {id} {name}: {} [{secs:.1} s{limit}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
