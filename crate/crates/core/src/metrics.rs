//! Embedding quality: leave-one-out kNN accuracy, k-means and the
//! homogeneity / completeness / V-score triple.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingRecord;
use crate::error::{GdrError, Result};

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Percent of points whose label equals the majority label of their `k`
/// nearest other points. Ties go to the smallest label.
pub fn knn_accuracy(emb: &EmbeddingRecord, labels: &[u32], k: usize) -> Result<f64> {
    if labels.len() != emb.n {
        return Err(GdrError::LengthMismatch {
            left: emb.n,
            right: labels.len(),
        });
    }
    if k == 0 || k >= emb.n {
        return Err(GdrError::InvalidK { k, n: emb.n });
    }
    let n_labels = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let correct: usize = (0..emb.n)
        .into_par_iter()
        .map_init(
            || (Vec::<(f64, u32)>::with_capacity(emb.n), vec![0usize; n_labels]),
            |(dists, votes), i| {
                dists.clear();
                let yi = emb.row(i);
                for j in 0..emb.n {
                    if j != i {
                        dists.push((sq(yi, emb.row(j)), j as u32));
                    }
                }
                dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                votes.iter_mut().for_each(|v| *v = 0);
                for &(_, j) in &dists[..k] {
                    votes[labels[j as usize] as usize] += 1;
                }
                let mut best = 0;
                for (l, &v) in votes.iter().enumerate() {
                    if v > votes[best] {
                        best = l;
                    }
                }
                usize::from(best as u32 == labels[i])
            },
        )
        .sum();
    Ok(100.0 * correct as f64 / emb.n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub labels: Vec<u32>,
    pub centers: Vec<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

const KMEANS_MAX_ITERS: usize = 300;
const KMEANS_RTOL: f64 = 1e-4;

fn kmeans_pp(emb: &EmbeddingRecord, c: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (n, d) = (emb.n, emb.d);
    let mut centers = Vec::with_capacity(c * d);
    centers.extend_from_slice(emb.row(rng.random_range(0..n)));
    let mut best: Vec<f64> = (0..n).map(|i| sq(emb.row(i), &centers[..d])).collect();
    while centers.len() < c * d {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &b) in best.iter().enumerate() {
                if r < b {
                    pick = i;
                    break;
                }
                r -= b;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let start = centers.len();
        centers.extend_from_slice(emb.row(pick));
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq(emb.row(i), &centers[start..start + d]));
        }
    }
    centers
}

fn lloyd(emb: &EmbeddingRecord, c: usize, mut centers: Vec<f64>) -> KMeansResult {
    let (n, d) = (emb.n, emb.d);
    let mut labels = vec![0u32; n];
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..KMEANS_MAX_ITERS {
        iterations = it + 1;
        let assigned: Vec<(u32, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let yi = emb.row(i);
                let mut best = (0u32, f64::INFINITY);
                for k in 0..c {
                    let dist = sq(yi, &centers[k * d..(k + 1) * d]);
                    if dist < best.1 {
                        best = (k as u32, dist);
                    }
                }
                best
            })
            .collect();
        let mut inertia = 0.0;
        for (i, &(l, dist)) in assigned.iter().enumerate() {
            labels[i] = l;
            inertia += dist;
        }
        let mut sums = vec![0.0; c * d];
        let mut counts = vec![0usize; c];
        for i in 0..n {
            let l = labels[i] as usize;
            counts[l] += 1;
            for (s, v) in sums[l * d..(l + 1) * d].iter_mut().zip(emb.row(i)) {
                *s += v;
            }
        }
        for k in 0..c {
            if counts[k] == 0 {
                // reseed an empty cluster at the point farthest from its center
                let far = (0..n)
                    .max_by(|&a, &b| assigned[a].1.total_cmp(&assigned[b].1))
                    .unwrap_or(0);
                centers[k * d..(k + 1) * d].copy_from_slice(emb.row(far));
                prev = f64::INFINITY;
                continue;
            }
            for c_ in 0..d {
                centers[k * d + c_] = sums[k * d + c_] / counts[k] as f64;
            }
        }
        if prev.is_finite() && (prev - inertia).abs() <= KMEANS_RTOL * prev.max(f64::MIN_POSITIVE) {
            break;
        }
        prev = inertia;
    }
    // final assignment against the last centers
    let mut inertia = 0.0;
    for i in 0..n {
        let yi = emb.row(i);
        let mut best = (0u32, f64::INFINITY);
        for k in 0..c {
            let dist = sq(yi, &centers[k * d..(k + 1) * d]);
            if dist < best.1 {
                best = (k as u32, dist);
            }
        }
        labels[i] = best.0;
        inertia += best.1;
    }
    KMeansResult {
        labels,
        centers,
        inertia,
        iterations,
    }
}

/// k-means++ seeding plus Lloyd iterations, best of `restarts` by inertia.
pub fn kmeans(emb: &EmbeddingRecord, c: usize, restarts: usize, seed: u64) -> Result<KMeansResult> {
    if c == 0 || c > emb.n {
        return Err(GdrError::InvalidParameter(format!(
            "kmeans needs 1 <= c <= n (got c={c}, n={})",
            emb.n
        )));
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        let res = lloyd(emb, c, kmeans_pp(emb, c, &mut rng));
        if best.as_ref().is_none_or(|b| res.inertia < b.inertia) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VMean {
    /// `(h + c) / 2`.
    #[default]
    Arithmetic,
    /// `2 h c / (h + c)`, the usual V-measure.
    Harmonic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VScore {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v: f64,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Homogeneity, completeness and their mean. Entropies in nats.
pub fn v_score(truth: &[u32], clusters: &[u32], mean: VMean) -> Result<VScore> {
    if truth.len() != clusters.len() {
        return Err(GdrError::LengthMismatch {
            left: truth.len(),
            right: clusters.len(),
        });
    }
    if truth.is_empty() {
        return Err(GdrError::InvalidParameter("empty labelings".into()));
    }
    let n = truth.len() as f64;
    let mut joint: HashMap<(u32, u32), usize> = HashMap::new();
    let mut class_counts: HashMap<u32, usize> = HashMap::new();
    let mut cluster_counts: HashMap<u32, usize> = HashMap::new();
    for (&t, &k) in truth.iter().zip(clusters) {
        *joint.entry((t, k)).or_default() += 1;
        *class_counts.entry(t).or_default() += 1;
        *cluster_counts.entry(k).or_default() += 1;
    }
    let h_c = entropy(class_counts.values().copied(), n);
    let h_k = entropy(cluster_counts.values().copied(), n);
    // H(C|K) = -sum n_ck/n log(n_ck / n_k)
    let mut h_c_given_k = 0.0;
    let mut h_k_given_c = 0.0;
    for (&(t, k), &nck) in &joint {
        let p = nck as f64 / n;
        h_c_given_k -= p * (nck as f64 / cluster_counts[&k] as f64).ln();
        h_k_given_c -= p * (nck as f64 / class_counts[&t] as f64).ln();
    }
    let homogeneity = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_k / h_c };
    let completeness = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_given_c / h_k };
    let v = match mean {
        VMean::Arithmetic => 0.5 * (homogeneity + completeness),
        VMean::Harmonic if homogeneity + completeness == 0.0 => 0.0,
        VMean::Harmonic => 2.0 * homogeneity * completeness / (homogeneity + completeness),
    };
    Ok(VScore {
        homogeneity,
        completeness,
        v,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent.
    pub knn_accuracy: f64,
    pub k_used: usize,
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_score: f64,
    pub v_mean: VMean,
    pub kmeans_inertia: f64,
    pub kmeans_clusters: usize,
    pub seeds: Vec<u64>,
    pub protocol: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub k: usize,
    pub restarts: usize,
    pub seed: u64,
    pub v_mean: VMean,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            k: 100,
            restarts: 10,
            seed: 0,
            v_mean: VMean::Arithmetic,
        }
    }
}

/// All metrics at once; k-means uses the number of distinct classes.
pub fn evaluate(emb: &EmbeddingRecord, labels: &[u32], cfg: &MetricsConfig) -> Result<MetricsReport> {
    let k = cfg.k.min(emb.n - 1);
    let knn = knn_accuracy(emb, labels, k)?;
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let km = kmeans(emb, classes.len(), cfg.restarts, cfg.seed)?;
    let vs = v_score(labels, &km.labels, cfg.v_mean)?;
    Ok(MetricsReport {
        knn_accuracy: knn,
        k_used: k,
        homogeneity: vs.homogeneity,
        completeness: vs.completeness,
        v_score: vs.v,
        v_mean: cfg.v_mean,
        kmeans_inertia: km.inertia,
        kmeans_clusters: classes.len(),
        seeds: (0..cfg.restarts.max(1) as u64).map(|r| cfg.seed.wrapping_add(r)).collect(),
        protocol: "leave-one-out".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_blobs(n: usize) -> (EmbeddingRecord, Vec<u32>) {
        let mut coords = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..n {
            let l = (i % 2) as u32;
            coords.push(l as f64 * 50.0 + rng.random_range(-1.0..1.0));
            coords.push(rng.random_range(-1.0..1.0));
            labels.push(l);
        }
        (EmbeddingRecord::new(coords, n, 2).unwrap(), labels)
    }

    #[test]
    fn separated_blobs_are_perfect() {
        let (emb, labels) = two_blobs(100);
        assert_eq!(knn_accuracy(&emb, &labels, 5).unwrap(), 100.0);
        let km = kmeans(&emb, 2, 3, 0).unwrap();
        let v = v_score(&labels, &km.labels, VMean::Arithmetic).unwrap();
        assert!((v.v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chance_level_knn() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4000;
        let coords = (0..2 * n).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let emb = EmbeddingRecord::new(coords, n, 2).unwrap();
        let acc = knn_accuracy(&emb, &labels, 100).unwrap();
        assert!((acc - 50.0).abs() <= 5.0, "{acc}");
    }

    #[test]
    fn knn_tie_goes_to_smallest_label() {
        // point 0 has neighbors 1 (label 2) and 2 (label 1) at equal distance
        let emb = EmbeddingRecord::new(vec![0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 9.0, 9.0], 4, 2).unwrap();
        let labels = [1, 2, 1, 0];
        // k=2: points 0 and 2 see a 1:1 vote between labels 1 and 2 and take 1
        assert_eq!(knn_accuracy(&emb, &labels, 2).unwrap(), 50.0);
        assert_eq!(knn_accuracy(&emb, &[2, 2, 1, 0], 2).unwrap(), 0.0);
    }

    #[test]
    fn kmeans_singletons_have_zero_inertia() {
        let (emb, _) = two_blobs(12);
        let km = kmeans(&emb, 12, 2, 0).unwrap();
        assert!(km.inertia.abs() < 1e-20);
    }

    #[test]
    fn kmeans_beats_random_assignments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 200;
        let coords: Vec<f64> = (0..2 * n).map(|_| rng.random::<f64>()).collect();
        let emb = EmbeddingRecord::new(coords, n, 2).unwrap();
        let km = kmeans(&emb, 4, 10, 0).unwrap();
        for _ in 0..100 {
            let lab: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let mut inertia = 0.0;
            for k in 0..4 {
                let m: Vec<usize> = (0..n).filter(|&i| lab[i] == k).collect();
                if m.is_empty() {
                    continue;
                }
                let cx = m.iter().map(|&i| emb.row(i)[0]).sum::<f64>() / m.len() as f64;
                let cy = m.iter().map(|&i| emb.row(i)[1]).sum::<f64>() / m.len() as f64;
                inertia += m.iter().map(|&i| sq(emb.row(i), &[cx, cy])).sum::<f64>();
            }
            assert!(km.inertia <= inertia);
        }
    }

    #[test]
    fn v_score_degenerate_cases() {
        let truth = [0, 0, 1, 1, 2, 2];
        let v = v_score(&truth, &truth, VMean::Arithmetic).unwrap();
        assert_eq!((v.homogeneity, v.completeness, v.v), (1.0, 1.0, 1.0));
        let one = [7; 6];
        let v = v_score(&truth, &one, VMean::Arithmetic).unwrap();
        assert_eq!(v.completeness, 1.0);
        assert!(v.homogeneity.abs() < 1e-15);
        assert!((v.v - 0.5).abs() < 1e-15);
        assert!(v_score(&truth, &one[..3], VMean::Arithmetic).is_err());
    }

    #[test]
    fn v_score_contingency_oracle() {
        // classes x clusters ((5,0),(0,5),(2,3)); hand-derived entropies
        let mut truth = Vec::new();
        let mut clus = Vec::new();
        for (c, row) in [[5, 0], [0, 5], [2, 3]].iter().enumerate() {
            for (k, &cnt) in row.iter().enumerate() {
                for _ in 0..cnt {
                    truth.push(c as u32);
                    clus.push(k as u32);
                }
            }
        }
        let n = 15.0f64;
        let l = |x: f64| x.ln();
        let h_c = -3.0 * (5.0 / n) * l(5.0 / n);
        let h_k = -(7.0 / n) * l(7.0 / n) - (8.0 / n) * l(8.0 / n);
        let h_c_k = -(5.0 / n) * l(5.0 / 7.0) - (2.0 / n) * l(2.0 / 7.0)
            - (5.0 / n) * l(5.0 / 8.0)
            - (3.0 / n) * l(3.0 / 8.0);
        let h_k_c = -(2.0 / n) * l(2.0 / 5.0) - (3.0 / n) * l(3.0 / 5.0);
        let h = 1.0 - h_c_k / h_c;
        let c = 1.0 - h_k_c / h_k;
        let v = v_score(&truth, &clus, VMean::Arithmetic).unwrap();
        assert!((v.homogeneity - h).abs() < 1e-12);
        assert!((v.completeness - c).abs() < 1e-12);
        assert!((v.v - (h + c) / 2.0).abs() < 1e-12);
        let hv = v_score(&truth, &clus, VMean::Harmonic).unwrap();
        assert!((hv.v - 2.0 * h * c / (h + c)).abs() < 1e-12);
    }
}
