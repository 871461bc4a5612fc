//! High-dimensional similarities: per-point calibration, symmetrization and
//! optional normalization of the kNN graph into a sparse symmetric `P`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GdrError, Result};
use crate::knn::NeighborGraph;

const BRACKET_LO: f64 = 1e-10;
const BRACKET_HI: f64 = 1e10;
const MAX_SEARCH_ITERS: usize = 100;
const PERPLEXITY_RTOL: f64 = 1e-5;
const UMAP_ATOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    /// Gaussian rows normalized to a target perplexity (`sigma_i`).
    Perplexity,
    /// Unnormalized exponential rows whose sum is `log2(k)` (`tau_i`).
    #[default]
    UmapEntropy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Symmetrization {
    /// `(p_{i|j} + p_{j|i}) / 2`
    Average,
    /// `p_{i|j} + p_{j|i} - p_{i|j} p_{j|i}`
    #[default]
    Probabilistic,
}

/// Where the nearest-neighbor shift `rho_i` is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoShift {
    /// `max(0, d^2 - rho^2)`
    #[default]
    Squared,
    /// `max(0, d - rho)^2`
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityConfig {
    pub calibration: Calibration,
    pub perplexity: f64,
    pub pseudo_distance: bool,
    pub pseudo_shift: PseudoShift,
    pub symmetrization: Symmetrization,
    pub normalize: bool,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            calibration: Calibration::UmapEntropy,
            perplexity: 30.0,
            pseudo_distance: true,
            pseudo_shift: PseudoShift::Squared,
            symmetrization: Symmetrization::Probabilistic,
            normalize: false,
        }
    }
}

impl AffinityConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.calibration == Calibration::Perplexity
            && !(self.perplexity > 1.0 && self.perplexity < k as f64)
        {
            return Err(GdrError::InvalidConfig(format!(
                "perplexity {} must lie in (1, k = {k})",
                self.perplexity
            )));
        }
        Ok(())
    }
}

/// Bisection in log space over the bracket for the root of an increasing
/// function. Runs until the bracket collapses (or the iteration cap), so the
/// result does not depend on where the tolerance happened to be crossed.
fn bisect_log(mut f: impl FnMut(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (BRACKET_LO.ln(), BRACKET_HI.ln());
    let mut best = (f64::INFINITY, 0.5 * (lo + hi));
    for _ in 0..MAX_SEARCH_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let r = f(mid);
        if r.abs() < best.0 {
            best = (r.abs(), mid);
        }
        if r == 0.0 {
            break;
        }
        if r < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    best.1
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerplexityFit {
    pub sigma: f64,
    pub p_row: Vec<f64>,
    /// `2^H` of the returned row.
    pub perplexity: f64,
    pub degenerate: bool,
}

fn gaussian_row(sq: &[f64], sq_min: f64, sigma: f64, out: &mut [f64]) -> f64 {
    let beta = 1.0 / (2.0 * sigma * sigma);
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(sq) {
        *o = (-(s - sq_min) * beta).exp();
        sum += *o;
    }
    let mut h = 0.0;
    for o in out.iter_mut() {
        *o /= sum;
        if *o > 0.0 {
            h -= *o * o.log2();
        }
    }
    h.exp2()
}

/// Binary search on `sigma` (geometric bisection over `[1e-10, 1e10]`) so
/// that the row's perplexity `2^H` matches `perplexity`.
pub fn calibrate_perplexity(row_distances: &[f64], perplexity: f64) -> Result<PerplexityFit> {
    let k = row_distances.len();
    if k < 2 || !(perplexity > 1.0 && perplexity < k as f64) {
        return Err(GdrError::InvalidParameter(format!(
            "perplexity {perplexity} must lie in (1, k = {k})"
        )));
    }
    let sq: Vec<f64> = row_distances.iter().map(|d| d * d).collect();
    let sq_min = sq.iter().copied().fold(f64::INFINITY, f64::min);
    let sq_max = sq.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p_row = vec![0.0; k];

    if sq_max - sq_min <= 0.0 {
        let sigma = (BRACKET_LO * BRACKET_HI).sqrt();
        let perp = gaussian_row(&sq, sq_min, sigma, &mut p_row);
        return Ok(PerplexityFit {
            sigma,
            p_row,
            perplexity: perp,
            degenerate: true,
        });
    }

    let log_sigma = bisect_log(|log_s| {
        gaussian_row(&sq, sq_min, log_s.exp(), &mut p_row) - perplexity
    });
    let sigma = log_sigma.exp();
    let perp = gaussian_row(&sq, sq_min, sigma, &mut p_row);
    Ok(PerplexityFit {
        sigma,
        p_row,
        perplexity: perp,
        degenerate: (perp - perplexity).abs() > PERPLEXITY_RTOL * perplexity,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct UmapFit {
    pub tau: f64,
    pub rho: f64,
    pub p_row: Vec<f64>,
    pub degenerate: bool,
}

fn shifted_sq(row_distances: &[f64], rho: f64, shift: PseudoShift) -> Vec<f64> {
    row_distances
        .iter()
        .map(|&d| match shift {
            PseudoShift::Squared => (d * d - rho * rho).max(0.0),
            PseudoShift::Linear => (d - rho).max(0.0).powi(2),
        })
        .collect()
}

fn exp_row(shifted: &[f64], tau: f64, out: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(shifted) {
        *o = (-s / tau).exp().min(1.0);
        sum += *o;
    }
    sum
}

/// Binary search on `tau` so that `sum_j exp(-shifted_j / tau) = log2(k)`.
pub fn calibrate_umap(
    row_distances: &[f64],
    pseudo_distance: bool,
    shift: PseudoShift,
) -> Result<UmapFit> {
    let k = row_distances.len();
    if k < 2 {
        return Err(GdrError::InvalidParameter(format!("need k >= 2, got {k}")));
    }
    let rho = if pseudo_distance {
        row_distances.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        0.0
    };
    let shifted = shifted_sq(row_distances, rho, shift);
    let target = (k as f64).log2();
    let mut p_row = vec![0.0; k];

    let spread = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - shifted.iter().copied().fold(f64::INFINITY, f64::min);
    if spread <= 0.0 {
        // every row entry shares one value; the target is unreachable
        let tau = BRACKET_HI;
        exp_row(&shifted, tau, &mut p_row);
        return Ok(UmapFit {
            tau,
            rho,
            p_row,
            degenerate: true,
        });
    }

    let log_tau = bisect_log(|log_t| exp_row(&shifted, log_t.exp(), &mut p_row) - target);
    let tau = log_tau.exp();
    let sum = exp_row(&shifted, tau, &mut p_row);
    Ok(UmapFit {
        tau,
        rho,
        p_row,
        degenerate: (sum - target).abs() > UMAP_ATOL,
    })
}

/// Per-point conditional rows over the kNN indices, before symmetrization.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalRows {
    pub n: usize,
    pub k: usize,
    pub indices: Vec<u32>,
    /// `p_{j|i}` for `j = indices[i*k + c]`.
    pub p: Vec<f64>,
    pub sigma_or_tau: Vec<f64>,
    pub rho: Vec<f64>,
    pub degenerate_rows: usize,
}

pub fn conditional_rows(graph: &NeighborGraph, cfg: &AffinityConfig) -> Result<ConditionalRows> {
    cfg.validate(graph.k)?;
    if graph.k < 2 {
        return Err(GdrError::InvalidParameter(format!(
            "calibration needs k >= 2 neighbors, got {}",
            graph.k
        )));
    }
    let fits: Vec<(f64, f64, Vec<f64>, bool)> = (0..graph.n)
        .into_par_iter()
        .map(|i| {
            let row = graph.row_distances(i);
            match cfg.calibration {
                Calibration::Perplexity if cfg.pseudo_distance => {
                    let rho = row.iter().copied().fold(f64::INFINITY, f64::min);
                    let shifted: Vec<f64> = shifted_sq(row, rho, cfg.pseudo_shift)
                        .into_iter()
                        .map(f64::sqrt)
                        .collect();
                    calibrate_perplexity(&shifted, cfg.perplexity)
                        .map(|f| (f.sigma, rho, f.p_row, f.degenerate))
                }
                Calibration::Perplexity => calibrate_perplexity(row, cfg.perplexity)
                    .map(|f| (f.sigma, 0.0, f.p_row, f.degenerate)),
                Calibration::UmapEntropy => {
                    calibrate_umap(row, cfg.pseudo_distance, cfg.pseudo_shift)
                        .map(|f| (f.tau, f.rho, f.p_row, f.degenerate))
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut out = ConditionalRows {
        n: graph.n,
        k: graph.k,
        indices: graph.indices.clone(),
        p: Vec::with_capacity(graph.n * graph.k),
        sigma_or_tau: Vec::with_capacity(graph.n),
        rho: Vec::with_capacity(graph.n),
        degenerate_rows: 0,
    };
    for (s, r, p, deg) in fits {
        out.sigma_or_tau.push(s);
        out.rho.push(r);
        out.p.extend(p);
        out.degenerate_rows += usize::from(deg);
    }
    Ok(out)
}

/// Sparse symmetric similarity graph. Every undirected edge is stored once
/// in `edges` (`i < j`) and twice in the CSR adjacency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityGraph {
    pub n: usize,
    pub edges: Vec<(u32, u32, f64)>,
    pub row_offsets: Vec<usize>,
    pub row_cols: Vec<u32>,
    pub row_weights: Vec<f64>,
    pub sigma_or_tau: Vec<f64>,
    pub rho: Vec<f64>,
    /// Sum over directed pairs before normalization.
    pub p_sum: f64,
    pub normalized: bool,
    pub mean_p: f64,
    /// Neighbors per point in the source kNN graph.
    pub k_neighbors: usize,
}

impl AffinityGraph {
    /// Builds the graph from undirected edges. Duplicate pairs are summed;
    /// zero weights are dropped.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (u32, u32, f64)>) -> Result<Self> {
        let mut list: Vec<(u32, u32, f64)> = Vec::new();
        for (i, j, p) in edges {
            if i == j || i as usize >= n || j as usize >= n {
                return Err(GdrError::InvalidParameter(format!("invalid edge ({i}, {j})")));
            }
            if !p.is_finite() || p < 0.0 {
                return Err(GdrError::InvalidParameter(format!(
                    "edge ({i}, {j}) has invalid weight {p}"
                )));
            }
            if p > 0.0 {
                list.push((i.min(j), i.max(j), p));
            }
        }
        list.sort_by_key(|e| (e.0, e.1));
        list.dedup_by(|b, a| {
            if (a.0, a.1) == (b.0, b.1) {
                a.2 += b.2;
                true
            } else {
                false
            }
        });
        let mut g = Self {
            n,
            edges: list,
            row_offsets: Vec::new(),
            row_cols: Vec::new(),
            row_weights: Vec::new(),
            sigma_or_tau: vec![0.0; n],
            rho: vec![0.0; n],
            p_sum: 0.0,
            normalized: false,
            mean_p: 0.0,
            k_neighbors: 0,
        };
        g.rebuild_adjacency();
        g.p_sum = g.directed_sum();
        g.k_neighbors = g.max_degree();
        Ok(g)
    }

    fn rebuild_adjacency(&mut self) {
        let mut deg = vec![0usize; self.n];
        for &(i, j, _) in &self.edges {
            deg[i as usize] += 1;
            deg[j as usize] += 1;
        }
        let mut offsets = vec![0usize; self.n + 1];
        for i in 0..self.n {
            offsets[i + 1] = offsets[i] + deg[i];
        }
        let mut fill = offsets.clone();
        let mut cols = vec![0u32; offsets[self.n]];
        let mut weights = vec![0.0; offsets[self.n]];
        for &(i, j, p) in &self.edges {
            for (a, b) in [(i, j), (j, i)] {
                let slot = fill[a as usize];
                cols[slot] = b;
                weights[slot] = p;
                fill[a as usize] += 1;
            }
        }
        for i in 0..self.n {
            let (lo, hi) = (offsets[i], offsets[i + 1]);
            let mut pairs: Vec<(u32, f64)> =
                cols[lo..hi].iter().copied().zip(weights[lo..hi].iter().copied()).collect();
            pairs.sort_by_key(|e| e.0);
            for (s, (c, w)) in pairs.into_iter().enumerate() {
                cols[lo + s] = c;
                weights[lo + s] = w;
            }
        }
        self.row_offsets = offsets;
        self.row_cols = cols;
        self.row_weights = weights;
        self.mean_p = if self.edges.is_empty() {
            0.0
        } else {
            self.edges.iter().map(|e| e.2).sum::<f64>() / self.edges.len() as f64
        };
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_directed(&self) -> usize {
        self.row_cols.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (lo, hi) = (self.row_offsets[i], self.row_offsets[i + 1]);
        (&self.row_cols[lo..hi], &self.row_weights[lo..hi])
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_offsets[i + 1] - self.row_offsets[i]
    }

    pub fn max_degree(&self) -> usize {
        (0..self.n).map(|i| self.degree(i)).max().unwrap_or(0)
    }

    /// `p_ij` for a stored pair, 0 otherwise.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let (cols, w) = self.row(i);
        match cols.binary_search(&(j as u32)) {
            Ok(pos) => w[pos],
            Err(_) => 0.0,
        }
    }

    pub fn max_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.2).fold(0.0, f64::max)
    }

    /// Sum over directed pairs (each undirected edge twice).
    pub fn directed_sum(&self) -> f64 {
        2.0 * self.edges.iter().map(|e| e.2).sum::<f64>()
    }

    /// Dense symmetric `n x n` matrix; meant for small test instances.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n * self.n];
        for &(i, j, p) in &self.edges {
            m[i as usize * self.n + j as usize] = p;
            m[j as usize * self.n + i as usize] = p;
        }
        m
    }

    /// Multiplies every weight by `factor` (used for exaggeration phases).
    pub fn scaled(&self, factor: f64) -> Self {
        let mut g = self.clone();
        for e in &mut g.edges {
            e.2 *= factor;
        }
        for w in &mut g.row_weights {
            *w *= factor;
        }
        g.mean_p *= factor;
        g
    }

    /// Connected components as a label per point.
    pub fn components(&self) -> (usize, Vec<usize>) {
        let mut label = vec![usize::MAX; self.n];
        let mut count = 0;
        let mut stack = Vec::new();
        for s in 0..self.n {
            if label[s] != usize::MAX {
                continue;
            }
            label[s] = count;
            stack.push(s);
            while let Some(u) = stack.pop() {
                for &v in self.row(u).0 {
                    let v = v as usize;
                    if label[v] == usize::MAX {
                        label[v] = count;
                        stack.push(v);
                    }
                }
            }
            count += 1;
        }
        (count, label)
    }
}

/// Combines `p_{j|i}` and `p_{i|j}` per unordered pair; a missing direction
/// counts as 0.
pub fn symmetrize(rows: &ConditionalRows, mode: Symmetrization) -> Result<AffinityGraph> {
    let mut directed: Vec<(u64, bool, f64)> = Vec::with_capacity(rows.n * rows.k);
    for i in 0..rows.n {
        for c in 0..rows.k {
            let j = rows.indices[i * rows.k + c] as usize;
            let p = rows.p[i * rows.k + c];
            if j == i || p <= 0.0 {
                continue;
            }
            let (lo, hi, forward) = if i < j { (i, j, true) } else { (j, i, false) };
            directed.push((((lo as u64) << 32) | hi as u64, forward, p));
        }
    }
    directed.par_sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut edges = Vec::with_capacity(directed.len());
    let mut idx = 0;
    while idx < directed.len() {
        let key = directed[idx].0;
        let (mut fwd, mut bwd) = (0.0f64, 0.0f64);
        while idx < directed.len() && directed[idx].0 == key {
            if directed[idx].1 {
                fwd = fwd.max(directed[idx].2);
            } else {
                bwd = bwd.max(directed[idx].2);
            }
            idx += 1;
        }
        let p = match mode {
            Symmetrization::Average => 0.5 * (fwd + bwd),
            Symmetrization::Probabilistic => fwd + bwd - fwd * bwd,
        };
        if p > 0.0 {
            edges.push(((key >> 32) as u32, (key & 0xffff_ffff) as u32, p));
        }
    }
    let mut g = AffinityGraph::from_edges(rows.n, edges)?;
    g.sigma_or_tau = rows.sigma_or_tau.clone();
    g.rho = rows.rho.clone();
    g.k_neighbors = rows.k;
    Ok(g)
}

/// Divides every weight by the directed sum so `sum_{i != j} p_ij = 1`.
pub fn normalize_affinities(g: &AffinityGraph) -> Result<AffinityGraph> {
    if g.edges.is_empty() {
        return Err(GdrError::EmptyGraph);
    }
    let total = g.directed_sum();
    if total <= 0.0 {
        return Err(GdrError::EmptyGraph);
    }
    let mut out = g.clone();
    for e in &mut out.edges {
        e.2 /= total;
    }
    for w in &mut out.row_weights {
        *w /= total;
    }
    out.mean_p = out.edges.iter().map(|e| e.2).sum::<f64>() / out.edges.len() as f64;
    out.normalized = true;
    if !g.normalized {
        out.p_sum = total;
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AffinityStats {
    pub degenerate_rows: usize,
    pub edges: usize,
}

/// Calibration, symmetrization and (optionally) normalization in one go.
pub fn build_affinity(
    graph: &NeighborGraph,
    cfg: &AffinityConfig,
) -> Result<(AffinityGraph, AffinityStats)> {
    let rows = conditional_rows(graph, cfg)?;
    let mut g = symmetrize(&rows, cfg.symmetrization)?;
    if cfg.normalize {
        g = normalize_affinities(&g)?;
    }
    let stats = AffinityStats {
        degenerate_rows: rows.degenerate_rows,
        edges: g.num_edges(),
    };
    Ok((g, stats))
}
