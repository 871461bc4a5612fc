//! Initial embeddings: small Gaussian noise or a Laplacian eigenmap of the
//! affinity graph.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::affinity::AffinityGraph;
use crate::data::EmbeddingRecord;
use crate::error::{GdrError, Result};

/// Components up to this size use a dense eigendecomposition.
pub const DENSE_LIMIT: usize = 2000;
/// Target for `||L v - lambda v||` on every returned pair.
pub const RESIDUAL_TOL: f64 = 1e-6;
const MAX_RESTARTS: usize = 400;
const GRID_SPACING: f64 = 3.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Random,
    #[default]
    Spectral,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub mode: InitMode,
    pub seed: u64,
    pub random_sd: f64,
    pub spectral_scale: f64,
    /// Use affinity weights as adjacency; binarized edges otherwise.
    pub weighted: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            mode: InitMode::Spectral,
            seed: 0,
            random_sd: 1e-2,
            spectral_scale: 10.0,
            weighted: true,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.random_sd > 0.0 && self.spectral_scale > 0.0) {
            return Err(GdrError::InvalidConfig(
                "random_sd and spectral_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitOutcome {
    pub embedding: EmbeddingRecord,
    pub mode: InitMode,
    /// Spectral solve failed and random init was used instead.
    pub fell_back: bool,
    pub components: usize,
    pub max_residual: f64,
}

pub fn random_init(n: usize, d: usize, cfg: &InitConfig) -> Result<EmbeddingRecord> {
    if n < 2 || d == 0 {
        return Err(GdrError::InvalidParameter(format!(
            "random init needs n >= 2 and d >= 1 (got n={n}, d={d})"
        )));
    }
    cfg.validate()?;
    let normal = Normal::new(0.0, cfg.random_sd)
        .map_err(|e| GdrError::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
    EmbeddingRecord::new(coords, n, d)
}

/// Dispatches on `cfg.mode`; spectral failures fall back to random.
pub fn initialize(g: &AffinityGraph, d: usize, cfg: &InitConfig) -> Result<InitOutcome> {
    match cfg.mode {
        InitMode::Random => Ok(InitOutcome {
            embedding: random_init(g.n, d, cfg)?,
            mode: InitMode::Random,
            fell_back: false,
            components: g.components().0,
            max_residual: 0.0,
        }),
        InitMode::Spectral => spectral_init(g, d, cfg),
    }
}

/// Symmetric weighted adjacency of one connected component, local indices.
#[derive(Clone, Debug)]
pub struct ComponentGraph {
    pub members: Vec<usize>,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    degree: Vec<f64>,
}

impl ComponentGraph {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    fn from_members(g: &AffinityGraph, members: Vec<usize>, weighted: bool) -> Self {
        let mut local = vec![usize::MAX; g.n];
        for (l, &i) in members.iter().enumerate() {
            local[i] = l;
        }
        let mut offsets = Vec::with_capacity(members.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut degree = Vec::with_capacity(members.len());
        offsets.push(0);
        for &i in &members {
            let (c, w) = g.row(i);
            let mut deg = 0.0;
            for (&j, &wij) in c.iter().zip(w) {
                let v = if weighted { wij } else { 1.0 };
                cols.push(local[j as usize]);
                weights.push(v);
                deg += v;
            }
            degree.push(deg);
            offsets.push(cols.len());
        }
        Self {
            members,
            offsets,
            cols,
            weights,
            degree,
        }
    }

    /// `out = D^{-1/2} A D^{-1/2} x`.
    fn normalized_adjacency(&self, inv_sqrt: &[f64], x: &[f64], out: &mut [f64]) {
        for i in 0..self.len() {
            let mut acc = 0.0;
            for e in self.offsets[i]..self.offsets[i + 1] {
                let j = self.cols[e];
                acc += self.weights[e] * inv_sqrt[j] * x[j];
            }
            out[i] = inv_sqrt[i] * acc;
        }
    }

    /// `||L v - lambda v||` for the symmetric normalized Laplacian.
    pub fn laplacian_residual(&self, v: &[f64], lambda: f64) -> f64 {
        let inv_sqrt = inv_sqrt_degree(&self.degree);
        let mut mv = vec![0.0; v.len()];
        self.normalized_adjacency(&inv_sqrt, v, &mut mv);
        v.iter()
            .zip(&mv)
            .map(|(&x, &m)| {
                let lv = x - m;
                (lv - lambda * x).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    fn dense_laplacian(&self) -> DMatrix<f64> {
        let n = self.len();
        let inv_sqrt = inv_sqrt_degree(&self.degree);
        let mut l = DMatrix::<f64>::identity(n, n);
        for i in 0..n {
            for e in self.offsets[i]..self.offsets[i + 1] {
                let j = self.cols[e];
                l[(i, j)] -= self.weights[e] * inv_sqrt[i] * inv_sqrt[j];
            }
        }
        l
    }
}

fn inv_sqrt_degree(degree: &[f64]) -> Vec<f64> {
    degree
        .iter()
        .map(|&s| if s > 0.0 { 1.0 / s.sqrt() } else { 0.0 })
        .collect()
}

/// Splits the graph into connected components, largest first.
pub fn component_graphs(g: &AffinityGraph, weighted: bool) -> Vec<ComponentGraph> {
    let (count, labels) = g.components();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (i, &c) in labels.iter().enumerate() {
        groups[c].push(i);
    }
    groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    groups
        .into_iter()
        .map(|m| ComponentGraph::from_members(g, m, weighted))
        .collect()
}

/// Nontrivial eigenpairs of the normalized Laplacian of one component.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralPairs {
    /// Ascending, trivial pair excluded.
    pub values: Vec<f64>,
    /// One unit vector per value, local indexing.
    pub vectors: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub dense: bool,
}

/// Eigenpairs 2..=d+1 (ascending) of `I - D^{-1/2} A D^{-1/2}`. Fewer pairs
/// come back when the component has at most `d` points.
pub fn laplacian_eigenpairs(c: &ComponentGraph, d: usize, seed: u64) -> Result<SpectralPairs> {
    let n = c.len();
    let want = d.min(n.saturating_sub(1));
    if want == 0 {
        return Ok(SpectralPairs {
            values: vec![],
            vectors: vec![],
            residuals: vec![],
            dense: true,
        });
    }
    let (values, mut vectors, dense) = if n <= DENSE_LIMIT {
        let eig = SymmetricEigen::new(c.dense_laplacian());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values: Vec<f64> = order[1..=want].iter().map(|&k| eig.eigenvalues[k]).collect();
        let vectors: Vec<Vec<f64>> = order[1..=want]
            .iter()
            .map(|&k| eig.eigenvectors.column(k).iter().copied().collect())
            .collect();
        (values, vectors, true)
    } else {
        let (values, vectors) = lanczos_smallest(c, want, seed)?;
        (values, vectors, false)
    };
    for v in &mut vectors {
        orient(v);
    }
    let residuals = values
        .iter()
        .zip(&vectors)
        .map(|(&l, v)| c.laplacian_residual(v, l))
        .collect();
    Ok(SpectralPairs {
        values,
        vectors,
        residuals,
        dense,
    })
}

/// Largest-magnitude entry positive, so orientation is reproducible.
fn orient(v: &mut [f64]) {
    let mut best = 0.0f64;
    for &x in v.iter() {
        if x.abs() > best.abs() {
            best = x;
        }
    }
    if best < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let nrm = dot(v, v).sqrt();
    if nrm > 0.0 {
        v.iter_mut().for_each(|x| *x /= nrm);
    }
    nrm
}

/// Thick-restart Lanczos for the `want` largest eigenvalues of
/// `M' = (I + D^{-1/2} A D^{-1/2}) / 2` with the trivial vector deflated.
/// Returns Laplacian eigenvalues `2 - 2 mu` ascending.
fn lanczos_smallest(c: &ComponentGraph, want: usize, seed: u64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = c.len();
    let inv_sqrt = inv_sqrt_degree(&c.degree);
    let mut trivial: Vec<f64> = c.degree.iter().map(|s| s.sqrt()).collect();
    normalize(&mut trivial);
    let mut scratch = vec![0.0; n];
    let mut op = |x: &[f64], out: &mut [f64]| {
        c.normalized_adjacency(&inv_sqrt, x, &mut scratch);
        for i in 0..n {
            out[i] = 0.5 * (x[i] + scratch[i]);
        }
    };
    let deflate = |v: &mut [f64]| {
        let h = dot(&trivial, v);
        axpy(-h, &trivial, v);
    };
    // residual of M' maps to twice the Laplacian residual
    let tol = 0.25 * RESIDUAL_TOL;
    let m = (2 * want + 30).max(40).min(n - 1);
    let keep = (want + (m - want) / 2).min(m - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a2c);

    let random_unit = |rng: &mut ChaCha8Rng, basis: &[Vec<f64>]| -> Vec<f64> {
        loop {
            let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            deflate(&mut v);
            for _ in 0..2 {
                for b in basis {
                    let h = dot(b, &v);
                    axpy(-h, b, &mut v);
                }
            }
            if normalize(&mut v) > 1e-8 {
                return v;
            }
        }
    };

    let mut basis: Vec<Vec<f64>> = vec![random_unit(&mut rng, &[])];
    let mut h = DMatrix::<f64>::zeros(m, m);
    let mut start = 0;
    let mut w = vec![0.0; n];
    for _restart in 0..MAX_RESTARTS {
        let mut beta = 0.0;
        for j in start..m {
            op(&basis[j], &mut w);
            deflate(&mut w);
            let mut coeffs = vec![0.0; j + 1];
            for _ in 0..2 {
                for (i, b) in basis.iter().enumerate().take(j + 1) {
                    let hij = dot(b, &w);
                    coeffs[i] += hij;
                    axpy(-hij, b, &mut w);
                }
                deflate(&mut w);
            }
            for (i, &hij) in coeffs.iter().enumerate() {
                h[(i, j)] = hij;
                h[(j, i)] = hij;
            }
            beta = dot(&w, &w).sqrt();
            let next = if beta > 1e-12 {
                w.iter().map(|x| x / beta).collect()
            } else {
                beta = 0.0;
                random_unit(&mut rng, &basis)
            };
            if basis.len() == j + 1 {
                basis.push(next);
            } else {
                basis[j + 1] = next;
            }
        }
        let eig = SymmetricEigen::new(h.clone());
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let coupling: Vec<f64> = order
            .iter()
            .map(|&k| beta * eig.eigenvectors[(m - 1, k)])
            .collect();
        let converged = coupling[..want].iter().all(|r| r.abs() <= tol);
        let ritz = |k: usize| -> Vec<f64> {
            let mut v = vec![0.0; n];
            for (i, b) in basis.iter().enumerate().take(m) {
                axpy(eig.eigenvectors[(i, k)], b, &mut v);
            }
            v
        };
        if converged {
            let values = order[..want]
                .iter()
                .map(|&k| 2.0 - 2.0 * eig.eigenvalues[k])
                .collect();
            let vectors = order[..want]
                .iter()
                .map(|&k| {
                    let mut v = ritz(k);
                    normalize(&mut v);
                    v
                })
                .collect();
            return Ok((values, vectors));
        }
        let residual_dir = basis[m].clone();
        let mut fresh: Vec<Vec<f64>> = order[..keep].iter().map(|&k| ritz(k)).collect();
        fresh.push(residual_dir);
        basis = fresh;
        h.fill(0.0);
        for (i, &k) in order[..keep].iter().enumerate() {
            h[(i, i)] = eig.eigenvalues[k];
            h[(i, keep)] = coupling[i];
            h[(keep, i)] = coupling[i];
        }
        start = keep;
    }
    Err(GdrError::NoConvergence {
        iterations: MAX_RESTARTS,
        what: "Lanczos eigensolver".into(),
    })
}

/// Laplacian eigenmap per component, components laid out on a grid, the
/// whole embedding rescaled so its max absolute coordinate is
/// `spectral_scale`.
pub fn spectral_init(g: &AffinityGraph, d: usize, cfg: &InitConfig) -> Result<InitOutcome> {
    cfg.validate()?;
    if d == 0 {
        return Err(GdrError::InvalidParameter("d must be >= 1".into()));
    }
    let comps = component_graphs(g, cfg.weighted);
    let mut coords = vec![0.0; g.n * d];
    let side = (comps.len() as f64).sqrt().ceil() as usize;
    let mut max_residual = 0.0f64;
    for (ci, comp) in comps.iter().enumerate() {
        let pairs = match laplacian_eigenpairs(comp, d, cfg.seed.wrapping_add(ci as u64)) {
            Ok(p) => p,
            Err(GdrError::NoConvergence { .. }) => {
                return Ok(InitOutcome {
                    embedding: random_init(g.n, d, cfg)?,
                    mode: InitMode::Random,
                    fell_back: true,
                    components: comps.len(),
                    max_residual: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        for r in &pairs.residuals {
            max_residual = max_residual.max(*r);
        }
        let offset = [
            GRID_SPACING * (ci % side) as f64,
            GRID_SPACING * (ci / side) as f64,
        ];
        for (axis, v) in pairs.vectors.iter().enumerate() {
            let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let s = if peak > 0.0 { 1.0 / peak } else { 0.0 };
            for (l, &i) in comp.members.iter().enumerate() {
                coords[i * d + axis] = v[l] * s;
            }
        }
        if comps.len() > 1 {
            for &i in &comp.members {
                for (axis, off) in offset.iter().enumerate().take(d) {
                    coords[i * d + axis] += off;
                }
            }
        }
    }
    let peak = coords.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        let s = cfg.spectral_scale / peak;
        coords.iter_mut().for_each(|x| *x *= s);
    }
    if max_residual > RESIDUAL_TOL {
        return Ok(InitOutcome {
            embedding: random_init(g.n, d, cfg)?,
            mode: InitMode::Random,
            fell_back: true,
            components: comps.len(),
            max_residual,
        });
    }
    Ok(InitOutcome {
        embedding: EmbeddingRecord::new(coords, g.n, d)?,
        mode: InitMode::Spectral,
        fell_back: false,
        components: comps.len(),
        max_residual,
    })
}
