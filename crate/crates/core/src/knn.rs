//! High-dimensional nearest-neighbor graphs.
//!
//! [`exact_knn`] is a blocked brute-force scan; [`nn_descent`] is the usual
//! neighbor-of-neighbor refinement. Both return rows sorted by `(distance,
//! index)`, so ties always resolve toward the smaller index.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DenseDataset, Metric};
use crate::error::{GdrError, Result};

const CACHE_MAGIC: &[u8; 8] = b"GDRKNN1\0";

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    pub n: usize,
    pub k: usize,
    /// `n x k`, row-major.
    pub indices: Vec<u32>,
    /// `n x k`, row-major, metric units.
    pub distances: Vec<f64>,
    pub metric: Metric,
    pub exact: bool,
}

impl NeighborGraph {
    #[inline]
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    #[inline]
    pub fn row_distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }

    /// Keeps the first `k` neighbors of every row.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k {
            return Err(GdrError::InvalidParameter(format!(
                "cannot truncate a {}-NN graph to k={k}",
                self.k
            )));
        }
        let mut indices = Vec::with_capacity(self.n * k);
        let mut distances = Vec::with_capacity(self.n * k);
        for i in 0..self.n {
            indices.extend_from_slice(&self.neighbors(i)[..k]);
            distances.extend_from_slice(&self.row_distances(i)[..k]);
        }
        Ok(Self {
            n: self.n,
            k,
            indices,
            distances,
            metric: self.metric,
            exact: self.exact,
        })
    }

    /// Fraction of `reference` neighbor entries that also appear in `self`.
    pub fn recall(&self, reference: &NeighborGraph) -> f64 {
        assert_eq!(self.n, reference.n);
        let mut hits = 0usize;
        for i in 0..self.n {
            let mine = self.neighbors(i);
            hits += reference
                .neighbors(i)
                .iter()
                .filter(|j| mine.contains(j))
                .count();
        }
        hits as f64 / (self.n * reference.k) as f64
    }

    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| GdrError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| GdrError::io(path, e);
        w.write_all(CACHE_MAGIC).map_err(io)?;
        w.write_all(&(self.n as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.k as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&[self.metric as u8, u8::from(self.exact)]).map_err(io)?;
        for v in &self.indices {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for v in &self.distances {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_cache(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| GdrError::io(path, e))?;
        if bytes.len() < 26 || &bytes[..8] != CACHE_MAGIC {
            return Err(GdrError::InvalidParameter(format!(
                "{} is not a neighbor-graph cache file",
                path.display()
            )));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let k = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let metric = match bytes[24] {
            0 => Metric::Euclidean,
            1 => Metric::Cosine,
            m => return Err(GdrError::InvalidParameter(format!("unknown metric tag {m}"))),
        };
        let exact = bytes[25] != 0;
        let expected = 26 + n * k * 12;
        if bytes.len() != expected {
            return Err(GdrError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let idx_end = 26 + n * k * 4;
        let indices = bytes[26..idx_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let distances = bytes[idx_end..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            n,
            k,
            indices,
            distances,
            metric,
            exact,
        })
    }
}

#[inline]
pub fn squared_euclidean(x: &[f32], y: &[f32]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            let d = (a[l] - b[l]) as f64;
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (a, b) in xr.iter().zip(yr) {
        let d = (a - b) as f64;
        tail += d * d;
    }
    acc.iter().sum::<f64>() + tail
}

#[inline]
pub fn euclidean(x: &[f32], y: &[f32]) -> f64 {
    squared_euclidean(x, y).sqrt()
}

#[inline]
fn dot(x: &[f32], y: &[f32]) -> f64 {
    let mut acc = [0.0f64; 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] as f64 * b[l] as f64;
        }
    }
    acc.iter().sum::<f64>() + xr.iter().zip(yr).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>()
}

/// `1 - <x,y> / (|x| |y|)`, and 0 when either norm is 0.
pub fn cosine(x: &[f32], y: &[f32]) -> f64 {
    let nx = dot(x, x).sqrt();
    let ny = dot(y, y).sqrt();
    cosine_with_norms(x, y, nx, ny)
}

#[inline]
fn cosine_with_norms(x: &[f32], y: &[f32], nx: f64, ny: f64) -> f64 {
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    (1.0 - dot(x, y) / (nx * ny)).max(0.0)
}

pub fn distance(metric: Metric, x: &[f32], y: &[f32]) -> f64 {
    match metric {
        Metric::Euclidean => euclidean(x, y),
        Metric::Cosine => cosine(x, y),
    }
}

/// Ascending `(distance, index)` list capped at `k` entries.
#[derive(Clone, Debug)]
struct TopK {
    k: usize,
    items: Vec<(f64, u32)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn worst(&self) -> Option<(f64, u32)> {
        if self.items.len() < self.k {
            None
        } else {
            self.items.last().copied()
        }
    }

    #[inline]
    fn push(&mut self, d: f64, j: u32) {
        if let Some(w) = self.worst() {
            if (d, j) >= w {
                return;
            }
        }
        let pos = self.items.partition_point(|&e| e < (d, j));
        self.items.insert(pos, (d, j));
        self.items.truncate(self.k);
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(GdrError::InvalidK { k, n });
    }
    Ok(())
}

/// Exact `k` nearest neighbors of every point, self excluded.
pub fn exact_knn(data: &DenseDataset, k: usize) -> Result<NeighborGraph> {
    let n = data.n();
    check_k(n, k)?;
    const ROW_BLOCK: usize = 16;
    const COL_BLOCK: usize = 256;

    let norms: Vec<f64> = match data.metric {
        Metric::Cosine => (0..n).map(|i| dot(data.row(i), data.row(i)).sqrt()).collect(),
        Metric::Euclidean => Vec::new(),
    };

    let blocks: Vec<Vec<TopK>> = (0..n.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|b| {
            let lo = b * ROW_BLOCK;
            let hi = (lo + ROW_BLOCK).min(n);
            let mut tops: Vec<TopK> = (lo..hi).map(|_| TopK::new(k)).collect();
            for jb in (0..n).step_by(COL_BLOCK) {
                let je = (jb + COL_BLOCK).min(n);
                for (t, i) in tops.iter_mut().zip(lo..hi) {
                    let xi = data.row(i);
                    for j in jb..je {
                        if j == i {
                            continue;
                        }
                        let d = match data.metric {
                            Metric::Euclidean => squared_euclidean(xi, data.row(j)),
                            Metric::Cosine => {
                                cosine_with_norms(xi, data.row(j), norms[i], norms[j])
                            }
                        };
                        t.push(d, j as u32);
                    }
                }
            }
            tops
        })
        .collect();

    let mut indices = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    for t in blocks.into_iter().flatten() {
        for (d, j) in t.items {
            indices.push(j);
            distances.push(match data.metric {
                Metric::Euclidean => d.sqrt(),
                Metric::Cosine => d,
            });
        }
    }
    Ok(NeighborGraph {
        n,
        k,
        indices,
        distances,
        metric: data.metric,
        exact: true,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnDescentParams {
    pub sample_rate: f64,
    /// Stop once fewer than `delta * n * k` entries change in an iteration.
    pub delta: f64,
    pub max_iters: usize,
}

impl Default for NnDescentParams {
    fn default() -> Self {
        Self {
            sample_rate: 0.5,
            delta: 0.001,
            max_iters: 10,
        }
    }
}

struct Candidates {
    k: usize,
    // (distance, index, is_new), ascending by (distance, index)
    items: Vec<(f64, u32, bool)>,
}

impl Candidates {
    fn contains(&self, j: u32) -> bool {
        self.items.iter().any(|e| e.1 == j)
    }

    fn push(&mut self, d: f64, j: u32) -> bool {
        if self.items.len() == self.k {
            let last = self.items[self.k - 1];
            if (d, j) >= (last.0, last.1) {
                return false;
            }
        }
        if self.contains(j) {
            return false;
        }
        let pos = self.items.partition_point(|e| (e.0, e.1) < (d, j));
        self.items.insert(pos, (d, j, true));
        self.items.truncate(self.k);
        true
    }
}

/// Approximate kNN by NN-descent from a random initial graph.
pub fn nn_descent(
    data: &DenseDataset,
    k: usize,
    seed: u64,
    params: NnDescentParams,
) -> Result<NeighborGraph> {
    let n = data.n();
    check_k(n, k)?;
    let metric = data.metric;
    let dist = |i: usize, j: usize| distance(metric, data.row(i), data.row(j));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut heaps: Vec<Candidates> = (0..n)
        .map(|i| {
            let mut c = Candidates {
                k,
                items: Vec::with_capacity(k + 1),
            };
            for j in rand::seq::index::sample(&mut rng, n - 1, k) {
                let j = if j >= i { j + 1 } else { j };
                c.push(dist(i, j), j as u32);
            }
            c
        })
        .collect();

    let sample_cap = ((params.sample_rate * k as f64).ceil() as usize).max(1);
    for _ in 0..params.max_iters {
        let mut new_fwd: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut old_fwd: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (i, h) in heaps.iter_mut().enumerate() {
            let mut fresh: Vec<usize> = (0..h.items.len()).filter(|&p| h.items[p].2).collect();
            fresh.shuffle(&mut rng);
            fresh.truncate(sample_cap);
            for &p in &fresh {
                h.items[p].2 = false;
                new_fwd[i].push(h.items[p].1);
            }
            for e in &h.items {
                if !e.2 && !new_fwd[i].contains(&e.1) {
                    old_fwd[i].push(e.1);
                }
            }
        }
        let mut new_rev: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut old_rev: Vec<Vec<u32>> = vec![Vec::new(); n];
        for i in 0..n {
            for &j in &new_fwd[i] {
                new_rev[j as usize].push(i as u32);
            }
            for &j in &old_fwd[i] {
                old_rev[j as usize].push(i as u32);
            }
        }
        let mut updates = 0usize;
        for i in 0..n {
            let mut new_c = new_fwd[i].clone();
            new_rev[i].shuffle(&mut rng);
            for &r in new_rev[i].iter().take(sample_cap) {
                if !new_c.contains(&r) {
                    new_c.push(r);
                }
            }
            let mut old_c = old_fwd[i].clone();
            old_rev[i].shuffle(&mut rng);
            for &r in old_rev[i].iter().take(sample_cap) {
                if !old_c.contains(&r) && !new_c.contains(&r) {
                    old_c.push(r);
                }
            }
            for a in 0..new_c.len() {
                let u = new_c[a] as usize;
                let partners = new_c[a + 1..].iter().chain(old_c.iter());
                for &v in partners {
                    let v = v as usize;
                    if u == v {
                        continue;
                    }
                    let d = dist(u, v);
                    updates += usize::from(heaps[u].push(d, v as u32));
                    updates += usize::from(heaps[v].push(d, u as u32));
                }
            }
        }
        if (updates as f64) < params.delta * (n * k) as f64 {
            break;
        }
    }

    let mut indices = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    for h in &heaps {
        for e in &h.items {
            indices.push(e.1);
            distances.push(e.0);
        }
    }
    Ok(NeighborGraph {
        n,
        k,
        indices,
        distances,
        metric,
        exact: false,
    })
}

/// Builds (or loads from `cache_dir`) the neighbor graph. Cache files are
/// keyed by dataset content hash, `k` and exactness.
pub fn build_graph(
    data: &DenseDataset,
    k: usize,
    exact: bool,
    seed: u64,
    cache_dir: Option<&Path>,
) -> Result<NeighborGraph> {
    let path: Option<PathBuf> = cache_dir.map(|dir| {
        let mode = if exact {
            "exact".to_string()
        } else {
            format!("approx{seed}")
        };
        dir.join(format!("{}_k{k}_{mode}.knn", &data.content_hash()[..24]))
    });
    if let Some(p) = &path {
        if p.exists() {
            if let Ok(g) = NeighborGraph::read_cache(p) {
                if g.n == data.n() && g.k == k && g.exact == exact {
                    return Ok(g);
                }
            }
        }
    }
    let g = if exact {
        exact_knn(data, k)?
    } else {
        nn_descent(data, k, seed, NnDescentParams::default())?
    };
    if let Some(p) = &path {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| GdrError::io(dir, e))?;
        }
        g.write_cache(p)?;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;

    fn line(points: &[f32]) -> DenseDataset {
        DenseDataset::new(points.to_vec(), points.len(), 1, None, "line").unwrap()
    }

    #[test]
    fn distance_kernels() {
        assert_eq!(euclidean(&[0.0, 0.0], &[3.0, 4.0]), 5.0);
        assert!(cosine(&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0]).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn exact_on_a_line() {
        let g = exact_knn(&line(&[0.0, 1.0, 3.0]), 1).unwrap();
        assert_eq!(g.indices, vec![1, 0, 1]);
        assert_eq!(g.distances, vec![1.0, 1.0, 2.0]);
        assert!(g.exact);
    }

    #[test]
    fn exact_duplicate_tie_goes_to_lower_index() {
        let g = exact_knn(&line(&[5.0, 2.0, 5.0, 5.0]), 1).unwrap();
        assert_eq!(g.neighbors(0), &[2]);
        assert_eq!(g.neighbors(2), &[0]);
        assert_eq!(g.neighbors(3), &[0]);
        assert_eq!(g.row_distances(3), &[0.0]);
    }

    #[test]
    fn k_must_be_below_n() {
        assert!(matches!(
            exact_knn(&line(&[0.0, 1.0]), 2),
            Err(GdrError::InvalidK { k: 2, n: 2 })
        ));
        assert!(nn_descent(&line(&[0.0, 1.0]), 2, 0, NnDescentParams::default()).is_err());
    }

    #[test]
    fn nn_descent_full_graph_when_k_is_n_minus_one() {
        let data = make_blobs(40, 2, 3, 5.0, 2).unwrap();
        let exact = exact_knn(&data, 39).unwrap();
        let approx = nn_descent(&data, 39, 5, NnDescentParams::default()).unwrap();
        assert_eq!(approx.recall(&exact), 1.0);
    }

    #[test]
    fn nn_descent_is_deterministic() {
        let data = make_blobs(300, 3, 5, 8.0, 4).unwrap();
        let a = nn_descent(&data, 10, 11, NnDescentParams::default()).unwrap();
        let b = nn_descent(&data, 10, 11, NnDescentParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncate_keeps_prefix() {
        let data = make_blobs(60, 2, 3, 5.0, 2).unwrap();
        let g = exact_knn(&data, 10).unwrap();
        assert_eq!(g.truncate(4).unwrap(), exact_knn(&data, 4).unwrap());
    }

    #[test]
    fn cache_round_trip() {
        let data = make_blobs(50, 2, 3, 5.0, 2).unwrap();
        let g = exact_knn(&data, 5).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        g.write_cache(f.path()).unwrap();
        assert_eq!(NeighborGraph::read_cache(f.path()).unwrap(), g);
        let dir = tempfile::tempdir().unwrap();
        let first = build_graph(&data, 5, true, 0, Some(dir.path())).unwrap();
        let second = build_graph(&data, 5, true, 0, Some(dir.path())).unwrap();
        assert_eq!(first, second);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn cosine_graph() {
        let pts = vec![1.0, 0.0, 0.9, 0.1, 0.0, 1.0, -1.0, 0.0];
        let data = DenseDataset::new(pts, 4, 2, None, "c")
            .unwrap()
            .with_metric(Metric::Cosine);
        let g = exact_knn(&data, 1).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(2), &[1]);
    }
}
