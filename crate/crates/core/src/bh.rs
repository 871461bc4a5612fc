//! Barnes-Hut quadtree over a 2-D embedding. Cells far enough from a query
//! point are summarized by their centroid; this gives the repulsive sums and
//! the kernel normalizer `Z` in `O(n log n)` per epoch.

use crate::data::EmbeddingRecord;
use crate::error::{GdrError, Result};
use crate::kernels::{q_unnorm, KernelParams};

/// Deepest subdivision; coincident points below this share one leaf.
pub const MAX_DEPTH: usize = 48;
const NONE: u32 = u32::MAX;

#[derive(Clone, Debug)]
struct Node {
    center: [f64; 2],
    half: f64,
    mass: f64,
    com: [f64; 2],
    children: [u32; 4],
    /// Range into `order` for leaves.
    start: u32,
    end: u32,
    leaf: bool,
}

#[derive(Clone, Debug)]
pub struct QuadTree {
    nodes: Vec<Node>,
    order: Vec<u32>,
    coords: Vec<f64>,
    depth: usize,
}

impl QuadTree {
    pub fn build(y: &EmbeddingRecord) -> Result<Self> {
        if y.d != 2 {
            return Err(GdrError::UnsupportedDimension(y.d));
        }
        if !y.is_finite() {
            return Err(GdrError::InvalidParameter("non-finite coordinates".into()));
        }
        let n = y.n;
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for i in 0..n {
            let p = y.row(i);
            for c in 0..2 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
        let half = (0.5 * (hi[0] - lo[0]).max(hi[1] - lo[1])).max(1e-12) * (1.0 + 1e-9);
        let mut tree = QuadTree {
            nodes: Vec::with_capacity(2 * n),
            order: (0..n as u32).collect(),
            coords: y.coords.clone(),
            depth: 0,
        };
        let mut scratch = vec![0u32; n];
        tree.build_node(0, n, center, half, 0, &mut scratch);
        Ok(tree)
    }

    fn build_node(
        &mut self,
        start: usize,
        end: usize,
        center: [f64; 2],
        half: f64,
        depth: usize,
        scratch: &mut [u32],
    ) -> u32 {
        self.depth = self.depth.max(depth);
        let id = self.nodes.len() as u32;
        let mut com = [0.0; 2];
        for &i in &self.order[start..end] {
            com[0] += self.coords[2 * i as usize];
            com[1] += self.coords[2 * i as usize + 1];
        }
        let mass = (end - start) as f64;
        com[0] /= mass;
        com[1] /= mass;
        let leaf = end - start <= 1 || depth >= MAX_DEPTH;
        self.nodes.push(Node {
            center,
            half,
            mass,
            com,
            children: [NONE; 4],
            start: start as u32,
            end: end as u32,
            leaf,
        });
        if leaf {
            return id;
        }
        let quadrant = |x: f64, y: f64| usize::from(x >= center[0]) | (usize::from(y >= center[1]) << 1);
        let mut counts = [0usize; 4];
        for &i in &self.order[start..end] {
            let q = quadrant(self.coords[2 * i as usize], self.coords[2 * i as usize + 1]);
            counts[q] += 1;
        }
        let mut offsets = [0usize; 5];
        for q in 0..4 {
            offsets[q + 1] = offsets[q] + counts[q];
        }
        let mut cursor = offsets;
        for &i in &self.order[start..end] {
            let q = quadrant(self.coords[2 * i as usize], self.coords[2 * i as usize + 1]);
            scratch[start + cursor[q]] = i;
            cursor[q] += 1;
        }
        self.order[start..end].copy_from_slice(&scratch[start..end]);
        let h = 0.5 * half;
        for q in 0..4 {
            if counts[q] == 0 {
                continue;
            }
            let c = [
                center[0] + if q & 1 == 1 { h } else { -h },
                center[1] + if q & 2 == 2 { h } else { -h },
            ];
            let child = self.build_node(start + offsets[q], start + offsets[q + 1], c, h, depth + 1, scratch);
            self.nodes[id as usize].children[q] = child;
        }
        id
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn root_mass(&self) -> f64 {
        self.nodes[0].mass
    }

    pub fn root_centroid(&self) -> [f64; 2] {
        self.nodes[0].com
    }

    /// Every node as (member point ids, mass, centroid). Test/diagnostic use.
    pub fn node_summaries(&self) -> Vec<(Vec<u32>, f64, [f64; 2])> {
        let mut out = Vec::with_capacity(self.nodes.len());
        for id in 0..self.nodes.len() {
            let mut members = Vec::new();
            let mut stack = vec![id as u32];
            while let Some(k) = stack.pop() {
                let node = &self.nodes[k as usize];
                if node.leaf {
                    members.extend_from_slice(&self.order[node.start as usize..node.end as usize]);
                } else {
                    stack.extend(node.children.iter().filter(|&&c| c != NONE));
                }
            }
            out.push((members, self.nodes[id].mass, self.nodes[id].com));
        }
        out
    }

    /// Number of leaves holding more than one point (duplicate buckets).
    pub fn bucket_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.leaf && n.end - n.start > 1).count()
    }

    /// Repulsive sums for point `i` at the tree's own coordinates.
    pub fn sums_for(&self, i: usize, theta: f64, kp: &KernelParams) -> BhSums {
        let p = [self.coords[2 * i], self.coords[2 * i + 1]];
        self.sums_at(p, Some(i as u32), theta, kp)
    }

    /// Barnes-Hut traversal from position `p`, skipping point `skip`.
    pub fn sums_at(&self, p: [f64; 2], skip: Option<u32>, theta: f64, kp: &KernelParams) -> BhSums {
        let mut out = BhSums::default();
        let mut stack: Vec<u32> = Vec::with_capacity(64);
        stack.push(0);
        while let Some(k) = stack.pop() {
            let node = &self.nodes[k as usize];
            if node.leaf {
                for &j in &self.order[node.start as usize..node.end as usize] {
                    if Some(j) == skip {
                        continue;
                    }
                    let dx = p[0] - self.coords[2 * j as usize];
                    let dy = p[1] - self.coords[2 * j as usize + 1];
                    out.add(dx, dy, 1.0, kp);
                    out.exact_pairs += 1;
                }
                continue;
            }
            let dx = p[0] - node.com[0];
            let dy = p[1] - node.com[1];
            let d2 = dx * dx + dy * dy;
            let inside = (p[0] - node.center[0]).abs() <= node.half
                && (p[1] - node.center[1]).abs() <= node.half;
            if !inside && node.half * node.half < theta * theta * d2 {
                out.add(dx, dy, node.mass, kp);
                out.summarized += 1;
                out.effective_pairs += node.mass as usize;
            } else {
                stack.extend(node.children.iter().filter(|&&c| c != NONE));
            }
        }
        out.effective_pairs += out.exact_pairs;
        out
    }
}

/// Kernel power sums over all other points: `z = sum w`,
/// `f[m] = sum w^(m+2) (y_i - y_k)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BhSums {
    pub z: f64,
    pub f2: [f64; 2],
    pub f3: [f64; 2],
    pub f4: [f64; 2],
    pub summarized: usize,
    pub exact_pairs: usize,
    pub effective_pairs: usize,
}

impl BhSums {
    #[inline]
    fn add(&mut self, dx: f64, dy: f64, mass: f64, kp: &KernelParams) {
        let w = q_unnorm(dx * dx + dy * dy, kp);
        let w2 = w * w;
        let w3 = w2 * w;
        let w4 = w2 * w2;
        self.z += mass * w;
        self.f2[0] += mass * w2 * dx;
        self.f2[1] += mass * w2 * dy;
        self.f3[0] += mass * w3 * dx;
        self.f3[1] += mass * w3 * dy;
        self.f4[0] += mass * w4 * dx;
        self.f4[1] += mass * w4 * dy;
    }
}

/// Student-t repulsion numerator `sum q^2 (y_i - y_k)` and `Z` contribution
/// `sum q` for point `i`.
pub fn bh_repulsion(tree: &QuadTree, i: usize, theta: f64) -> ([f64; 2], f64) {
    let s = tree.sums_for(i, theta, &KernelParams::default());
    (s.f2, s.z)
}

/// Angle in radians, `None` when either vector has zero length.
pub fn angle_between(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    // 2 atan2(|u - v|, |u + v|) on unit vectors stays accurate near 0 and pi
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Some(2.0 * diff.sqrt().atan2(sum.sqrt()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AngleSummary {
    pub mean: f64,
    pub counted: usize,
    pub skipped: usize,
}

/// Mean angle between each pair of force vectors; zero-length pairs skipped.
pub fn mean_angle<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> AngleSummary {
    let mut out = AngleSummary::default();
    let mut sum = 0.0;
    for (a, b) in pairs {
        match angle_between(a, b) {
            Some(t) => {
                sum += t;
                out.counted += 1;
            }
            None => out.skipped += 1,
        }
    }
    if out.counted > 0 {
        out.mean = sum / out.counted as f64;
    }
    out
}
