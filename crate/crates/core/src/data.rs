//! Datasets, embeddings and their on-disk formats.
//!
//! Two input formats are supported: plain CSV and the big-endian IDX format
//! used by the MNIST family. Embeddings are written as CSV with columns
//! `y0..y{d-1}` and an optional trailing `label` column.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GdrError, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

/// Row-major `n x dim` matrix of `f32` points with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseDataset {
    points: Vec<f32>,
    n: usize,
    dim: usize,
    labels: Option<Vec<u32>>,
    pub metric: Metric,
    pub name: String,
}

impl DenseDataset {
    pub fn new(
        points: Vec<f32>,
        n: usize,
        dim: usize,
        labels: Option<Vec<u32>>,
        name: impl Into<String>,
    ) -> Result<Self> {
        if n < 2 {
            return Err(GdrError::InvalidParameter(format!(
                "dataset needs at least 2 points, got {n}"
            )));
        }
        if dim == 0 {
            return Err(GdrError::InvalidParameter("dataset dimension must be >= 1".into()));
        }
        if points.len() != n * dim {
            return Err(GdrError::LengthMismatch {
                left: points.len(),
                right: n * dim,
            });
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(GdrError::InvalidParameter(format!(
                "non-finite value at row {}, column {}",
                pos / dim + 1,
                pos % dim + 1
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(GdrError::LengthMismatch {
                    left: l.len(),
                    right: n,
                });
            }
        }
        Ok(Self {
            points,
            n,
            dim,
            labels,
            metric: Metric::Euclidean,
            name: name.into(),
        })
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f32] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m as usize + 1))
    }

    /// Rows in the given order; labels follow their rows.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut points = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            points.extend_from_slice(self.row(r));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| rows.iter().map(|&r| l[r]).collect());
        Ok(Self::new(points, rows.len(), self.dim, labels, self.name.clone())?.with_metric(self.metric))
    }

    /// Columns in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let mut points = Vec::with_capacity(self.n * cols.len());
        for i in 0..self.n {
            let row = self.row(i);
            points.extend(cols.iter().map(|&c| row[c]));
        }
        Ok(Self::new(points, self.n, cols.len(), self.labels.clone(), self.name.clone())?
            .with_metric(self.metric))
    }

    /// Seeded uniform subsample of `m` distinct rows, kept in original order.
    pub fn subsample(&self, m: usize, seed: u64) -> Result<Self> {
        if m > self.n {
            return Err(GdrError::InvalidParameter(format!(
                "cannot subsample {m} of {} rows",
                self.n
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = rand::seq::index::sample(&mut rng, self.n, m).into_vec();
        rows.sort_unstable();
        let mut out = self.select_rows(&rows)?;
        out.name = format!("{}[{m}]", self.name);
        Ok(out)
    }

    /// SHA-256 over shape, metric, values and labels; hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        h.update([self.metric as u8]);
        for v in &self.points {
            h.update(v.to_le_bytes());
        }
        if let Some(l) = &self.labels {
            for v in l {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Low-dimensional coordinates, row-major `n x d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub coords: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub source_config_hash: String,
}

impl EmbeddingRecord {
    pub fn new(coords: Vec<f64>, n: usize, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(GdrError::InvalidParameter("embedding dimension must be >= 1".into()));
        }
        if coords.len() != n * d {
            return Err(GdrError::LengthMismatch {
                left: coords.len(),
                right: n * d,
            });
        }
        Ok(Self {
            coords,
            n,
            d,
            source_config_hash: String::new(),
        })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            coords: vec![0.0; n * d],
            n,
            d,
            source_config_hash: String::new(),
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.coords[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.coords[i * self.d..(i + 1) * self.d]
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.coords.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn parse_cell(cell: &str, row: usize, column: usize) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|e| GdrError::Parse {
        row,
        column,
        message: format!("{:?}: {e}", cell.trim()),
    })
}

/// Reads a comma-separated numeric file. `label_column` is 0-based; rows and
/// columns in error messages are 1-based and count data rows only.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: Option<usize>,
    has_header: bool,
) -> Result<DenseDataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| GdrError::io(path, e))?;
    let reader = BufReader::new(file);

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    let mut n = 0usize;
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| GdrError::io(path, e))?;
        if line_no == 0 && has_header {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let row = n + 1;
        let cells: Vec<&str> = line.split(',').collect();
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(GdrError::Ragged {
                    row,
                    found: cells.len(),
                    expected: w,
                })
            }
            _ => {}
        }
        if let Some(lc) = label_column {
            if lc >= cells.len() {
                return Err(GdrError::InvalidParameter(format!(
                    "label column {lc} out of range for {} columns",
                    cells.len()
                )));
            }
        }
        for (c, cell) in cells.iter().enumerate() {
            let v = parse_cell(cell, row, c + 1)?;
            if Some(c) == label_column {
                if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                    return Err(GdrError::Parse {
                        row,
                        column: c + 1,
                        message: format!("label {v} is not a non-negative integer"),
                    });
                }
                labels.push(v as u32);
            } else {
                if !v.is_finite() {
                    return Err(GdrError::Parse {
                        row,
                        column: c + 1,
                        message: "non-finite value".into(),
                    });
                }
                points.push(v as f32);
            }
        }
        n += 1;
    }
    let dim = width.unwrap_or(0).saturating_sub(usize::from(label_column.is_some()));
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    DenseDataset::new(
        points,
        n,
        dim,
        label_column.map(|_| labels),
        name,
    )
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(GdrError::Truncated {
            expected: offset + 4,
            found: bytes.len(),
        })
}

fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(GdrError::BadMagic {
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    let expected = dim
        .checked_mul(n)
        .and_then(|v| v.checked_add(16))
        .unwrap_or(usize::MAX);
    if bytes.len() < expected {
        return Err(GdrError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..expected].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((n, dim, pixels))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(GdrError::BadMagic {
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(GdrError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].iter().map(|&b| b as u32).collect())
}

/// Loads an IDX image file (and optionally its label file). Pixels are
/// scaled to `[0, 1]`.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: Option<&Path>,
) -> Result<DenseDataset> {
    let images_path = images_path.as_ref();
    let bytes = fs::read(images_path).map_err(|e| GdrError::io(images_path, e))?;
    let (n, dim, pixels) = parse_idx_images(&bytes)?;
    let labels = match labels_path {
        Some(p) => {
            let lb = fs::read(p).map_err(|e| GdrError::io(p, e))?;
            let labels = parse_idx_labels(&lb)?;
            if labels.len() != n {
                return Err(GdrError::CountMismatch {
                    images: n,
                    labels: labels.len(),
                });
            }
            Some(labels)
        }
        None => None,
    };
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if n < 2 {
        // single-image files load as-is; the n >= 2 requirement is checked
        // by the consumers (knn, affinity)
        return Ok(DenseDataset {
            points: pixels,
            n,
            dim,
            labels,
            metric: Metric::Euclidean,
            name,
        });
    }
    DenseDataset::new(pixels, n, dim, labels, name)
}

/// Swiss roll: `t ~ U[1.5pi, 4.5pi]`, `h ~ U[0, 21]`,
/// point `(t cos t, h, t sin t)` plus isotropic Gaussian noise.
pub fn make_swiss_roll(n: usize, noise_sd: f64, seed: u64) -> Result<DenseDataset> {
    if n < 2 || noise_sd < 0.0 || !noise_sd.is_finite() {
        return Err(GdrError::InvalidParameter(format!(
            "swiss roll needs n >= 2 and noise_sd >= 0 (n={n}, noise_sd={noise_sd})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = 1.5 * std::f64::consts::PI;
    let hi = 4.5 * std::f64::consts::PI;
    let mut points = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let t = rng.random_range(lo..=hi);
        let h = rng.random_range(0.0..=21.0);
        let base = [t * t.cos(), h, t * t.sin()];
        for b in base {
            let noise: f64 = if noise_sd > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                noise_sd * z
            } else {
                0.0
            };
            points.push((b + noise) as f32);
        }
    }
    DenseDataset::new(points, n, 3, None, "swiss_roll")
}

/// `c` unit-covariance Gaussian clusters whose centers lie on a sphere of
/// radius `sep`. Point `i` belongs to cluster `i % c`.
pub fn make_blobs(n: usize, c: usize, dim: usize, sep: f64, seed: u64) -> Result<DenseDataset> {
    if c == 0 || n < c || n < 2 || dim == 0 {
        return Err(GdrError::InvalidParameter(format!(
            "blobs need n >= c >= 1 and dim >= 1 (n={n}, c={c}, dim={dim})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(c * dim);
    for _ in 0..c {
        let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        centers.extend(dir.iter().map(|v| v / norm * sep));
    }
    let mut points = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % c;
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            points.push((centers[k * dim + j] + z) as f32);
        }
        labels.push(k as u32);
    }
    DenseDataset::new(points, n, dim, Some(labels), format!("blobs{c}"))
}

/// Writes `y0..y{d-1}[,label]` with a leading `#` comment carrying the
/// config hash. Values use shortest round-trip formatting.
pub fn write_embedding(
    rec: &EmbeddingRecord,
    labels: Option<&[u32]>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(l) = labels {
        if l.len() != rec.n {
            return Err(GdrError::LengthMismatch {
                left: l.len(),
                right: rec.n,
            });
        }
    }
    let file = fs::File::create(path).map_err(|e| GdrError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| GdrError::io(path, e);
    writeln!(w, "# source_config_hash={}", rec.source_config_hash).map_err(io)?;
    let mut header: Vec<String> = (0..rec.d).map(|j| format!("y{j}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    let mut line = String::new();
    for i in 0..rec.n {
        line.clear();
        for (j, v) in rec.row(i).iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            let _ = write!(line, "{v:?}");
        }
        if let Some(l) = labels {
            let _ = write!(line, ",{}", l[i]);
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Inverse of [`write_embedding`].
pub fn read_embedding(path: impl AsRef<Path>) -> Result<(EmbeddingRecord, Option<Vec<u32>>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GdrError::io(path, e))?;
    let mut hash = String::new();
    let mut header: Option<Vec<String>> = None;
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(h) = rest.trim().strip_prefix("source_config_hash=") {
                hash = h.to_string();
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let Some(cols) = &header else {
            header = Some(line.split(',').map(|s| s.trim().to_string()).collect());
            continue;
        };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(GdrError::Ragged {
                row: n + 1,
                found: cells.len(),
                expected: cols.len(),
            });
        }
        for (c, (cell, name)) in cells.iter().zip(cols).enumerate() {
            let v = parse_cell(cell, n + 1, c + 1)?;
            if name == "label" {
                labels.push(v as u32);
            } else {
                coords.push(v);
            }
        }
        n += 1;
    }
    let cols = header.unwrap_or_default();
    let has_label = cols.iter().any(|c| c == "label");
    let d = cols.len() - usize::from(has_label);
    let mut rec = EmbeddingRecord::new(coords, n, d)?;
    rec.source_config_hash = hash;
    Ok((rec, has_label.then_some(labels)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents).unwrap();
        f
    }

    #[test]
    fn csv_without_labels() {
        let f = write_tmp(b"1,2\n3,4\n5,6");
        let ds = load_csv(f.path(), None, false).unwrap();
        assert_eq!((ds.n(), ds.dim()), (3, 2));
        assert_eq!(ds.row(2), &[5.0, 6.0]);
        assert!(ds.labels().is_none());
    }

    #[test]
    fn csv_label_column_split() {
        let f = write_tmp(b"1,2\n3,4\n5,6");
        let ds = load_csv(f.path(), Some(1), false).unwrap();
        assert_eq!((ds.n(), ds.dim()), (3, 1));
        assert_eq!(ds.labels().unwrap(), &[2, 4, 6]);
    }

    #[test]
    fn csv_parse_error_names_cell() {
        let f = write_tmp(b"1,x\n3,4\n");
        match load_csv(f.path(), None, false) {
            Err(GdrError::Parse { row, column, .. }) => assert_eq!((row, column), (1, 2)),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_header_and_ragged() {
        let f = write_tmp(b"a,b\n1,2\n3,4\n");
        assert_eq!(load_csv(f.path(), None, true).unwrap().n(), 2);
        let f = write_tmp(b"1,2\n3\n");
        assert!(matches!(
            load_csv(f.path(), None, false),
            Err(GdrError::Ragged { row: 2, .. })
        ));
    }

    fn idx_images(n: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        v.extend(n.to_be_bytes());
        v.extend(rows.to_be_bytes());
        v.extend(cols.to_be_bytes());
        v.extend(std::iter::repeat_n(fill, (n * rows * cols) as usize));
        v
    }

    #[test]
    fn idx_single_zero_image() {
        let f = write_tmp(&idx_images(1, 28, 28, 0));
        let ds = load_idx(f.path(), None).unwrap();
        assert_eq!((ds.n(), ds.dim()), (1, 784));
        assert!(ds.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn idx_scaling_and_labels() {
        let img = write_tmp(&idx_images(3, 2, 2, 255));
        let mut lab = Vec::new();
        lab.extend(IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend(3u32.to_be_bytes());
        lab.extend([7u8, 1, 9]);
        let lab = write_tmp(&lab);
        let ds = load_idx(img.path(), Some(lab.path())).unwrap();
        assert_eq!(ds.row(1), &[1.0; 4]);
        assert_eq!(ds.labels().unwrap(), &[7, 1, 9]);
    }

    #[test]
    fn idx_errors() {
        let img = write_tmp(&idx_images(3, 2, 2, 1));
        // labels file carrying the image magic
        let bad = write_tmp(&idx_images(3, 2, 2, 1));
        assert!(matches!(
            load_idx(img.path(), Some(bad.path())),
            Err(GdrError::BadMagic { found: 0x803, .. })
        ));
        let mut trunc = idx_images(3, 2, 2, 1);
        trunc.truncate(20);
        let trunc = write_tmp(&trunc);
        assert!(matches!(load_idx(trunc.path(), None), Err(GdrError::Truncated { .. })));
        let mut lab = Vec::new();
        lab.extend(IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend(2u32.to_be_bytes());
        lab.extend([1u8, 2]);
        let lab = write_tmp(&lab);
        assert!(matches!(
            load_idx(img.path(), Some(lab.path())),
            Err(GdrError::CountMismatch { images: 3, labels: 2 })
        ));
    }

    #[test]
    fn swiss_roll_shape_and_radius() {
        let ds = make_swiss_roll(5000, 0.0, 7).unwrap();
        assert_eq!((ds.n(), ds.dim()), (5000, 3));
        let (lo, hi) = (1.5 * std::f64::consts::PI, 4.5 * std::f64::consts::PI);
        for i in 0..ds.n() {
            let r = ds.row(i);
            let rad = ((r[0] as f64).powi(2) + (r[2] as f64).powi(2)).sqrt();
            assert!(rad >= lo - 1e-4 && rad <= hi + 1e-4, "radius {rad}");
        }
        assert_eq!(make_swiss_roll(2, 0.0, 7).unwrap(), make_swiss_roll(2, 0.0, 7).unwrap());
    }

    #[test]
    fn swiss_roll_height_bounds() {
        let ds = make_swiss_roll(10_000, 0.0, 3).unwrap();
        let (mut lo, mut hi) = (f32::MAX, f32::MIN);
        for i in 0..ds.n() {
            lo = lo.min(ds.row(i)[1]);
            hi = hi.max(ds.row(i)[1]);
        }
        assert!(lo >= 0.0 && hi <= 21.0);
    }

    #[test]
    fn blobs_balanced() {
        let ds = make_blobs(300, 3, 10, 20.0, 1).unwrap();
        let mut counts = [0; 3];
        for &l in ds.labels().unwrap() {
            counts[l as usize] += 1;
        }
        assert_eq!(counts, [100, 100, 100]);
        let ds = make_blobs(301, 3, 2, 5.0, 1).unwrap();
        let mut counts = [0; 3];
        for &l in ds.labels().unwrap() {
            counts[l as usize] += 1;
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn blobs_zero_separation_mixes_classes() {
        let ds = make_blobs(400, 2, 5, 0.0, 9).unwrap();
        let labels = ds.labels().unwrap();
        let (mut within, mut between, mut nw, mut nb) = (0.0, 0.0, 0, 0);
        for i in 0..ds.n() {
            for j in (i + 1)..ds.n() {
                let d: f64 = ds
                    .row(i)
                    .iter()
                    .zip(ds.row(j))
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if labels[i] == labels[j] {
                    within += d;
                    nw += 1;
                } else {
                    between += d;
                    nb += 1;
                }
            }
        }
        let (w, b) = (within / nw as f64, between / nb as f64);
        assert!((w - b).abs() / b < 0.05, "within {w} between {b}");
    }

    #[test]
    fn embedding_round_trip() {
        let mut rec = EmbeddingRecord::new(vec![0.0, 0.0, 1.0, 1.0], 2, 2).unwrap();
        rec.source_config_hash = "abc".into();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_embedding(&rec, None, f.path()).unwrap();
        let (back, labels) = read_embedding(f.path()).unwrap();
        assert_eq!(back, rec);
        assert!(labels.is_none());
    }

    #[test]
    fn embedding_three_columns_with_labels() {
        let rec = EmbeddingRecord::new(vec![0.1, -2.5, 3.25, 1e-7, 4.0, 5.0], 2, 3).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_embedding(&rec, Some(&[4, 2]), f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert!(text.lines().nth(1).unwrap() == "y0,y1,y2,label");
        let (back, labels) = read_embedding(f.path()).unwrap();
        assert_eq!(back.d, 3);
        assert_eq!(labels.unwrap(), vec![4, 2]);
        for (a, b) in back.coords.iter().zip(&rec.coords) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn embedding_unwritable_path() {
        let rec = EmbeddingRecord::zeros(2, 2);
        let err = write_embedding(&rec, None, "/nonexistent-dir/x/y.csv").unwrap_err();
        assert!(matches!(err, GdrError::Io { .. }));
    }
}
