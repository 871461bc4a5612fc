//! Parameter sweeps and runtime scaling runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::DenseDataset;
use crate::pipeline::{reduce, write_artifacts, PipelineConfig, Preset, ReduceOptions, Switch};
use crate::plot::render_lines;
use crate::{GdrError, Result};

/// Engines compared in runtime studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    /// GDR, unnormalized.
    Gdr,
    /// GDR, normalized.
    GdrTsne,
    Umap,
    Tsne,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Gdr => "gdr",
            Engine::GdrTsne => "gdr_tsne",
            Engine::Umap => "umap",
            Engine::Tsne => "tsne",
        }
    }

    pub fn config(self) -> PipelineConfig {
        match self {
            Engine::Gdr => PipelineConfig::preset_with(Preset::Gdr, false),
            Engine::GdrTsne => PipelineConfig::preset_with(Preset::Gdr, true),
            Engine::Umap => PipelineConfig::preset(Preset::Umap),
            Engine::Tsne => PipelineConfig::preset(Preset::Tsne),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    /// `None` for the base run.
    pub switch: Option<Switch>,
    pub knn_accuracy: f64,
    /// Percent.
    pub v_score: f64,
    pub config_hash: String,
    pub optimize_ms: f64,
}

impl SweepCell {
    pub fn label(&self) -> &'static str {
        self.switch.map_or("base", Switch::name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub engine: String,
    pub cells: Vec<SweepCell>,
}

/// Mean and half-width of the normal 95% interval.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, 1.96 * (var / m).sqrt())
}

impl SweepTable {
    pub fn knn(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.knn_accuracy).collect()
    }

    pub fn v(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.v_score).collect()
    }

    /// Value minus the row mean, per cell.
    pub fn deviations(values: &[f64]) -> Vec<f64> {
        let (mean, _) = mean_ci(values);
        values.iter().map(|v| v - mean).collect()
    }

    /// Per-switch change relative to the base cell.
    pub fn base_deltas(&self) -> Vec<(Switch, f64)> {
        let base = self.cells.iter().find(|c| c.switch.is_none());
        match base {
            Some(b) => self
                .cells
                .iter()
                .filter_map(|c| c.switch.map(|s| (s, c.knn_accuracy - b.knn_accuracy)))
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let header: Vec<&str> = self.cells.iter().map(SweepCell::label).collect();
        let _ = writeln!(s, "| {} | {} | mean |", self.engine, header.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(header.len() + 2));
        for (name, values) in [("kNN", self.knn()), ("V", self.v())] {
            let (mean, ci) = mean_ci(&values);
            let cells: Vec<String> = values.iter().map(|v| format!("{v:.1}")).collect();
            let _ = writeln!(s, "| {name} | {} | {mean:.1} ± {ci:.1} |", cells.join(" | "));
            let dev: Vec<String> = Self::deviations(&values).iter().map(|v| format!("{v:+.1}")).collect();
            let _ = writeln!(s, "| {name} dev. | {} | |", dev.join(" | "));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("engine,column,knn_accuracy,v_score,knn_dev,v_dev,config_hash\n");
        let kd = Self::deviations(&self.knn());
        let vd = Self::deviations(&self.v());
        for (i, c) in self.cells.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{:.4},{:.4},{}",
                self.engine,
                c.label(),
                c.knn_accuracy,
                c.v_score,
                kd[i],
                vd[i],
                c.config_hash
            );
        }
        s
    }
}

/// Base run plus one run per swapped switch. Per-run artifacts go to
/// `out_dir` when given.
pub fn sweep(
    data: &DenseDataset,
    engine: &str,
    base: &PipelineConfig,
    switches: &[Switch],
    opts: &ReduceOptions,
    out_dir: Option<&Path>,
) -> Result<SweepTable> {
    if data.labels().is_none() {
        return Err(GdrError::MissingLabels);
    }
    let mut runs = vec![(None, base.clone())];
    runs.extend(switches.iter().map(|&s| (Some(s), s.apply(base))));
    let mut cells = Vec::with_capacity(runs.len());
    for (switch, cfg) in runs {
        let mut out = reduce(data, &cfg, opts)?;
        if let Some(dir) = out_dir {
            let stem = format!("{engine}_{}", switch.map_or("base", Switch::name));
            write_artifacts(&mut out, data.labels(), dir, &stem)?;
        }
        let m = out.report.metrics.as_ref().ok_or(GdrError::MissingLabels)?;
        cells.push(SweepCell {
            switch,
            knn_accuracy: m.knn_accuracy,
            v_score: 100.0 * m.v_score,
            config_hash: out.report.config_hash.clone(),
            optimize_ms: out.report.timings.optimize_ms,
        });
    }
    Ok(SweepTable {
        engine: engine.to_string(),
        cells,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    N,
    D,
}

/// `m` rows: a uniform subsample, or every row plus noisy duplicates.
/// Duplicate noise has sd `noise_frac` times each feature's sd.
pub fn resample_points(data: &DenseDataset, m: usize, seed: u64, noise_frac: f64) -> Result<DenseDataset> {
    if m <= data.n() {
        return data.subsample(m, seed);
    }
    let (n, dim) = (data.n(), data.dim());
    let mut mean = vec![0.0f64; dim];
    let mut sq = vec![0.0f64; dim];
    for i in 0..n {
        for (c, &v) in data.row(i).iter().enumerate() {
            mean[c] += v as f64;
            sq[c] += (v as f64).powi(2);
        }
    }
    let sd: Vec<f64> = (0..dim)
        .map(|c| {
            let mu = mean[c] / n as f64;
            (sq[c] / n as f64 - mu * mu).max(0.0).sqrt()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut points = data.points().to_vec();
    let mut labels = data.labels().map(<[u32]>::to_vec);
    points.reserve((m - n) * dim);
    for _ in n..m {
        let src = rng.random_range(0..n);
        for (c, &v) in data.row(src).iter().enumerate() {
            let eps: f64 = std_normal.sample(&mut rng);
            points.push((v as f64 + noise_frac * sd[c] * eps) as f32);
        }
        if let (Some(l), Some(orig)) = (labels.as_mut(), data.labels()) {
            l.push(orig[src]);
        }
    }
    Ok(DenseDataset::new(points, m, dim, labels, format!("{}[up{m}]", data.name))?.with_metric(data.metric))
}

/// `d` uniformly chosen feature columns, in original order.
pub fn resample_dims(data: &DenseDataset, d: usize, seed: u64) -> Result<DenseDataset> {
    if d == 0 || d > data.dim() {
        return Err(GdrError::InvalidParameter(format!(
            "cannot keep {d} of {} dimensions",
            data.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols = index::sample(&mut rng, data.dim(), d).into_vec();
    cols.sort_unstable();
    let mut out = data.select_columns(&cols)?;
    out.name = format!("{}[d{d}]", data.name);
    Ok(out)
}

/// Rough peak bytes for one run.
pub fn estimate_memory(n: usize, dim: usize, k: usize) -> u64 {
    let (n, dim, k) = (n as u64, dim as u64, k as u64);
    let data = 4 * n * dim;
    let knn = 12 * n * k;
    let graph = 2 * 12 * n * k + 16 * n * k;
    let state = 8 * 2 * 6 * n;
    let tree = 120 * n;
    2 * (data + knn + graph + state + tree)
}

/// `MemAvailable` from `/proc/meminfo`, when readable.
pub fn available_memory() -> Option<u64> {
    let text = fs::read_to_string("/proc/meminfo").ok()?;
    let line = text.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub axis: Axis,
    pub sizes: Vec<usize>,
    pub engines: Vec<Engine>,
    pub epochs: usize,
    pub seed: u64,
    pub noise_frac: f64,
    /// Refuse grids whose estimate exceeds this; `None` uses available memory.
    pub memory_limit: Option<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            axis: Axis::N,
            sizes: vec![7_500, 15_000, 30_000, 60_000],
            engines: vec![Engine::Gdr, Engine::GdrTsne, Engine::Umap, Engine::Tsne],
            epochs: 500,
            seed: 0,
            noise_frac: 1e-3,
            memory_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub engine: Engine,
    pub axis: Axis,
    pub size: usize,
    pub n: usize,
    pub dim: usize,
    pub knn_ms: f64,
    pub affinity_ms: f64,
    pub init_ms: f64,
    pub optimize_ms: f64,
    pub total_ms: f64,
}

/// Checks every grid cell against the memory limit before running any.
pub fn check_memory(data: &DenseDataset, cfg: &BenchConfig) -> Result<()> {
    let Some(limit) = cfg.memory_limit.or_else(available_memory) else {
        return Ok(());
    };
    for &size in &cfg.sizes {
        let (n, dim) = match cfg.axis {
            Axis::N => (size, data.dim()),
            Axis::D => (data.n(), size),
        };
        let k = cfg.engines.iter().map(|e| e.config().k).max().unwrap_or(15);
        let need = estimate_memory(n, dim, k);
        if need > limit {
            return Err(GdrError::InvalidConfig(format!(
                "grid size {size} needs about {} MiB, limit is {} MiB",
                need >> 20,
                limit >> 20
            )));
        }
    }
    Ok(())
}

/// Runs each (engine, size) cell in sequence.
pub fn bench(
    data: &DenseDataset,
    cfg: &BenchConfig,
    opts: &ReduceOptions,
    mut progress: impl FnMut(&BenchRow),
) -> Result<Vec<BenchRow>> {
    if cfg.sizes.is_empty() || cfg.engines.is_empty() {
        return Err(GdrError::InvalidConfig("bench needs at least one size and one engine".into()));
    }
    check_memory(data, cfg)?;
    let opts = ReduceOptions {
        skip_metrics: true,
        ..opts.clone()
    };
    let mut rows = Vec::new();
    for &size in &cfg.sizes {
        let sample = match cfg.axis {
            Axis::N => resample_points(data, size, cfg.seed, cfg.noise_frac)?,
            Axis::D => resample_dims(data, size, cfg.seed)?,
        };
        for &engine in &cfg.engines {
            let mut pc = engine.config();
            pc.set_seed(cfg.seed);
            pc.run.epochs = cfg.epochs;
            let out = reduce(&sample, &pc, &opts)?;
            let t = out.report.timings;
            let row = BenchRow {
                engine,
                axis: cfg.axis,
                size,
                n: sample.n(),
                dim: sample.dim(),
                knn_ms: t.knn_ms,
                affinity_ms: t.affinity_ms,
                init_ms: t.init_ms,
                optimize_ms: t.optimize_ms,
                total_ms: t.total_ms,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("engine,axis,size,n,dim,knn_ms,affinity_ms,init_ms,optimize_ms,total_ms\n");
    for r in rows {
        let axis = match r.axis {
            Axis::N => "n",
            Axis::D => "d",
        };
        let _ = writeln!(
            s,
            "{},{axis},{},{},{},{:.1},{:.1},{:.1},{:.1},{:.1}",
            r.engine.name(),
            r.size,
            r.n,
            r.dim,
            r.knn_ms,
            r.affinity_ms,
            r.init_ms,
            r.optimize_ms,
            r.total_ms
        );
    }
    s
}

/// Total seconds against size, one line per engine.
pub fn bench_plot(rows: &[BenchRow]) -> String {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in rows {
        let name = r.engine.name().to_string();
        let point = (r.size as f64, r.total_ms / 1e3);
        match series.iter_mut().find(|s| s.0 == name) {
            Some(s) => s.1.push(point),
            None => series.push((name, vec![point])),
        }
    }
    let x = match rows.first().map(|r| r.axis) {
        Some(Axis::D) => "dimensions",
        _ => "points",
    };
    render_lines(&series, x, "seconds")
}

/// Writes `bench.csv` and `bench.svg` into `dir`.
pub fn write_bench(rows: &[BenchRow], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| GdrError::io(dir, e))?;
    let csv = dir.join("bench.csv");
    fs::write(&csv, bench_csv(rows)).map_err(|e| GdrError::io(&csv, e))?;
    let svg = dir.join("bench.svg");
    fs::write(&svg, bench_plot(rows)).map_err(|e| GdrError::io(&svg, e))?;
    Ok((csv, svg))
}
