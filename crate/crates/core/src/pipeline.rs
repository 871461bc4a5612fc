//! End-to-end reduction: kNN graph, affinities, initialization, optimizer
//! and metrics, with presets for each engine and a reproducible report.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::affinity::{build_affinity, AffinityConfig, AffinityStats, Calibration, Symmetrization};
use crate::data::{self, hex, DenseDataset, EmbeddingRecord};
use crate::init::{initialize, InitConfig, InitMode};
use crate::kernels::{fit_ab, KernelParams, LossKind};
use crate::knn::build_graph;
use crate::metrics::{evaluate, MetricsConfig, MetricsReport};
use crate::optimizer::{run_with, Repulsion, RunConfig, RunOptions, Sampling, TraceRecord};
use crate::plot::plot_embedding;
use crate::{GdrError, Result};

/// Above this many points the kNN graph is approximate unless forced.
pub const EXACT_KNN_LIMIT: usize = 10_000;
/// Barnes-Hut needs 2-D; above this size there is no exhaustive fallback.
pub const EXHAUSTIVE_LIMIT: usize = 5_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Tsne,
    Umap,
    Gdr,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum KnnMode {
    #[default]
    Auto,
    Exact,
    Approximate,
}

/// Kernel shape: `a = b = 1` or fitted to `(min_dist, spread)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AbMode {
    Unit,
    Fitted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub preset: Option<Preset>,
    pub k: usize,
    pub knn: KnnMode,
    pub affinity: AffinityConfig,
    pub init: InitConfig,
    pub ab: AbMode,
    pub min_dist: f64,
    pub spread: f64,
    pub run: RunConfig,
    pub dim: usize,
    pub metrics: MetricsConfig,
}

impl PipelineConfig {
    pub fn preset(p: Preset) -> Self {
        Self::preset_with(p, false)
    }

    /// `normalized` only matters for `Gdr`.
    pub fn preset_with(p: Preset, normalized: bool) -> Self {
        let base = PipelineConfig {
            preset: Some(p),
            k: 15,
            knn: KnnMode::Auto,
            affinity: AffinityConfig::default(),
            init: InitConfig::default(),
            ab: AbMode::Unit,
            min_dist: 0.1,
            spread: 1.0,
            run: RunConfig::gdr(normalized),
            dim: 2,
            metrics: MetricsConfig::default(),
        };
        match p {
            Preset::Gdr => base,
            Preset::Umap => PipelineConfig {
                ab: AbMode::Fitted,
                run: RunConfig::umap_emulation(KernelParams::default()),
                ..base
            },
            Preset::Tsne => PipelineConfig {
                k: 90,
                affinity: AffinityConfig {
                    calibration: Calibration::Perplexity,
                    perplexity: 30.0,
                    pseudo_distance: false,
                    symmetrization: Symmetrization::Average,
                    normalize: true,
                    ..AffinityConfig::default()
                },
                init: InitConfig {
                    mode: InitMode::Random,
                    ..InitConfig::default()
                },
                run: RunConfig::tsne_emulation(),
                ..base
            },
        }
    }

    /// One seed for every stochastic stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.run.seed = seed;
        self.init.seed = seed;
        self.metrics.seed = seed;
    }

    pub fn seed(&self) -> u64 {
        self.run.seed
    }

    /// SHA-256 of the canonical JSON form, first 16 hex digits.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))[..16].to_string()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 || self.k >= n {
            return Err(GdrError::InvalidK { k: self.k, n });
        }
        if self.dim == 0 {
            return Err(GdrError::InvalidConfig("embedding dimension must be >= 1".into()));
        }
        if self.ab == AbMode::Fitted && !(self.min_dist >= 0.0 && self.spread > 0.0) {
            return Err(GdrError::InvalidConfig("min_dist must be >= 0 and spread > 0".into()));
        }
        self.affinity.validate(self.k)?;
        self.init.validate()?;
        self.run.validate()
    }

    /// Settings derived from the others: kernel shape, affinity
    /// normalization following the optimizer, and the exhaustive fallback
    /// for Barnes-Hut outside 2-D.
    pub fn resolved(&self, n: usize) -> Result<PipelineConfig> {
        self.validate(n)?;
        let mut c = self.clone();
        c.run.kernel = match c.ab {
            AbMode::Unit => KernelParams {
                a: 1.0,
                b: 1.0,
                ..c.run.kernel
            },
            AbMode::Fitted => {
                let fit = fit_ab(c.min_dist, c.spread)?;
                KernelParams {
                    a: fit.a,
                    b: fit.b,
                    ..c.run.kernel
                }
            }
        };
        c.affinity.normalize = c.run.normalized;
        if c.run.repulsion == Repulsion::BarnesHut && c.dim != 2 {
            if n > EXHAUSTIVE_LIMIT {
                return Err(GdrError::UnsupportedDimension(c.dim));
            }
            c.run.repulsion = Repulsion::Sampled;
            c.run.neg_rate = n - 1;
        }
        c.run.validate()?;
        Ok(c)
    }
}

/// Single-setting swaps used by the sweep study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Switch {
    Frobenius,
    Init,
    PseudoDistance,
    Symmetrization,
    SymAttraction,
    Scalars,
    Normalized,
}

impl Switch {
    pub const SWEEP: [Switch; 6] = [
        Switch::Frobenius,
        Switch::Init,
        Switch::PseudoDistance,
        Switch::Symmetrization,
        Switch::SymAttraction,
        Switch::Scalars,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Switch::Frobenius => "frobenius",
            Switch::Init => "init",
            Switch::PseudoDistance => "pseudo_distance",
            Switch::Symmetrization => "symmetrization",
            Switch::SymAttraction => "sym_attraction",
            Switch::Scalars => "scalars",
            Switch::Normalized => "normalized",
        }
    }

    /// Copy of `cfg` with this setting swapped.
    pub fn apply(self, cfg: &PipelineConfig) -> PipelineConfig {
        let mut c = cfg.clone();
        match self {
            Switch::Frobenius => {
                c.run.loss = match c.run.loss {
                    LossKind::Kl => LossKind::Frobenius,
                    LossKind::Frobenius => LossKind::Kl,
                }
            }
            Switch::Init => {
                c.init.mode = match c.init.mode {
                    InitMode::Random => InitMode::Spectral,
                    InitMode::Spectral => InitMode::Random,
                }
            }
            Switch::PseudoDistance => c.affinity.pseudo_distance = !c.affinity.pseudo_distance,
            Switch::Symmetrization => {
                c.affinity.symmetrization = match c.affinity.symmetrization {
                    Symmetrization::Average => Symmetrization::Probabilistic,
                    Symmetrization::Probabilistic => Symmetrization::Average,
                }
            }
            Switch::SymAttraction => c.run.sym_attraction = !c.run.sym_attraction,
            Switch::Scalars => {
                c.ab = match c.ab {
                    AbMode::Unit => AbMode::Fitted,
                    AbMode::Fitted => AbMode::Unit,
                }
            }
            Switch::Normalized => {
                let to = !c.run.normalized;
                if c.run.sampling == Sampling::ScalarSampling {
                    c.run.sampling = Sampling::Explicit;
                    c.run.neg_rate = crate::optimizer::default_neg_rate(Sampling::Explicit);
                }
                c.run.set_normalized(to);
            }
        }
        c
    }
}

/// Where a dataset came from, enough to load it again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        label_column: Option<usize>,
        header: bool,
    },
    Idx {
        images: PathBuf,
        labels: Option<PathBuf>,
    },
    /// Directory with the MNIST training IDX files.
    Mnist { dir: PathBuf },
    Blobs {
        n: usize,
        centers: usize,
        dim: usize,
        sep: f64,
        seed: u64,
    },
    SwissRoll { n: usize, noise: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Uniform subsample of this many rows.
    pub subsample: Option<usize>,
    pub subsample_seed: u64,
}

impl DatasetSpec {
    pub fn new(source: DataSource) -> Self {
        DatasetSpec {
            source,
            subsample: None,
            subsample_seed: 0,
        }
    }

    pub fn load(&self) -> Result<DenseDataset> {
        let d = match &self.source {
            DataSource::Csv {
                path,
                label_column,
                header,
            } => data::load_csv(path, *label_column, *header)?,
            DataSource::Idx { images, labels } => data::load_idx(images, labels.as_deref())?,
            DataSource::Mnist { dir } => load_mnist(dir)?,
            DataSource::Blobs {
                n,
                centers,
                dim,
                sep,
                seed,
            } => data::make_blobs(*n, *centers, *dim, *sep, *seed)?,
            DataSource::SwissRoll { n, noise, seed } => data::make_swiss_roll(*n, *noise, *seed)?,
        };
        match self.subsample {
            Some(m) if m < d.n() => d.subsample(m, self.subsample_seed),
            _ => Ok(d),
        }
    }
}

pub fn load_mnist(dir: &Path) -> Result<DenseDataset> {
    let images = dir.join("train-images-idx3-ubyte");
    let labels = dir.join("train-labels-idx1-ubyte");
    let mut d = data::load_idx(&images, Some(&labels))?;
    d.name = "mnist".into();
    Ok(d)
}

/// MNIST directory from `GDR_MNIST_DIR`, else `data/mnist` under the
/// workspace root.
pub fn default_mnist_dir() -> PathBuf {
    std::env::var_os("GDR_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub n: usize,
    pub dim: usize,
    pub classes: Option<usize>,
    pub content_hash: String,
    pub spec: Option<DatasetSpec>,
}

impl DatasetDescriptor {
    pub fn of(d: &DenseDataset, spec: Option<&DatasetSpec>) -> Self {
        DatasetDescriptor {
            name: d.name.clone(),
            n: d.n(),
            dim: d.dim(),
            classes: d.num_classes(),
            content_hash: d.content_hash(),
            spec: spec.cloned(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub knn_ms: f64,
    pub affinity_ms: f64,
    pub init_ms: f64,
    pub optimize_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub embedding_csv: Option<PathBuf>,
    pub plot_svg: Option<PathBuf>,
    pub report_json: Option<PathBuf>,
    pub trace_jsonl: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// As requested.
    pub config: PipelineConfig,
    /// After derived settings were filled in.
    pub resolved: PipelineConfig,
    pub config_hash: String,
    pub dataset: DatasetDescriptor,
    pub timings: Timings,
    pub metrics: Option<MetricsReport>,
    pub affinity: AffinityStats,
    pub init_mode: InitMode,
    pub init_fell_back: bool,
    pub knn_exact: bool,
    pub final_z: Option<f64>,
    pub artifacts: Artifacts,
}

#[derive(Clone, Debug, Default)]
pub struct ReduceOptions {
    pub cache_dir: Option<PathBuf>,
    pub trace_path: Option<PathBuf>,
    pub loss_every: usize,
    pub loss_samples: usize,
    pub angle_every: usize,
    pub angle_samples: usize,
    pub skip_metrics: bool,
    pub dataset_spec: Option<DatasetSpec>,
}

#[derive(Clone, Debug)]
pub struct ReduceOutput {
    pub embedding: EmbeddingRecord,
    pub report: RunReport,
    pub trace: Vec<TraceRecord>,
}

pub fn reduce(data: &DenseDataset, cfg: &PipelineConfig, opts: &ReduceOptions) -> Result<ReduceOutput> {
    let start = Instant::now();
    let n = data.n();
    let resolved = cfg.resolved(n)?;
    let hash = cfg.hash();

    let t = Instant::now();
    let exact = match resolved.knn {
        KnnMode::Exact => true,
        KnnMode::Approximate => false,
        KnnMode::Auto => n <= EXACT_KNN_LIMIT,
    };
    let graph = build_graph(data, resolved.k, exact, resolved.seed(), opts.cache_dir.as_deref())?;
    let knn_ms = ms(t);

    let t = Instant::now();
    let (g, affinity) = build_affinity(&graph, &resolved.affinity)?;
    drop(graph);
    let affinity_ms = ms(t);

    let t = Instant::now();
    let init = initialize(&g, resolved.dim, &resolved.init)?;
    let init_ms = ms(t);

    let run_opts = RunOptions {
        trace_path: opts.trace_path.clone(),
        loss_every: opts.loss_every,
        loss_samples: opts.loss_samples,
        angle_every: opts.angle_every,
        angle_samples: opts.angle_samples,
    };
    let out = run_with(&g, &init.embedding, &resolved.run, &run_opts)?;
    let mut embedding = out.embedding;
    embedding.source_config_hash = hash.clone();

    let metrics = match (data.labels(), opts.skip_metrics) {
        (Some(labels), false) => Some(evaluate(&embedding, labels, &resolved.metrics)?),
        _ => None,
    };
    let timings = Timings {
        knn_ms,
        affinity_ms,
        init_ms,
        optimize_ms: out.optimize_ms,
        total_ms: ms(start),
    };
    let report = RunReport {
        config: cfg.clone(),
        resolved: resolved.clone(),
        config_hash: hash,
        dataset: DatasetDescriptor::of(data, opts.dataset_spec.as_ref()),
        timings,
        metrics,
        affinity,
        init_mode: init.mode,
        init_fell_back: init.fell_back,
        knn_exact: exact,
        final_z: resolved.run.normalized.then_some(out.state.z_estimate),
        artifacts: Artifacts {
            trace_jsonl: opts.trace_path.clone(),
            ..Artifacts::default()
        },
    };
    Ok(ReduceOutput {
        embedding,
        report,
        trace: out.trace,
    })
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Writes `<stem>.csv`, `<stem>.svg` (2-D only) and `<stem>.json` into
/// `dir` and records the paths in the report.
pub fn write_artifacts(
    out: &mut ReduceOutput,
    labels: Option<&[u32]>,
    dir: &Path,
    stem: &str,
) -> Result<Artifacts> {
    fs::create_dir_all(dir).map_err(|e| GdrError::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    data::write_embedding(&out.embedding, labels, &csv)?;
    out.report.artifacts.embedding_csv = Some(csv);
    if out.embedding.d == 2 {
        let svg = dir.join(format!("{stem}.svg"));
        plot_embedding(&out.embedding, labels, &svg)?;
        out.report.artifacts.plot_svg = Some(svg);
    }
    let json = dir.join(format!("{stem}.json"));
    out.report.artifacts.report_json = Some(json.clone());
    let text = serde_json::to_string_pretty(&out.report)?;
    fs::write(&json, text).map_err(|e| GdrError::io(&json, e))?;
    Ok(out.report.artifacts.clone())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<RunReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GdrError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads the dataset named in the report and runs its config again.
pub fn rerun(report: &RunReport, opts: &ReduceOptions) -> Result<ReduceOutput> {
    let spec = report.dataset.spec.as_ref().ok_or_else(|| {
        GdrError::InvalidConfig("report has no dataset spec to reload".into())
    })?;
    let data = spec.load()?;
    if data.content_hash() != report.dataset.content_hash {
        return Err(GdrError::InvalidConfig(
            "reloaded dataset differs from the one in the report".into(),
        ));
    }
    let opts = ReduceOptions {
        dataset_spec: Some(spec.clone()),
        ..opts.clone()
    };
    reduce(&data, &report.config, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::Calibration;
    use crate::optimizer::{Apply, Sampling};

    fn blobs(n: usize, seed: u64) -> (DenseDataset, DatasetSpec) {
        let spec = DatasetSpec::new(DataSource::Blobs {
            n,
            centers: 3,
            dim: 10,
            sep: 8.0,
            seed,
        });
        (spec.load().unwrap(), spec)
    }

    #[test]
    fn presets_match_the_switch_table() {
        let t = PipelineConfig::preset(Preset::Tsne);
        assert!(t.run.normalized && t.run.amplification);
        assert_eq!(t.init.mode, InitMode::Random);
        assert_eq!(t.affinity.symmetrization, Symmetrization::Average);
        assert_eq!(t.affinity.calibration, Calibration::Perplexity);
        assert!(!t.affinity.pseudo_distance);
        assert_eq!(t.ab, AbMode::Unit);
        assert!(!t.run.sym_attraction);
        assert_eq!(t.run.repulsion, Repulsion::BarnesHut);

        let u = PipelineConfig::preset(Preset::Umap);
        assert!(!u.run.normalized && !u.run.amplification);
        assert_eq!(u.run.sampling, Sampling::ScalarSampling);
        assert_eq!(u.run.apply, Apply::InLoop);
        assert_eq!(u.init.mode, InitMode::Spectral);
        assert_eq!(u.affinity.symmetrization, Symmetrization::Probabilistic);
        assert!(u.affinity.pseudo_distance);
        assert_eq!(u.ab, AbMode::Fitted);
        assert!(u.run.sym_attraction);
        assert_eq!(u.run.clip, Some(4.0));

        for normalized in [false, true] {
            let g = PipelineConfig::preset_with(Preset::Gdr, normalized);
            assert_eq!(g.run.normalized, normalized);
            assert_eq!(g.run.amplification, normalized);
            assert_eq!(g.run.sampling, Sampling::Explicit);
            assert_eq!(g.run.apply, Apply::Collected);
            assert_eq!(g.ab, AbMode::Unit);
            assert!(!g.run.sym_attraction);
            assert_eq!(g.init.mode, InitMode::Spectral);
            assert!(g.affinity.pseudo_distance);
        }
    }

    #[test]
    fn every_switch_changes_the_config_and_undoes() {
        for p in [Preset::Tsne, Preset::Umap, Preset::Gdr] {
            let base = PipelineConfig::preset(p);
            for s in Switch::SWEEP {
                let swapped = s.apply(&base);
                assert_ne!(swapped, base, "{p:?} {s:?}");
                assert_eq!(s.apply(&swapped), base);
                assert_ne!(swapped.hash(), base.hash());
                swapped.validate(1000).unwrap();
            }
        }
    }

    #[test]
    fn resolved_syncs_normalization_and_kernel() {
        let u = PipelineConfig::preset(Preset::Umap).resolved(500).unwrap();
        assert!(!u.affinity.normalize);
        assert!((u.run.kernel.a - 1.577).abs() < 1e-2);
        let g = PipelineConfig::preset_with(Preset::Gdr, true).resolved(500).unwrap();
        assert!(g.affinity.normalize);
        let mut t = PipelineConfig::preset(Preset::Tsne);
        t.dim = 3;
        let r = t.resolved(500).unwrap();
        assert_eq!(r.run.repulsion, Repulsion::Sampled);
        assert_eq!(r.run.neg_rate, 499);
        assert!(t.resolved(EXHAUSTIVE_LIMIT + 1).is_err());
    }

    #[test]
    fn gdr_unnormalized_separates_blobs() {
        let (d, _) = blobs(600, 1);
        let mut cfg = PipelineConfig::preset(Preset::Gdr);
        cfg.metrics.k = 10;
        cfg.metrics.restarts = 3;
        let out = reduce(&d, &cfg, &ReduceOptions::default()).unwrap();
        let m = out.report.metrics.unwrap();
        assert!(m.knn_accuracy >= 95.0, "{}", m.knn_accuracy);
    }

    #[test]
    fn report_rerun_is_bitwise() {
        let (d, spec) = blobs(300, 2);
        let mut cfg = PipelineConfig::preset(Preset::Umap);
        cfg.run.epochs = 50;
        cfg.set_seed(5);
        let opts = ReduceOptions {
            dataset_spec: Some(spec),
            skip_metrics: true,
            ..ReduceOptions::default()
        };
        let mut out = reduce(&d, &cfg, &opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let arts = write_artifacts(&mut out, d.labels(), dir.path(), "run").unwrap();
        let report = read_report(arts.report_json.unwrap()).unwrap();
        let again = rerun(&report, &ReduceOptions::default()).unwrap();
        assert_eq!(again.embedding.coords, out.embedding.coords);
        assert_eq!(again.report.config_hash, out.report.config_hash);
        let csv = std::fs::read_to_string(arts.embedding_csv.unwrap()).unwrap();
        assert!(csv.contains(&out.report.config_hash));
        let t = &out.report.timings;
        assert!(t.total_ms + 1.0 >= t.knn_ms + t.affinity_ms + t.init_ms + t.optimize_ms);
    }
}
