//! Command-line front end: `reduce`, `sweep` and `bench`.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gdr::affinity::Symmetrization;
use gdr::bench::{bench, sweep, write_bench, Axis, BenchConfig, Engine};
use gdr::init::InitMode;
use gdr::kernels::LossKind;
use gdr::optimizer::{Apply, Repulsion, Sampling};
use gdr::pipeline::{
    default_mnist_dir, read_report, reduce, write_artifacts, AbMode, DataSource, DatasetSpec,
    KnnMode, PipelineConfig, Preset, ReduceOptions, Switch,
};
use gdr::{GdrError, Result};

/// Directory for cached kNN graphs.
const CACHE_ENV: &str = "GDR_CACHE_DIR";

#[derive(Parser)]
#[command(name = "gdr", version, about = "TSNE, UMAP and GDR embeddings from one switchable engine")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration end to end.
    Reduce(ReduceArgs),
    /// Base run plus one run per swapped switch.
    Sweep(SweepArgs),
    /// Stage timings over a grid of sizes.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum Generator {
    Blobs,
    SwissRoll,
    Mnist,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// CSV file, IDX image file, or a directory holding the MNIST IDX files.
    #[arg(long, conflicts_with = "generator")]
    dataset: Option<PathBuf>,
    /// IDX label file for `--dataset` IDX input.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// CSV column holding integer labels.
    #[arg(long)]
    label_column: Option<usize>,
    /// CSV has a header row.
    #[arg(long)]
    header: bool,
    #[arg(long, value_enum)]
    generator: Option<Generator>,
    /// Generated points.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Blob centers.
    #[arg(long, default_value_t = 5)]
    centers: usize,
    /// Blob dimensionality.
    #[arg(long, default_value_t = 10)]
    gen_dim: usize,
    /// Swiss roll noise sd.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Uniform row subsample.
    #[arg(long)]
    subsample: Option<usize>,
    /// Seed for the subsample and generators; defaults to `--seed`.
    #[arg(long)]
    data_seed: Option<u64>,
}

impl DataArgs {
    fn spec(&self, seed: u64) -> Result<DatasetSpec> {
        let seed = self.data_seed.unwrap_or(seed);
        let source = match (&self.dataset, self.generator) {
            (Some(p), _) if p.is_dir() => DataSource::Mnist { dir: p.clone() },
            (Some(p), _) if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => {
                DataSource::Csv {
                    path: p.clone(),
                    label_column: self.label_column,
                    header: self.header,
                }
            }
            (Some(p), _) => DataSource::Idx {
                images: p.clone(),
                labels: self.labels.clone(),
            },
            (None, Some(Generator::Blobs)) => DataSource::Blobs {
                n: self.n,
                centers: self.centers,
                dim: self.gen_dim,
                sep: 6.0,
                seed,
            },
            (None, Some(Generator::SwissRoll)) => DataSource::SwissRoll {
                n: self.n,
                noise: self.noise,
                seed,
            },
            (None, Some(Generator::Mnist)) => DataSource::Mnist {
                dir: default_mnist_dir(),
            },
            (None, None) => {
                return Err(GdrError::InvalidConfig(
                    "one of --dataset or --generator is required".into(),
                ))
            }
        };
        Ok(DatasetSpec {
            source,
            subsample: self.subsample,
            subsample_seed: seed,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Clip(Option<f64>);

fn parse_clip(s: &str) -> std::result::Result<Clip, String> {
    match s {
        "none" | "off" => Ok(Clip(None)),
        _ => s
            .parse::<f64>()
            .map(|v| Clip(Some(v)))
            .map_err(|e| format!("expected a number or `none`: {e}")),
    }
}

#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long, value_enum, default_value = "gdr")]
    preset: Preset,
    #[arg(long, action = clap::ArgAction::Set)]
    normalized: Option<bool>,
    #[arg(long, value_enum)]
    init: Option<InitMode>,
    #[arg(long, action = clap::ArgAction::Set)]
    pseudo_distance: Option<bool>,
    #[arg(long, value_enum)]
    symmetrization: Option<Symmetrization>,
    #[arg(long, action = clap::ArgAction::Set)]
    sym_attraction: Option<bool>,
    #[arg(long, value_enum)]
    ab: Option<AbMode>,
    #[arg(long, value_enum)]
    loss: Option<LossKind>,
    #[arg(long, value_enum)]
    sampling: Option<Sampling>,
    #[arg(long, value_enum)]
    apply: Option<Apply>,
    #[arg(long, action = clap::ArgAction::Set)]
    amplify: Option<bool>,
    /// Let `--amplify` differ from `--normalized`.
    #[arg(long)]
    decouple_amplification: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    neg_rate: Option<usize>,
    /// Per-pair gradient clip, or `none`.
    #[arg(long, value_parser = parse_clip)]
    clip: Option<Clip>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    perplexity: Option<f64>,
    #[arg(long, value_enum)]
    knn: Option<KnnMode>,
    #[arg(long, value_enum)]
    repulsion: Option<Repulsion>,
    #[arg(long)]
    theta: Option<f64>,
    /// Output dimension.
    #[arg(long)]
    dim: Option<usize>,
}

impl ConfigArgs {
    fn build(&self) -> PipelineConfig {
        let mut c = match (self.preset, self.normalized) {
            (Preset::Gdr, Some(norm)) => PipelineConfig::preset_with(Preset::Gdr, norm),
            (p, norm) => {
                let c = PipelineConfig::preset(p);
                match norm {
                    Some(v) if v != c.run.normalized => Switch::Normalized.apply(&c),
                    _ => c,
                }
            }
        };
        c.set_seed(self.seed);
        if let Some(v) = self.init {
            c.init.mode = v;
        }
        if let Some(v) = self.pseudo_distance {
            c.affinity.pseudo_distance = v;
        }
        if let Some(v) = self.symmetrization {
            c.affinity.symmetrization = v;
        }
        if let Some(v) = self.sym_attraction {
            c.run.sym_attraction = v;
        }
        if let Some(v) = self.ab {
            c.ab = v;
        }
        if let Some(v) = self.loss {
            c.run.loss = v;
        }
        if let Some(v) = self.sampling {
            c.run.sampling = v;
        }
        if let Some(v) = self.apply {
            c.run.apply = v;
        }
        if let Some(v) = self.amplify {
            c.run.amplification = v;
        }
        c.run.decouple_amplification |= self.decouple_amplification;
        if let Some(v) = self.epochs {
            c.run.epochs = v;
        }
        if let Some(v) = self.lr {
            c.run.lr = v;
        }
        if let Some(v) = self.neg_rate {
            c.run.neg_rate = v;
        }
        if let Some(v) = self.clip {
            c.run.clip = v.0;
        }
        if let Some(v) = self.workers {
            c.run.workers = v;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.perplexity {
            c.affinity.perplexity = v;
        }
        if let Some(v) = self.knn {
            c.knn = v;
        }
        if let Some(v) = self.repulsion {
            c.run.repulsion = v;
        }
        if let Some(v) = self.theta {
            c.run.theta = v;
        }
        if let Some(v) = self.dim {
            c.dim = v;
        }
        c
    }
}

#[derive(Args, Clone)]
struct OutArgs {
    #[arg(long, default_value = "gdr-out")]
    out: PathBuf,
}

#[derive(Args)]
struct ReduceArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
    /// File stem for the outputs.
    #[arg(long, default_value = "embedding")]
    stem: String,
    /// Re-run the config and dataset recorded in a report.
    #[arg(long)]
    from_report: Option<PathBuf>,
    /// Write a JSON-lines trace next to the outputs.
    #[arg(long)]
    trace: bool,
    /// Epochs between loss estimates in the trace (0 disables).
    #[arg(long, default_value_t = 0)]
    loss_every: usize,
    /// Epochs between repulsion-angle samples in the trace (0 disables).
    #[arg(long, default_value_t = 0)]
    angle_every: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Switches to swap one at a time; empty runs the base only.
    #[arg(long, value_enum, value_delimiter = ',', num_args = 0..,
          default_values_t = Switch::SWEEP.to_vec())]
    switches: Vec<Switch>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, value_enum, default_value = "n")]
    axis: Axis,
    #[arg(long, value_delimiter = ',', default_values_t = [7_500, 15_000, 30_000, 60_000])]
    sizes: Vec<usize>,
    #[arg(long, value_enum, value_delimiter = ',',
          default_values_t = [Engine::Gdr, Engine::GdrTsne, Engine::Umap, Engine::Tsne])]
    engines: Vec<Engine>,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Refuse grids estimated above this; defaults to available memory.
    #[arg(long)]
    memory_limit_mb: Option<u64>,
}

fn reduce_options(spec: Option<DatasetSpec>) -> ReduceOptions {
    ReduceOptions {
        cache_dir: std::env::var_os(CACHE_ENV).map(PathBuf::from),
        dataset_spec: spec,
        ..ReduceOptions::default()
    }
}

fn cmd_reduce(a: ReduceArgs) -> Result<()> {
    let (cfg, spec) = match &a.from_report {
        Some(p) => {
            let r = read_report(p)?;
            let spec = r.dataset.spec.ok_or_else(|| {
                GdrError::InvalidConfig("report has no dataset spec to reload".into())
            })?;
            (r.config, spec)
        }
        None => (a.config.build(), a.data.spec(a.config.seed)?),
    };
    cfg.validate(usize::MAX)?;
    let data = spec.load()?;
    let mut opts = reduce_options(Some(spec));
    if a.trace || a.loss_every > 0 || a.angle_every > 0 {
        fs::create_dir_all(&a.out.out).map_err(|e| GdrError::Io {
            path: a.out.out.clone(),
            source: e,
        })?;
        opts.trace_path = Some(a.out.out.join(format!("{}.jsonl", a.stem)));
        opts.loss_every = a.loss_every;
        opts.loss_samples = 1000;
        opts.angle_every = a.angle_every;
        opts.angle_samples = 200;
    }
    let mut out = reduce(&data, &cfg, &opts)?;
    let artifacts = write_artifacts(&mut out, data.labels(), &a.out.out, &a.stem)?;
    let r = &out.report;
    println!("config {} on {} ({} x {})", r.config_hash, r.dataset.name, r.dataset.n, r.dataset.dim);
    let t = r.timings;
    println!(
        "knn {:.0} ms, affinity {:.0} ms, init {:.0} ms, optimize {:.0} ms, total {:.0} ms",
        t.knn_ms, t.affinity_ms, t.init_ms, t.optimize_ms, t.total_ms
    );
    if let Some(m) = &r.metrics {
        println!("kNN accuracy {:.2}%, V-score {:.2}", m.knn_accuracy, 100.0 * m.v_score);
    }
    if let Some(p) = artifacts.report_json {
        println!("report {}", p.display());
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let base = a.config.build();
    base.validate(usize::MAX)?;
    for s in &a.switches {
        s.apply(&base).validate(usize::MAX)?;
    }
    let spec = a.data.spec(a.config.seed)?;
    let data = spec.load()?;
    let name = match (base.preset, base.run.normalized) {
        (Some(Preset::Gdr), true) => "gdr_tsne",
        (Some(Preset::Gdr), false) => "gdr",
        (Some(Preset::Umap), _) => "umap",
        (Some(Preset::Tsne), _) => "tsne",
        (None, _) => "custom",
    };
    let opts = reduce_options(Some(spec));
    let table = sweep(&data, name, &base, &a.switches, &opts, Some(&a.out.out))?;
    let md = a.out.out.join(format!("sweep_{name}.md"));
    fs::write(&md, table.to_markdown()).map_err(|e| GdrError::Io { path: md.clone(), source: e })?;
    let csv = a.out.out.join(format!("sweep_{name}.csv"));
    fs::write(&csv, table.to_csv()).map_err(|e| GdrError::Io { path: csv.clone(), source: e })?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        axis: a.axis,
        sizes: a.sizes,
        engines: a.engines,
        epochs: a.epochs,
        seed: a.seed,
        memory_limit: a.memory_limit_mb.map(|mb| mb << 20),
        ..BenchConfig::default()
    };
    let data = a.data.spec(a.seed)?.load()?;
    let rows = bench(&data, &cfg, &reduce_options(None), |r| {
        println!(
            "{:<9} size {:>6}  knn {:>8.0}  affinity {:>6.0}  init {:>6.0}  optimize {:>8.0}  total {:>8.0} ms",
            r.engine.name(),
            r.size,
            r.knn_ms,
            r.affinity_ms,
            r.init_ms,
            r.optimize_ms,
            r.total_ms
        );
    })?;
    let (csv, svg) = write_bench(&rows, &a.out.out)?;
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}

/// `--config file.json` expands a flat JSON object into flags placed
/// before the command-line ones, so the command line wins.
fn expand_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let Some(pos) = args.iter().position(|a| a == "--config") else {
        return Ok(args);
    };
    let path = args.get(pos + 1).ok_or("--config needs a file")?;
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.to_string_lossy()))?;
    let map: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.to_string_lossy()))?;
    let mut flags = Vec::new();
    for (key, value) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            serde_json::Value::Bool(true) if key == "header" || key == "trace" || key == "decouple_amplification" => {
                flags.push(flag.into())
            }
            serde_json::Value::String(s) => flags.extend([flag.into(), s.into()]),
            serde_json::Value::Array(items) => {
                let joined: Vec<String> = items
                    .iter()
                    .map(|v| v.as_str().map_or_else(|| v.to_string(), str::to_string))
                    .collect();
                flags.extend([flag.into(), joined.join(",").into()]);
            }
            serde_json::Value::Null => {}
            other => flags.extend([flag.into(), other.to_string().into()]),
        }
    }
    let mut out: Vec<OsString> = args[..pos].to_vec();
    // keep program name and subcommand ahead of the file's flags
    let head = out.len().min(2);
    let tail = out.split_off(head);
    out.extend(flags);
    out.extend(tail);
    out.extend(args[pos + 2..].iter().cloned());
    Ok(out)
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    let res = match cli.command {
        Command::Reduce(a) => cmd_reduce(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
