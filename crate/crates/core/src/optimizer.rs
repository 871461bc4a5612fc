//! Epoch loop shared by every engine: attraction over graph edges,
//! repulsion by sampling or Barnes-Hut, in-loop or collected updates.

use std::cell::Cell;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affinity::AffinityGraph;
use crate::bh::{mean_angle, AngleSummary, QuadTree};
use crate::data::EmbeddingRecord;
use crate::kernels::{
    dist_sq, kl_unnormalized_term, pair_coefficient, q_unnorm, xlogx_ratio, ForceKind,
    GradientContext, KernelParams, LossKind,
};
use crate::{GdrError, Result};

const STREAM_PARTNERS: u64 = 1;
const STREAM_LOSS: u64 = 2;
const STREAM_Z0: u64 = 3;
const STREAM_ANGLE: u64 = 4;
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Edges fire in proportion to their weight; forces are unweighted.
    ScalarSampling,
    /// Every edge every epoch, weighted by `p_ij`.
    Explicit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Apply {
    InLoop,
    Collected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    LinearDecay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Repulsion {
    Sampled,
    BarnesHut,
}

/// Stand-in for `p_ik` on sampled repulsions (only the unnormalized KL
/// force uses it).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RepulsionWeight {
    MeanP,
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exaggeration {
    pub factor: f64,
    pub epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumSchedule {
    pub initial: f64,
    pub later: f64,
    /// Epochs run at `initial` before switching.
    pub switch_epoch: usize,
}

impl Default for MomentumSchedule {
    fn default() -> Self {
        MomentumSchedule {
            initial: 0.5,
            later: 0.8,
            switch_epoch: 250,
        }
    }
}

impl MomentumSchedule {
    /// Momentum for 1-based `epoch`.
    pub fn at(&self, epoch: usize) -> f64 {
        if epoch > self.switch_epoch {
            self.later
        } else {
            self.initial
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainsParams {
    pub increase: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for GainsParams {
    fn default() -> Self {
        GainsParams {
            increase: 0.2,
            decay: 0.8,
            floor: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub normalized: bool,
    pub loss: LossKind,
    pub sampling: Sampling,
    pub apply: Apply,
    pub amplification: bool,
    /// Allows amplification and normalization to be set independently.
    pub decouple_amplification: bool,
    pub sym_attraction: bool,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Multiplier on `lr`. `None` means `n / k_neighbors` when normalized
    /// and 1 otherwise.
    pub lr_scale: Option<f64>,
    pub epochs: usize,
    pub neg_rate: usize,
    /// Gradient component clip for unnormalized runs: per pair, and on
    /// each point's summed force when collected.
    pub clip: Option<f64>,
    pub seed: u64,
    pub kernel: KernelParams,
    pub repulsion: Repulsion,
    pub theta: f64,
    pub repulsion_weight: RepulsionWeight,
    pub exaggeration: Option<Exaggeration>,
    pub momentum: MomentumSchedule,
    pub gains: GainsParams,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            normalized: false,
            loss: LossKind::Kl,
            sampling: Sampling::Explicit,
            apply: Apply::Collected,
            amplification: false,
            decouple_amplification: false,
            sym_attraction: false,
            lr: 1.0,
            lr_schedule: LrSchedule::LinearDecay,
            lr_scale: None,
            epochs: 500,
            neg_rate: default_neg_rate(Sampling::Explicit),
            clip: None,
            seed: 0,
            kernel: KernelParams::default(),
            repulsion: Repulsion::Sampled,
            theta: 0.5,
            repulsion_weight: RepulsionWeight::MeanP,
            exaggeration: None,
            momentum: MomentumSchedule::default(),
            gains: GainsParams::default(),
            workers: 1,
        }
    }
}

pub fn default_neg_rate(sampling: Sampling) -> usize {
    match sampling {
        Sampling::Explicit => 1,
        Sampling::ScalarSampling => 5,
    }
}

impl RunConfig {
    /// Explicit sampling, collected updates, Student-t kernel. Setting
    /// `normalized` also switches amplification and the schedule.
    pub fn gdr(normalized: bool) -> Self {
        let mut cfg = RunConfig::default();
        cfg.set_normalized(normalized);
        cfg
    }

    /// Flips normalization together with the settings tied to it. The
    /// schedule stays linear decay: sampled normalized repulsion is noisy
    /// and needs the annealing.
    pub fn set_normalized(&mut self, normalized: bool) {
        self.normalized = normalized;
        self.amplification = normalized;
        self.lr_schedule = LrSchedule::LinearDecay;
        if normalized {
            self.clip = None;
            self.apply = Apply::Collected;
        } else {
            self.clip = Some(4.0);
            if self.repulsion == Repulsion::BarnesHut {
                self.repulsion = Repulsion::Sampled;
            }
        }
    }

    pub fn umap_emulation(kernel: KernelParams) -> Self {
        RunConfig {
            sampling: Sampling::ScalarSampling,
            apply: Apply::InLoop,
            sym_attraction: true,
            neg_rate: default_neg_rate(Sampling::ScalarSampling),
            clip: Some(4.0),
            kernel,
            ..RunConfig::default()
        }
    }

    pub fn tsne_emulation() -> Self {
        RunConfig {
            repulsion: Repulsion::BarnesHut,
            lr_schedule: LrSchedule::Constant,
            ..RunConfig::gdr(true)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GdrError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("--epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("--lr must be positive and finite");
        }
        if let Some(s) = self.lr_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad("learning-rate scale must be positive and finite");
            }
        }
        if self.neg_rate == 0 {
            return bad("--neg-rate must be at least 1");
        }
        if self.workers == 0 {
            return bad("--workers must be at least 1");
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad("--clip must be positive");
            }
            if self.normalized {
                return bad("--clip applies to unnormalized runs (got --normalized true with --clip)");
            }
        }
        if self.amplification && self.apply == Apply::InLoop {
            return bad("--amplify true requires --apply collected (got --apply in-loop)");
        }
        if !self.decouple_amplification && self.amplification != self.normalized {
            return Err(GdrError::InvalidConfig(format!(
                "--normalized {} requires --amplify {} (pass --decouple-amplification to override)",
                self.normalized, self.normalized
            )));
        }
        if self.sampling == Sampling::ScalarSampling && self.normalized {
            return bad("--sampling scalar-sampling requires --normalized false");
        }
        if self.repulsion == Repulsion::BarnesHut {
            if !self.normalized {
                return bad("Barnes-Hut repulsion requires --normalized true");
            }
            if self.apply != Apply::Collected || self.sampling != Sampling::Explicit {
                return bad("Barnes-Hut repulsion requires --sampling explicit --apply collected");
            }
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return bad("theta must be non-negative");
        }
        if let Some(ex) = self.exaggeration {
            if !(ex.factor > 0.0 && ex.factor.is_finite()) {
                return bad("exaggeration factor must be positive");
            }
        }
        let m = self.momentum;
        if !(0.0..1.0).contains(&m.initial) || !(0.0..1.0).contains(&m.later) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.gains.floor > 0.0 && self.gains.decay > 0.0 && self.gains.increase >= 0.0) {
            return bad("gains parameters must be positive");
        }
        self.kernel.validate()
    }

    fn exaggeration_at(&self, epoch: usize) -> f64 {
        match self.exaggeration {
            Some(ex) if epoch <= ex.epochs => ex.factor,
            _ => 1.0,
        }
    }

    /// Base learning rate for 1-based `epoch`, before the `n/k` scale.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::LinearDecay => self.lr * (1.0 - (epoch - 1) as f64 / self.epochs as f64),
        }
    }

    pub fn effective_lr_scale(&self, g: &AffinityGraph) -> f64 {
        match self.lr_scale {
            Some(s) => s,
            None if self.normalized => {
                let k = if g.k_neighbors > 0 {
                    g.k_neighbors as f64
                } else {
                    (g.num_directed() as f64 / g.n as f64).max(1.0)
                };
                g.n as f64 / k
            }
            None => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub y: EmbeddingRecord,
    pub velocity: Vec<f64>,
    pub gains: Vec<f64>,
    pub momentum: f64,
    pub epoch: usize,
    pub z_estimate: f64,
}

impl OptimizerState {
    pub fn new(y: EmbeddingRecord) -> Self {
        let len = y.coords.len();
        OptimizerState {
            y,
            velocity: vec![0.0; len],
            gains: vec![1.0; len],
            momentum: 0.0,
            epoch: 0,
            z_estimate: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// JSON-lines progress file.
    pub trace_path: Option<PathBuf>,
    /// Loss estimate cadence in epochs; 0 disables.
    pub loss_every: usize,
    pub loss_samples: usize,
    /// BH-vs-sampled repulsion angle cadence; 0 disables. 2-D only.
    pub angle_every: usize,
    pub angle_samples: usize,
}

impl RunOptions {
    pub fn with_loss() -> Self {
        RunOptions {
            loss_every: 1,
            loss_samples: 1000,
            ..RunOptions::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    /// Wall-clock milliseconds since the run started.
    pub ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub embedding: EmbeddingRecord,
    pub trace: Vec<TraceRecord>,
    pub state: OptimizerState,
    pub optimize_ms: f64,
}

pub fn run(g: &AffinityGraph, y0: &EmbeddingRecord, cfg: &RunConfig) -> Result<RunOutput> {
    run_with(g, y0, cfg, &RunOptions::with_loss())
}

pub fn run_with(
    g: &AffinityGraph,
    y0: &EmbeddingRecord,
    cfg: &RunConfig,
    opts: &RunOptions,
) -> Result<RunOutput> {
    cfg.validate()?;
    if y0.n != g.n {
        return Err(GdrError::LengthMismatch {
            left: y0.n,
            right: g.n,
        });
    }
    if g.n < 2 {
        return Err(GdrError::InvalidParameter("need at least two points".into()));
    }
    if g.num_edges() == 0 {
        return Err(GdrError::EmptyGraph);
    }
    if !y0.is_finite() {
        return Err(GdrError::InvalidParameter("initial embedding is not finite".into()));
    }
    if (cfg.repulsion == Repulsion::BarnesHut || opts.angle_every > 0) && y0.d != 2 {
        return Err(GdrError::UnsupportedDimension(y0.d));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| GdrError::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| Engine::new(g, cfg, y0.d).run(y0, opts))
}

trait Coords {
    fn get(&self, k: usize) -> f64;
    fn add(&self, k: usize, v: f64);
}

impl Coords for [Cell<f64>] {
    #[inline]
    fn get(&self, k: usize) -> f64 {
        self[k].get()
    }
    #[inline]
    fn add(&self, k: usize, v: f64) {
        self[k].set(self[k].get() + v);
    }
}

/// Lock-free shared coordinates; concurrent adds may lose updates.
struct Shared<'a>(&'a [AtomicU64]);

impl Coords for Shared<'_> {
    #[inline]
    fn get(&self, k: usize) -> f64 {
        f64::from_bits(self.0[k].load(Ordering::Relaxed))
    }
    #[inline]
    fn add(&self, k: usize, v: f64) {
        let cur = self.get(k);
        self.0[k].store((cur + v).to_bits(), Ordering::Relaxed);
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn point_rng(seed: u64, stream: u64, epoch: usize, i: usize) -> SmallRng {
    let h = splitmix(splitmix(splitmix(seed ^ splitmix(stream)) ^ epoch as u64) ^ i as u64);
    SmallRng::seed_from_u64(h)
}

/// Uniform index in `0..n` other than `i`.
#[inline]
fn draw_partner(rng: &mut SmallRng, i: usize, n: usize) -> usize {
    let r = rng.random_range(0..n - 1);
    if r >= i {
        r + 1
    } else {
        r
    }
}

#[inline]
fn clip(v: f64, c: Option<f64>) -> f64 {
    match c {
        Some(c) => v.clamp(-c, c),
        None => v,
    }
}

#[inline]
fn axpy(out: &mut [f64], coef: f64, yi: &[f64], yj: &[f64]) {
    for c in 0..out.len() {
        out[c] += coef * (yi[c] - yj[c]);
    }
}

/// Epochs between firings of each directed CSR edge: `max(P) / p`.
pub fn epochs_per_sample(g: &AffinityGraph) -> Vec<f64> {
    let max = g.max_weight();
    g.row_weights
        .iter()
        .map(|&w| if w > 0.0 { max / w } else { f64::INFINITY })
        .collect()
}

/// Whether an edge with period `every` fires in 1-based `epoch`: its
/// accumulated opportunity `epoch / every` crossed an integer.
#[inline]
pub fn fires(every: f64, epoch: usize) -> bool {
    (epoch as f64 / every).floor() > ((epoch - 1) as f64 / every).floor()
}

/// Momentum and gains step on collected forces (`grad = -force`).
pub fn apply_amplified(state: &mut OptimizerState, forces: &[f64], lr: f64, cfg: &RunConfig) {
    let mom = cfg.momentum.at(state.epoch.max(1));
    state.momentum = mom;
    let gp = cfg.gains;
    for (idx, &f) in forces.iter().enumerate() {
        let grad = -f;
        let v = state.velocity[idx];
        let gain = &mut state.gains[idx];
        if (grad > 0.0) != (v > 0.0) {
            *gain += gp.increase;
        } else {
            *gain *= gp.decay;
        }
        if *gain < gp.floor {
            *gain = gp.floor;
        }
        let nv = mom * v - lr * *gain * grad;
        state.velocity[idx] = nv;
        state.y.coords[idx] += nv;
    }
}

enum Partners {
    All,
    Sampled { count: usize, scale: f64 },
}

struct Engine<'a> {
    g: &'a AffinityGraph,
    cfg: &'a RunConfig,
    n: usize,
    d: usize,
    every: Vec<f64>,
    lr_scale: f64,
}

impl<'a> Engine<'a> {
    fn new(g: &'a AffinityGraph, cfg: &'a RunConfig, d: usize) -> Self {
        let every = if cfg.sampling == Sampling::ScalarSampling {
            epochs_per_sample(g)
        } else {
            Vec::new()
        };
        Engine {
            g,
            cfg,
            n: g.n,
            d,
            every,
            lr_scale: cfg.effective_lr_scale(g),
        }
    }

    fn exhaustive(&self) -> bool {
        self.cfg.neg_rate >= self.n - 1
    }

    fn partners(&self, i: usize) -> Partners {
        if self.exhaustive() {
            return Partners::All;
        }
        let count = self.g.degree(i) * self.cfg.neg_rate;
        let scale = if self.cfg.normalized && count > 0 {
            (self.n - 1) as f64 / count as f64
        } else {
            1.0
        };
        Partners::Sampled { count, scale }
    }

    #[inline]
    fn rep_p(&self, i: usize, k: usize) -> f64 {
        match self.cfg.repulsion_weight {
            RepulsionWeight::MeanP => self.g.mean_p,
            RepulsionWeight::Exact => self.g.weight(i, k),
        }
    }

    fn ctx(&self, z: f64) -> GradientContext {
        GradientContext {
            normalized: self.cfg.normalized,
            loss: self.cfg.loss,
            z,
            n: self.n,
        }
    }

    /// Normalized Frobenius forces are a factor `q/Z`-smaller than KL ones;
    /// their step is multiplied by `Z` to bring them to the same scale.
    fn frobenius_step(&self, z: f64) -> f64 {
        if self.cfg.normalized && self.cfg.loss == LossKind::Frobenius && z > 0.0 {
            z
        } else {
            1.0
        }
    }

    fn initial_z(&self, y: &[f64]) -> f64 {
        let mut rng = point_rng(self.cfg.seed, STREAM_Z0, 0, 0);
        let m = 10 * self.n;
        let d = self.d;
        let mut sum = 0.0;
        for _ in 0..m {
            let i = rng.random_range(0..self.n);
            let k = draw_partner(&mut rng, i, self.n);
            sum += q_unnorm(dist_sq(&y[i * d..(i + 1) * d], &y[k * d..(k + 1) * d]), &self.cfg.kernel);
        }
        (self.n * (self.n - 1)) as f64 / m as f64 * sum
    }

    fn run(&self, y0: &EmbeddingRecord, opts: &RunOptions) -> Result<RunOutput> {
        let start = Instant::now();
        let mut state = OptimizerState::new(y0.clone());
        state.z_estimate = self.initial_z(&y0.coords);
        let mut writer = match &opts.trace_path {
            Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| GdrError::io(p, e))?)),
            None => None,
        };
        let mut trace = Vec::new();
        for epoch in 1..=self.cfg.epochs {
            state.epoch = epoch;
            let lr = self.cfg.lr_at(epoch) * self.lr_scale;
            match self.cfg.apply {
                Apply::Collected => {
                    let (f, z) = self.collected_forces(&state.y.coords, epoch)?;
                    if z > 0.0 {
                        state.z_estimate = z;
                    }
                    let lr = lr * self.frobenius_step(state.z_estimate);
                    if self.cfg.amplification {
                        apply_amplified(&mut state, &f, lr, self.cfg);
                    } else {
                        for (y, f) in state.y.coords.iter_mut().zip(&f) {
                            *y += lr * f;
                        }
                    }
                }
                Apply::InLoop => {
                    let step = lr * self.frobenius_step(state.z_estimate);
                    let z = self.inloop_epoch(&mut state.y.coords, epoch, step, state.z_estimate);
                    if z > 0.0 {
                        state.z_estimate = z;
                    }
                }
            }
            check_divergence(&state.y.coords, epoch)?;
            let loss = (opts.loss_every > 0 && epoch % opts.loss_every == 0)
                .then(|| {
                    loss_trace_sample(
                        &state.y,
                        self.g,
                        self.cfg,
                        state.z_estimate,
                        opts.loss_samples.max(1),
                        self.cfg.seed ^ splitmix(STREAM_LOSS + epoch as u64),
                    )
                })
                .transpose()?;
            let angle = if opts.angle_every > 0 && epoch % opts.angle_every == 0 {
                let a = repulsion_angles(
                    &state.y,
                    self.g,
                    self.cfg,
                    epoch,
                    state.z_estimate,
                    opts.angle_samples.max(1),
                )?;
                (a.counted > 0).then_some(a.mean)
            } else {
                None
            };
            if loss.is_some() || angle.is_some() || writer.is_some() {
                let rec = TraceRecord {
                    epoch,
                    lr,
                    loss,
                    ms: start.elapsed().as_secs_f64() * 1e3,
                    z: self.cfg.normalized.then_some(state.z_estimate),
                    angle,
                };
                if let Some(w) = writer.as_mut() {
                    let line = serde_json::to_string(&rec)?;
                    writeln!(w, "{line}").map_err(|e| {
                        GdrError::io(opts.trace_path.clone().unwrap_or_default(), e)
                    })?;
                }
                trace.push(rec);
            }
        }
        if let Some(mut w) = writer {
            w.flush()
                .map_err(|e| GdrError::io(opts.trace_path.clone().unwrap_or_default(), e))?;
        }
        Ok(RunOutput {
            embedding: state.y.clone(),
            trace,
            optimize_ms: start.elapsed().as_secs_f64() * 1e3,
            state,
        })
    }

    /// Full force (negative gradient) for every point from positions `y`,
    /// plus this epoch's `Z` estimate (0 when unnormalized).
    fn collected_forces(&self, y: &[f64], epoch: usize) -> Result<(Vec<f64>, f64)> {
        let (n, d) = (self.n, self.d);
        let tree = if self.cfg.repulsion == Repulsion::BarnesHut {
            Some(QuadTree::build(&EmbeddingRecord::new(y.to_vec(), n, d)?)?)
        } else {
            None
        };
        let slots = if self.cfg.normalized { 4 } else { 1 };
        let mut buf = vec![0.0; n * slots * d];
        let mut zparts = vec![(0.0, 0.0); n];
        buf.par_chunks_mut(slots * d)
            .zip(zparts.par_iter_mut())
            .enumerate()
            .with_min_len(64)
            .for_each(|(i, (out, zp))| {
                *zp = if self.cfg.normalized {
                    self.collect_normalized(i, y, tree.as_ref(), epoch, out)
                } else {
                    self.collect_unnormalized(i, y, epoch, out);
                    (0.0, 0.0)
                };
            });
        if !self.cfg.normalized {
            // summed forces get the same clip
            buf.iter_mut().for_each(|v| *v = clip(*v, self.cfg.clip));
            return Ok((buf, 0.0));
        }
        let (zsum, samples) = zparts
            .iter()
            .fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
        let z = if samples > 0.0 {
            (n * (n - 1)) as f64 / samples * zsum
        } else {
            0.0
        };
        let mut f = vec![0.0; n * d];
        if z <= 0.0 {
            return Ok((f, z));
        }
        for i in 0..n {
            let s = &buf[i * 4 * d..(i + 1) * 4 * d];
            let (a1, a2, r1, r2) = (&s[..d], &s[d..2 * d], &s[2 * d..3 * d], &s[3 * d..]);
            for c in 0..d {
                f[i * d + c] = match self.cfg.loss {
                    LossKind::Kl => -4.0 * a1[c] + 4.0 * r1[c] / z,
                    LossKind::Frobenius => {
                        -4.0 * (a1[c] / z + 2.0 * a2[c] / (z * z))
                            + 4.0 * (r1[c] / (z * z) + 2.0 * r2[c] / (z * z * z))
                    }
                };
            }
        }
        Ok((f, z))
    }

    /// Raw kernel power sums for point `i`; returns `(sum w, samples)`.
    fn collect_normalized(
        &self,
        i: usize,
        y: &[f64],
        tree: Option<&QuadTree>,
        epoch: usize,
        out: &mut [f64],
    ) -> (f64, f64) {
        let (n, d) = (self.n, self.d);
        let kp = &self.cfg.kernel;
        let yi = &y[i * d..(i + 1) * d];
        let (a1, rest) = out.split_at_mut(d);
        let (a2, rest) = rest.split_at_mut(d);
        let (r1, r2) = rest.split_at_mut(d);
        let pm = self.cfg.exaggeration_at(epoch) * if self.cfg.sym_attraction { 2.0 } else { 1.0 };
        let (cols, ws) = self.g.row(i);
        for (&j, &p) in cols.iter().zip(ws) {
            let yj = &y[j as usize * d..(j as usize + 1) * d];
            let w = q_unnorm(dist_sq(yi, yj), kp);
            match self.cfg.loss {
                LossKind::Kl => axpy(a1, pm * p * w, yi, yj),
                LossKind::Frobenius => {
                    let w2 = w * w;
                    axpy(a1, pm * p * w2, yi, yj);
                    axpy(a2, pm * p * w2 * w, yi, yj);
                }
            }
        }
        if let Some(t) = tree {
            let s = t.sums_for(i, self.cfg.theta, kp);
            let (p1, p2) = match self.cfg.loss {
                LossKind::Kl => (s.f2, [0.0; 2]),
                LossKind::Frobenius => (s.f3, s.f4),
            };
            r1.copy_from_slice(&p1);
            r2.copy_from_slice(&p2);
            return (s.z, (n - 1) as f64);
        }
        let mut zsum = 0.0;
        let mut samples = 0.0;
        let mut visit = |k: usize, scale: f64| {
            let yk = &y[k * d..(k + 1) * d];
            let w = q_unnorm(dist_sq(yi, yk), kp);
            zsum += w;
            samples += 1.0;
            match self.cfg.loss {
                LossKind::Kl => axpy(r1, scale * w * w, yi, yk),
                LossKind::Frobenius => {
                    let w3 = w * w * w;
                    axpy(r1, scale * w3, yi, yk);
                    axpy(r2, scale * w3 * w, yi, yk);
                }
            }
        };
        match self.partners(i) {
            Partners::All => (0..n).filter(|&k| k != i).for_each(|k| visit(k, 1.0)),
            Partners::Sampled { count, scale } => {
                let mut rng = point_rng(self.cfg.seed, STREAM_PARTNERS, epoch, i);
                for _ in 0..count {
                    visit(draw_partner(&mut rng, i, n), scale);
                }
            }
        }
        (zsum, samples)
    }

    fn collect_unnormalized(&self, i: usize, y: &[f64], epoch: usize, out: &mut [f64]) {
        let (n, d) = (self.n, self.d);
        let kp = &self.cfg.kernel;
        let ctx = self.ctx(1.0);
        let clip_at = self.cfg.clip;
        let yi = &y[i * d..(i + 1) * d];
        let sym = if self.cfg.sym_attraction { 2.0 } else { 1.0 };
        let ex = self.cfg.exaggeration_at(epoch);
        let scalar = self.cfg.sampling == Sampling::ScalarSampling;
        let lo = self.g.row_offsets[i];
        let (cols, ws) = self.g.row(i);
        let mut rng = point_rng(self.cfg.seed, STREAM_PARTNERS, epoch, i);
        let mut fired = 0;
        for (e, (&j, &p)) in cols.iter().zip(ws).enumerate() {
            if scalar && !fires(self.every[lo + e], epoch) {
                continue;
            }
            fired += 1;
            let yj = &y[j as usize * d..(j as usize + 1) * d];
            let pa = if scalar { ex } else { ex * p };
            let coef = pair_coefficient(dist_sq(yi, yj), pa, ForceKind::Attract, &ctx, kp);
            for c in 0..d {
                out[c] += sym * clip(coef * (yi[c] - yj[c]), clip_at);
            }
        }
        let mut visit = |k: usize, p: f64| {
            let yk = &y[k * d..(k + 1) * d];
            let coef = pair_coefficient(dist_sq(yi, yk), p, ForceKind::Repulse, &ctx, kp);
            for c in 0..d {
                out[c] += clip(coef * (yi[c] - yk[c]), clip_at);
            }
        };
        if scalar {
            for _ in 0..fired * self.cfg.neg_rate {
                visit(draw_partner(&mut rng, i, n), 0.0);
            }
            return;
        }
        match self.partners(i) {
            Partners::All => (0..n).filter(|&k| k != i).for_each(|k| visit(k, self.rep_p(i, k))),
            Partners::Sampled { count, .. } => {
                for _ in 0..count {
                    let k = draw_partner(&mut rng, i, n);
                    visit(k, self.rep_p(i, k));
                }
            }
        }
    }

    /// Moves points as forces are computed. Returns the new `Z` estimate
    /// (0 when unnormalized).
    fn inloop_epoch(&self, y: &mut [f64], epoch: usize, lr: f64, z_prev: f64) -> f64 {
        let n = self.n;
        let (zsum, samples) = if self.cfg.workers == 1 {
            let cells = Cell::from_mut(y).as_slice_of_cells();
            let mut scratch = (vec![0.0; self.d], vec![0.0; self.d]);
            (0..n).fold((0.0, 0.0), |acc, i| {
                let (z, s) = self.inloop_point(cells, i, epoch, lr, z_prev, &mut scratch);
                (acc.0 + z, acc.1 + s)
            })
        } else {
            let atoms: Vec<AtomicU64> = y.iter().map(|v| AtomicU64::new(v.to_bits())).collect();
            let shared = Shared(&atoms);
            let parts: Vec<(f64, f64)> = (0..n)
                .into_par_iter()
                .with_min_len(256)
                .map_init(
                    || (vec![0.0; self.d], vec![0.0; self.d]),
                    |scratch, i| self.inloop_point(&shared, i, epoch, lr, z_prev, scratch),
                )
                .collect();
            for (v, a) in y.iter_mut().zip(&atoms) {
                *v = f64::from_bits(a.load(Ordering::Relaxed));
            }
            parts.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1))
        };
        if self.cfg.normalized && samples > 0.0 {
            (n * (n - 1)) as f64 / samples * zsum
        } else {
            0.0
        }
    }

    #[allow(clippy::too_many_arguments)]
    #[inline]
    fn pair_step<C: Coords + ?Sized>(
        &self,
        y: &C,
        i: usize,
        j: usize,
        p: f64,
        kind: ForceKind,
        ctx: &GradientContext,
        step: f64,
        move_j: bool,
        scratch: &mut (Vec<f64>, Vec<f64>),
    ) -> f64 {
        let d = self.d;
        let (yi, yj) = (&mut scratch.0, &mut scratch.1);
        for c in 0..d {
            yi[c] = y.get(i * d + c);
            yj[c] = y.get(j * d + c);
        }
        let s = dist_sq(yi, yj);
        let coef = pair_coefficient(s, p, kind, ctx, &self.cfg.kernel);
        for c in 0..d {
            let g = step * clip(coef * (yi[c] - yj[c]), self.cfg.clip);
            y.add(i * d + c, g);
            if move_j {
                y.add(j * d + c, -g);
            }
        }
        if self.cfg.normalized {
            q_unnorm(s, &self.cfg.kernel)
        } else {
            0.0
        }
    }

    fn inloop_point<C: Coords + ?Sized>(
        &self,
        y: &C,
        i: usize,
        epoch: usize,
        lr: f64,
        z_prev: f64,
        scratch: &mut (Vec<f64>, Vec<f64>),
    ) -> (f64, f64) {
        let n = self.n;
        let ctx = self.ctx(z_prev);
        let scalar = self.cfg.sampling == Sampling::ScalarSampling;
        let sym = self.cfg.sym_attraction;
        let ex = self.cfg.exaggeration_at(epoch);
        let lo = self.g.row_offsets[i];
        let (cols, ws) = self.g.row(i);
        let mut rng = point_rng(self.cfg.seed, STREAM_PARTNERS, epoch, i);
        let (per_edge, scale) = match self.partners(i) {
            Partners::All => (0, 1.0),
            Partners::Sampled { scale, .. } => (self.cfg.neg_rate, scale),
        };
        let mut zsum = 0.0;
        let mut samples = 0.0;
        for (e, (&j, &p)) in cols.iter().zip(ws).enumerate() {
            if scalar && !fires(self.every[lo + e], epoch) {
                continue;
            }
            let pa = if scalar { ex } else { ex * p };
            self.pair_step(y, i, j as usize, pa, ForceKind::Attract, &ctx, lr, sym, scratch);
            for _ in 0..per_edge {
                let k = draw_partner(&mut rng, i, n);
                let pk = if scalar { 0.0 } else { self.rep_p(i, k) };
                zsum += self.pair_step(y, i, k, pk, ForceKind::Repulse, &ctx, lr * scale, false, scratch);
                samples += 1.0;
            }
        }
        if per_edge == 0 {
            for k in (0..n).filter(|&k| k != i) {
                let pk = if scalar { 0.0 } else { self.rep_p(i, k) };
                zsum += self.pair_step(y, i, k, pk, ForceKind::Repulse, &ctx, lr, false, scratch);
                samples += 1.0;
            }
        }
        (zsum, samples)
    }
}

fn check_divergence(y: &[f64], epoch: usize) -> Result<()> {
    if let Some(pos) = y.iter().position(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
        let v = y[pos];
        let reason = if v.is_finite() {
            format!("coordinate {pos} reached {v:.3e} (limit {DIVERGENCE_LIMIT:.0e})")
        } else {
            format!("coordinate {pos} is {v}")
        };
        return Err(GdrError::Diverged { epoch, reason });
    }
    Ok(())
}

/// One epoch of collected forces from `y` without applying them; returns
/// the force matrix and the `Z` estimate (0 when unnormalized).
pub fn epoch_forces(
    g: &AffinityGraph,
    y: &EmbeddingRecord,
    cfg: &RunConfig,
    epoch: usize,
) -> Result<(Vec<f64>, f64)> {
    cfg.validate()?;
    if y.n != g.n {
        return Err(GdrError::LengthMismatch {
            left: y.n,
            right: g.n,
        });
    }
    if epoch == 0 {
        return Err(GdrError::InvalidParameter("epochs are 1-based".into()));
    }
    Engine::new(g, cfg, y.d).collected_forces(&y.coords, epoch)
}

/// Loss contribution of the unordered pair `{i, j}`.
#[inline]
fn pair_loss(cfg: &RunConfig, p: f64, w: f64, z: f64) -> f64 {
    match (cfg.normalized, cfg.loss) {
        (true, LossKind::Kl) => 2.0 * xlogx_ratio(p, w / z),
        (false, LossKind::Kl) => kl_unnormalized_term(p, w),
        (true, LossKind::Frobenius) => 2.0 * (p - w / z).powi(2),
        (false, LossKind::Frobenius) => (p - w).powi(2),
    }
}

/// Estimate of the configured loss from `m` pair evaluations: graph edges
/// plus uniform pairs. Exact when `m` covers every pair.
pub fn loss_trace_sample(
    y: &EmbeddingRecord,
    g: &AffinityGraph,
    cfg: &RunConfig,
    z: f64,
    m: usize,
    seed: u64,
) -> Result<f64> {
    if m == 0 {
        return Err(GdrError::InvalidParameter("loss sample count must be >= 1".into()));
    }
    let (n, d) = (y.n, y.d);
    let kp = &cfg.kernel;
    let w_of = |i: usize, j: usize| q_unnorm(dist_sq(y.row(i), y.row(j)), kp);
    let total_pairs = n * (n - 1) / 2;
    if m >= total_pairs {
        let mut z_exact = 0.0;
        if cfg.normalized {
            for i in 0..n {
                for j in i + 1..n {
                    z_exact += 2.0 * w_of(i, j);
                }
            }
        }
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                total += pair_loss(cfg, g.weight(i, j), w_of(i, j), z_exact);
            }
        }
        return Ok(total);
    }
    let _ = d;
    let mut rng = SmallRng::seed_from_u64(splitmix(seed));
    let e = g.num_edges();
    let m_e = e.min((m / 2).max(1));
    let m_u = m.saturating_sub(m_e).max(1);
    let edge_term = |&(i, j, p): &(u32, u32, f64)| {
        let w = w_of(i as usize, j as usize);
        pair_loss(cfg, p, w, z) - pair_loss(cfg, 0.0, w, z)
    };
    let edge_part = if m_e == e {
        g.edges.iter().map(edge_term).sum::<f64>()
    } else {
        let s: f64 = (0..m_e).map(|_| edge_term(&g.edges[rng.random_range(0..e)])).sum();
        s * e as f64 / m_e as f64
    };
    let background = if cfg.normalized && cfg.loss == LossKind::Kl {
        0.0
    } else {
        let s: f64 = (0..m_u)
            .map(|_| {
                let i = rng.random_range(0..n);
                let j = draw_partner(&mut rng, i, n);
                pair_loss(cfg, 0.0, w_of(i, j), z)
            })
            .sum();
        s * total_pairs as f64 / m_u as f64
    };
    Ok(edge_part + background)
}

/// Mean angle between the Barnes-Hut repulsion and the sampled repulsion
/// estimate (same partners the optimizer draws in `epoch`) over `samples`
/// random points.
pub fn repulsion_angles(
    y: &EmbeddingRecord,
    g: &AffinityGraph,
    cfg: &RunConfig,
    epoch: usize,
    z: f64,
    samples: usize,
) -> Result<AngleSummary> {
    if y.d != 2 {
        return Err(GdrError::UnsupportedDimension(y.d));
    }
    let tree = QuadTree::build(y)?;
    let engine = Engine::new(g, cfg, 2);
    let ctx = engine.ctx(z.max(f64::MIN_POSITIVE));
    let mut pick = point_rng(cfg.seed, STREAM_ANGLE, epoch, 0);
    let n = y.n;
    let pairs: Vec<([f64; 2], [f64; 2])> = (0..samples)
        .map(|_| {
            let i = pick.random_range(0..n);
            let bh = tree.sums_for(i, cfg.theta, &cfg.kernel).f2;
            let yi = y.row(i);
            let mut est = [0.0; 2];
            let mut visit = |k: usize| {
                let yk = y.row(k);
                let coef = pair_coefficient(
                    dist_sq(yi, yk),
                    engine.rep_p(i, k),
                    ForceKind::Repulse,
                    &ctx,
                    &cfg.kernel,
                );
                est[0] += coef * (yi[0] - yk[0]);
                est[1] += coef * (yi[1] - yk[1]);
            };
            match engine.partners(i) {
                Partners::All => (0..n).filter(|&k| k != i).for_each(&mut visit),
                Partners::Sampled { count, .. } => {
                    let mut rng = point_rng(cfg.seed, STREAM_PARTNERS, epoch, i);
                    for _ in 0..count {
                        visit(draw_partner(&mut rng, i, n));
                    }
                }
            }
            (bh, est)
        })
        .collect();
    Ok(mean_angle(pairs.iter().map(|(a, b)| (&a[..], &b[..]))))
}
