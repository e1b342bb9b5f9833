//! Sequential training over a task stream with episodic replay.
//!
//! Every new-task mini-batch produces exactly one parameter update. For the
//! constrained methods each old task contributes a gradient on a freshly
//! sampled memory batch; those gradients shape the update direction.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomp::GradientBundle;
use crate::error::{Error, Result};
use crate::layerwise::{concatenated_solve, layerwise_solve, map_layers};
use crate::linalg::{FlatVector, DEFAULT_RANK_TOL};
use crate::memory::{
    sample_memory_batch, split_replay_buffer, update_memory, Coreset, EpisodicMemory, MemoryPolicy,
};
use crate::metrics::AccuracyMatrix;
use crate::model::{Batch, LayerGranularity, MlpModel};
use crate::solver::{
    agem_update, gem_qp_update, sgem_pick, Branch, Feasibility, Relaxation, SolverConfig,
    UpdateMode,
};
use crate::tasks::TaskStream;

/// K used by the PCA-relaxed table variants when none is given.
pub const DEFAULT_PCA_K: usize = 5;

// sub-seed offsets, one per consumer of randomness
const SEED_SHUFFLE: u64 = 0x1000;
const SEED_SAMPLE: u64 = 0x2000;
const SEED_PICK: u64 = 0x3000;
const SEED_RESERVOIR: u64 = 0x4000;
const SEED_SPLIT: u64 = 0x5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Plain SGD on the new task.
    Single,
    /// One inequality against the mean old-task gradient.
    AGem,
    /// One inequality against a random old task.
    SGem,
    /// One inequality per old task (dual QP).
    Gem,
    /// Shared-gradient inequality plus task-specific orthogonality.
    Ours(Relaxation),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MethodVariant {
    pub method: Method,
    /// Solve per layer instead of on the concatenated gradient.
    pub layerwise: bool,
}

impl MethodVariant {
    pub fn new(method: Method, layerwise: bool) -> Self {
        MethodVariant { method, layerwise }
    }

    /// The seven ablation rows, `a` through `g`.
    pub fn table(label: char, k: usize) -> Option<Self> {
        let v = match label {
            'a' => MethodVariant::new(Method::Single, false),
            'b' => MethodVariant::new(Method::AGem, false),
            'c' => MethodVariant::new(Method::AGem, true),
            'd' => MethodVariant::new(Method::Ours(Relaxation::Full), false),
            'e' => MethodVariant::new(Method::Ours(Relaxation::PcaTopK(k)), false),
            'f' => MethodVariant::new(Method::Ours(Relaxation::Full), true),
            'g' => MethodVariant::new(Method::Ours(Relaxation::PcaTopK(k)), true),
            _ => return None,
        };
        Some(v)
    }

    pub fn mode(&self) -> UpdateMode {
        if self.layerwise {
            UpdateMode::Layerwise
        } else {
            UpdateMode::Concatenated
        }
    }

    pub fn solver_config(&self, rank_tol: f64) -> Option<SolverConfig> {
        match self.method {
            Method::Ours(relaxation) => Some(SolverConfig {
                relaxation,
                rank_tol,
                mode: self.mode(),
            }),
            _ => None,
        }
    }

    fn uses_memory(&self) -> bool {
        self.method != Method::Single
    }
}

impl fmt::Display for MethodVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.method {
            Method::Single => write!(f, "single")?,
            Method::AGem => write!(f, "agem")?,
            Method::SGem => write!(f, "sgem")?,
            Method::Gem => write!(f, "gem")?,
            Method::Ours(Relaxation::Full) => write!(f, "ours")?,
            Method::Ours(r) => write!(f, "ours-{r}")?,
        }
        if self.layerwise {
            write!(f, "+lgu")?;
        }
        Ok(())
    }
}

impl FromStr for MethodVariant {
    type Err = Error;

    /// Accepts `single`, `agem`, `sgem`, `gem`, `ours`, `ours-pca:K`,
    /// `ours-first:K`, `ours-last:K`, each optionally suffixed with `+lgu`,
    /// and the ablation labels `a`..`g` (`e:K` / `g:K` pick K).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown variant `{s}`"));
        let text = s.trim().to_ascii_lowercase();
        let (base, layerwise) = match text.strip_suffix("+lgu") {
            Some(b) => (b, true),
            None => (text.as_str(), false),
        };
        let mut chars = base.chars();
        if let Some(label @ 'a'..='g') = chars.next() {
            let rest = chars.as_str();
            let k = match rest {
                "" => Some(DEFAULT_PCA_K),
                r => r
                    .strip_prefix(':')
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|k| *k > 0),
            };
            if let (Some(k), true) = (k, rest.is_empty() || matches!(label, 'e' | 'g')) {
                let v = MethodVariant::table(label, k).ok_or_else(bad)?;
                if layerwise && v.layerwise {
                    return Err(bad());
                }
                return Ok(MethodVariant::new(v.method, v.layerwise || layerwise));
            }
        }
        let method = match base {
            "single" => Method::Single,
            "agem" => Method::AGem,
            "sgem" => Method::SGem,
            "gem" => Method::Gem,
            "ours" => Method::Ours(Relaxation::Full),
            other => {
                let r = other.strip_prefix("ours-").ok_or_else(bad)?;
                Method::Ours(r.parse::<Relaxation>().map_err(|_| bad())?)
            }
        };
        Ok(MethodVariant::new(method, layerwise))
    }
}

impl Serialize for MethodVariant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MethodVariant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where replayed old-task batches come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayScheme {
    /// One episodic memory per old task.
    #[default]
    PerTask,
    /// The pooled buffer is re-split into this many pseudo-tasks whenever a
    /// new task starts (class-incremental setting).
    SplitBuffer(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub bs_new: usize,
    pub bs_old: usize,
    pub memory_size: usize,
    pub memory_policy: MemoryPolicy,
    pub seed: u64,
    pub variant: MethodVariant,
    pub rank_tol: f64,
    pub hidden: Vec<usize>,
    pub granularity: LayerGranularity,
    /// Restrict the softmax and arg-max to each task's classes.
    pub multi_head: bool,
    pub replay: ReplayScheme,
    /// Evaluate memory gradients on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            epochs: 1,
            bs_new: 10,
            bs_old: 20,
            memory_size: 256,
            memory_policy: MemoryPolicy::RingLast,
            seed: 0,
            variant: MethodVariant::new(Method::Ours(Relaxation::Full), true),
            rank_tol: DEFAULT_RANK_TOL,
            hidden: vec![100, 100],
            granularity: LayerGranularity::Fused,
            multi_head: true,
            replay: ReplayScheme::PerTask,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail("lr must be a positive finite number");
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1");
        }
        if self.bs_new == 0 || self.bs_old == 0 {
            return fail("batch sizes must be >= 1");
        }
        if self.memory_size == 0 {
            return fail("memory_size must be >= 1");
        }
        if self.replay == ReplayScheme::SplitBuffer(0) {
            return fail("split replay needs at least one sub-buffer");
        }
        if let Some(cfg) = self.variant.solver_config(self.rank_tol) {
            cfg.validate()?;
        }
        Ok(())
    }
}

/// A memory to replay, with the class mask of the task it came from.
#[derive(Clone, Copy, Debug)]
pub struct Replay<'a> {
    pub memory: &'a EpisodicMemory,
    pub mask: Option<&'a [usize]>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOptions {
    pub lr: f64,
    pub bs_old: usize,
    pub rank_tol: f64,
    pub parallel: bool,
}

pub struct StepRngs {
    /// Memory batch draws.
    pub sample: ChaCha8Rng,
    /// Random-memory choice of the stochastic single-memory variant.
    pub pick: ChaCha8Rng,
}

impl StepRngs {
    pub fn from_seed(seed: u64) -> Self {
        StepRngs {
            sample: ChaCha8Rng::seed_from_u64(seed.wrapping_add(SEED_SAMPLE)),
            pick: ChaCha8Rng::seed_from_u64(seed.wrapping_add(SEED_PICK)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepTrace {
    pub loss_new: f64,
    pub loss_old: Vec<f64>,
    /// The update direction that was applied.
    pub w: FlatVector,
    /// One entry per solved block (a single one unless layerwise); empty
    /// when no constraint was involved.
    pub branches: Vec<Branch>,
    pub alignments: Vec<f64>,
    pub degenerate: bool,
    pub feasibility: Option<Feasibility>,
    /// (dual iterations, converged) for the per-task QP baseline.
    pub gem: Option<(usize, bool)>,
    pub solver_time: Duration,
}

fn ensure_finite(v: &FlatVector, what: impl FnOnce() -> String) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

/// One iteration: new-task gradient, memory gradients, constrained direction,
/// parameter update.
pub fn train_step(
    model: &mut MlpModel,
    new_batch: &Batch,
    new_mask: Option<&[usize]>,
    replay: &[Replay<'_>],
    variant: &MethodVariant,
    opts: &StepOptions,
    rngs: &mut StepRngs,
) -> Result<StepTrace> {
    let (loss_new, g) = model.loss_and_grad(new_batch, new_mask)?;
    if !loss_new.is_finite() {
        return Err(Error::NonFinite("new-task loss".into()));
    }
    ensure_finite(&g, || "new-task gradient".into())?;

    if !variant.uses_memory() || replay.is_empty() {
        model.apply_update(&g, opts.lr)?;
        return Ok(StepTrace {
            loss_new,
            loss_old: Vec::new(),
            w: g,
            branches: Vec::new(),
            alignments: Vec::new(),
            degenerate: false,
            feasibility: None,
            gem: None,
            solver_time: Duration::ZERO,
        });
    }

    // draws happen in task order before any gradient work, so the parallel
    // path consumes the generator identically
    let batches = replay
        .iter()
        .map(|r| sample_memory_batch(r.memory, opts.bs_old, &mut rngs.sample))
        .collect::<Result<Vec<_>>>()?;
    let eval = |(b, r): (&Batch, &Replay<'_>)| model.loss_and_grad(b, r.mask);
    let results: Vec<(f64, FlatVector)> = if opts.parallel {
        batches
            .par_iter()
            .zip(replay.par_iter())
            .map(eval)
            .collect::<Result<_>>()?
    } else {
        batches
            .iter()
            .zip(replay.iter())
            .map(eval)
            .collect::<Result<_>>()?
    };
    let (loss_old, old_grads): (Vec<f64>, Vec<FlatVector>) = results.into_iter().unzip();
    for (i, og) in old_grads.iter().enumerate() {
        ensure_finite(og, || {
            format!("gradient of memory {}", replay[i].memory.task_id)
        })?;
    }

    let layout = model.layout().clone();
    let started = Instant::now();
    let bundle = GradientBundle::new(g, old_grads)?;
    let shared = || bundle.shared.as_ref().expect("memories present");
    let mut branches = Vec::new();
    let mut alignments = Vec::new();
    let mut degenerate = false;
    let mut gem = None;
    let mut pending_check = None;
    let mut feasibility = None;

    let w = match variant.method {
        Method::Single => unreachable!("handled above"),
        Method::AGem if variant.layerwise => map_layers(&bundle, &layout, |b| {
            agem_update(&b.new_grad, b.shared.as_ref().expect("memories present"))
        })?,
        Method::AGem => agem_update(&bundle.new_grad, shared())?,
        Method::SGem => {
            let pick = sgem_pick(bundle.num_old(), &mut rngs.pick)?;
            if variant.layerwise {
                map_layers(&bundle, &layout, |b| {
                    agem_update(&b.new_grad, &b.old_grads[pick])
                })?
            } else {
                agem_update(&bundle.new_grad, &bundle.old_grads[pick])?
            }
        }
        Method::Gem => {
            let mut iterations = 0;
            let mut converged = true;
            let mut solve = |b: &GradientBundle| -> Result<FlatVector> {
                let out = gem_qp_update(&b.new_grad, &b.old_grads)?;
                iterations += out.iterations;
                converged &= out.converged;
                Ok(out.w)
            };
            let w = if variant.layerwise {
                map_layers(&bundle, &layout, &mut solve)?
            } else {
                solve(&bundle)?
            };
            gem = Some((iterations, converged));
            w
        }
        Method::Ours(_) => {
            let cfg = variant
                .solver_config(opts.rank_tol)
                .expect("constrained variant");
            if variant.layerwise {
                let up = layerwise_solve(&bundle, &layout, &cfg)?;
                for l in &up.layers {
                    branches.push(l.branch);
                    alignments.push(l.shared_alignment);
                    degenerate |= l.degenerate;
                }
                feasibility = up.worst_feasibility();
                up.w
            } else {
                let (r, basis) = concatenated_solve(&bundle, &cfg)?;
                branches.push(r.branch);
                alignments.push(r.shared_alignment);
                degenerate = r.degenerate;
                pending_check = Some(basis);
                r.w
            }
        }
    };
    let solver_time = started.elapsed();

    if let Some(basis) = pending_check {
        feasibility = Some(Feasibility::measure(
            &bundle.new_grad,
            shared(),
            &basis,
            &w,
        )?);
    }
    ensure_finite(&w, || "update direction".into())?;
    model.apply_update(&w, opts.lr)?;
    Ok(StepTrace {
        loss_new,
        loss_old,
        w,
        branches,
        alignments,
        degenerate,
        feasibility,
        gem,
        solver_time,
    })
}

/// One line of the run log. Holds no timing, so logs are reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub step: usize,
    pub epoch: usize,
    pub iter: usize,
    pub loss_new: f64,
    pub loss_old_mean: Option<f64>,
    /// `sgd`, `project`, `reflect`, `mixed` (layerwise with both), or
    /// `baseline` for the GEM family.
    pub branch: String,
    pub degenerate: bool,
    pub feasibility: Option<Feasibility>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub wall_clock_s: f64,
    pub solver_total_s: f64,
    pub iterations: usize,
}

impl RunTiming {
    pub fn solver_mean_us(&self) -> f64 {
        if self.iterations == 0 {
            0.0
        } else {
            self.solver_total_s * 1e6 / self.iterations as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub matrix: AccuracyMatrix,
    pub log: Vec<IterRecord>,
    pub timing: RunTiming,
    /// Worst constraint residuals over every constrained update.
    pub feasibility: Option<Feasibility>,
    pub degenerate_updates: usize,
    pub gem_unconverged: usize,
}

fn branch_label(trace: &StepTrace) -> String {
    if trace.loss_old.is_empty() {
        return "sgd".into();
    }
    if trace.branches.is_empty() {
        return "baseline".into();
    }
    let reflect = trace
        .branches
        .iter()
        .filter(|b| **b == Branch::ProjectAndReflect)
        .count();
    match reflect {
        0 => "project".into(),
        n if n == trace.branches.len() => "reflect".into(),
        _ => "mixed".into(),
    }
}

/// Trains through every task of `stream` and fills the accuracy matrix.
pub fn train_sequence(stream: &TaskStream, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::Empty("task stream"));
    }
    let started = Instant::now();
    let mut sizes = vec![stream.input_dim()];
    sizes.extend(&cfg.hidden);
    sizes.push(stream.num_classes);
    let mut model = MlpModel::new(&sizes, cfg.seed, cfg.granularity)?;

    let masks: Vec<Option<Vec<usize>>> = stream
        .tasks
        .iter()
        .map(|t| {
            (cfg.multi_head && t.class_subset.len() < stream.num_classes)
                .then(|| t.class_subset.clone())
        })
        .collect();

    let opts = StepOptions {
        lr: cfg.lr,
        bs_old: cfg.bs_old,
        rank_tol: cfg.rank_tol,
        parallel: cfg.parallel,
    };
    let mut rngs = StepRngs::from_seed(cfg.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SEED_SHUFFLE));
    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SEED_SPLIT));

    let n_tasks = stream.len();
    let mut matrix = AccuracyMatrix::new(n_tasks);
    let mut coreset = Coreset::new();
    let mut log = Vec::new();
    let mut timing = RunTiming::default();
    let mut worst: Option<Feasibility> = None;
    let mut degenerate_updates = 0;
    let mut gem_unconverged = 0;

    for (t, task) in stream.tasks.iter().enumerate() {
        let pseudo: Vec<EpisodicMemory>;
        let replay: Vec<Replay<'_>> = match cfg.replay {
            ReplayScheme::PerTask => coreset
                .memories()
                .iter()
                .map(|m| Replay {
                    memory: m,
                    mask: masks[m.task_id].as_deref(),
                })
                .collect(),
            ReplayScheme::SplitBuffer(parts) => {
                pseudo = if coreset.is_empty() {
                    Vec::new()
                } else {
                    split_replay_buffer(&coreset, parts.min(coreset.total_items()), &mut split_rng)?
                };
                pseudo
                    .iter()
                    .map(|m| Replay {
                        memory: m,
                        mask: None,
                    })
                    .collect()
            }
        };

        let mut iter = 0;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..task.train.len()).collect();
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(cfg.bs_new) {
                let batch = task.train.select(chunk);
                let trace = train_step(
                    &mut model,
                    &batch,
                    masks[t].as_deref(),
                    &replay,
                    &cfg.variant,
                    &opts,
                    &mut rngs,
                )
                .map_err(|e| match e {
                    Error::NonFinite(what) => {
                        Error::NonFinite(format!("{what} (task {}, iteration {iter})", t + 1))
                    }
                    other => other,
                })?;
                if let Some(f) = trace.feasibility {
                    worst = Some(worst.map_or(f, |w| w.worst(f)));
                }
                degenerate_updates += usize::from(trace.degenerate);
                if let Some((_, false)) = trace.gem {
                    gem_unconverged += 1;
                }
                timing.solver_total_s += trace.solver_time.as_secs_f64();
                timing.iterations += 1;
                log.push(IterRecord {
                    step: t + 1,
                    epoch: epoch + 1,
                    iter,
                    loss_new: trace.loss_new,
                    loss_old_mean: (!trace.loss_old.is_empty())
                        .then(|| trace.loss_old.iter().sum::<f64>() / trace.loss_old.len() as f64),
                    branch: branch_label(&trace),
                    degenerate: trace.degenerate,
                    feasibility: trace.feasibility,
                });
                iter += 1;
            }
        }

        let mem = update_memory(
            t,
            &task.train,
            cfg.memory_size,
            cfg.memory_policy,
            cfg.seed.wrapping_add(SEED_RESERVOIR).wrapping_add(t as u64),
        )?;
        coreset.push(mem)?;

        for (i, seen) in stream.tasks.iter().enumerate().take(t + 1) {
            let acc = model.evaluate(&seen.test, masks[i].as_deref())?;
            matrix.set(t, i, acc)?;
        }
    }

    timing.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        matrix,
        log,
        timing,
        feasibility: worst,
        degenerate_updates,
        gem_unconverged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: MethodVariant,
    pub acc: f64,
    pub bwt: Option<f64>,
    pub timing: RunTiming,
}

/// Runs every variant on the same stream with the same seed.
pub fn run_ablation(
    stream: &TaskStream,
    base: &TrainConfig,
    variants: &[MethodVariant],
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|v| {
            let cfg = TrainConfig {
                variant: *v,
                ..base.clone()
            };
            let out = train_sequence(stream, &cfg)?;
            Ok(AblationRow {
                variant: *v,
                acc: out.matrix.acc()?,
                bwt: out.matrix.bwt()?,
                timing: out.timing,
            })
        })
        .collect()
}
