//! Run orchestration: multi-iteration adaptive pruning, its uniform
//! baseline, and interleaved prune/train.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    allocate_phases, sample_calibration, shuffle_blocks, CalibrationSet, Corpus, DEFAULT_CALIBRATION_MAX_LEN,
    DEFAULT_CALIBRATION_SEQUENCES,
};
use crate::depgraph::{group_size, prune_in_place, GroupKind, removal_targets, select_groups, LayerWidths, PrunePlan, RemovalTarget};
use crate::error::{config_err, Result};
use crate::eval::perplexity;
use crate::importance::{group_importance, importance_profile, ImportanceProfile, SimilarityFn};
use crate::model::{Model, ModelConfig};
use crate::real::Real;
use crate::scheduler::{assign_sparsity, iteration_target, keep_ratio, size_ladder, AccelSchedule, LrConfig, LrSchedule, SparsityPlan};
use crate::train::{phase_steps, train_phase, AdamW, PhaseReport, TrainConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSpec {
    pub sequences: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            sequences: DEFAULT_CALIBRATION_SEQUENCES,
            max_len: DEFAULT_CALIBRATION_MAX_LEN,
            seed: 0,
        }
    }
}

impl CalibrationSpec {
    pub fn sample(&self, corpus: &Corpus) -> Result<CalibrationSet> {
        sample_calibration(corpus, self.sequences, self.max_len, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRunConfig {
    /// Final fraction of prunable parameters removed.
    pub sparsity: f64,
    pub iterations: usize,
    pub amplitude: f64,
    pub sim_fn: SimilarityFn,
    pub calibration: CalibrationSpec,
    pub seed: u64,
}

impl PruneRunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sparsity > 0.0 && self.sparsity < 1.0) {
            return config_err("sparsity", format!("{} is outside (0, 1)", self.sparsity));
        }
        if self.iterations == 0 {
            return config_err("iterations", "must be at least 1");
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return config_err("amplitude", format!("{} must be a finite non-negative number", self.amplitude));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccelRunConfig {
    pub target_params: usize,
    pub interleaves: usize,
    pub amplitude: f64,
    pub sim_fn: SimilarityFn,
    pub calibration: CalibrationSpec,
    pub train: TrainConfig,
    pub lr: LrConfig,
    /// Block size of the seeded shuffle applied before splitting the stream.
    pub shuffle_block: usize,
    pub seed: u64,
}

impl AccelRunConfig {
    pub fn validate(&self, source_params: usize) -> Result<()> {
        if self.interleaves == 0 {
            return config_err("interleaves", "must be at least 1");
        }
        if self.target_params == 0 || self.target_params >= source_params {
            return config_err(
                "target_params",
                format!("{} must be below the source size {source_params}", self.target_params),
            );
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return config_err("amplitude", format!("{} must be a finite non-negative number", self.amplitude));
        }
        self.train.validate()
    }
}

/// Append-only log entry of one prune (and, for interleaved runs, train) step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cumulative sparsity targeted after this step, relative to the run's source widths.
    pub target_sparsity: f64,
    pub importance: ImportanceProfile,
    pub sparsity: SparsityPlan,
    pub removals: Vec<RemovalTarget>,
    pub plan: PrunePlan,
    pub prunable_target: usize,
    pub prunable_params: usize,
    pub total_params: usize,
    pub layer_params: Vec<usize>,
    pub heads: Vec<usize>,
    pub channels: Vec<usize>,
    pub train: Option<PhaseReport>,
    pub perplexity: Option<f64>,
    pub wall_clock_ms: u128,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub records: Vec<IterationRecord>,
}

impl RunReport {
    pub fn push(&mut self, record: IterationRecord) {
        self.records.push(record);
    }
}

/// Parameters held by heads and MLP channels (everything pruning can touch).
pub fn prunable_params(config: &ModelConfig) -> usize {
    LayerWidths::of(config).total_prunable(config.hidden, config.head_dim)
}

/// Sizes that no prune step can change.
pub fn fixed_params<T: Real>(model: &Model<T>) -> usize {
    model.param_count().total - prunable_params(&model.config)
}

/// Result of measuring and planning one prune step.
struct StepPlan {
    importance: ImportanceProfile,
    sparsity: SparsityPlan,
    removals: Vec<RemovalTarget>,
    plan: PrunePlan,
}

/// Recomputes layer importance and group scores on the current model and
/// plans removals toward `global_remaining` prunable parameters.
fn plan_step<T: Real>(
    model: &Model<T>,
    calibration: &CalibrationSet,
    reference: &LayerWidths,
    cumulative: f64,
    amplitude: f64,
    sim_fn: SimilarityFn,
    global_remaining: usize,
    last: bool,
) -> Result<StepPlan> {
    let importance = importance_profile(model, calibration, sim_fn)?;
    let sparsity = assign_sparsity(&importance.normalized, cumulative, amplitude)?;
    let removals = removal_targets(&model.config, reference, &sparsity.per_layer, global_remaining, last)?;
    let plan = if removals.iter().all(|r| r.heads == 0 && r.channels == 0) {
        PrunePlan::default()
    } else {
        select_groups(&group_importance(model, calibration)?, &removals)?
    };
    Ok(StepPlan {
        importance,
        sparsity,
        removals,
        plan,
    })
}

fn record<T: Real>(
    model: &Model<T>,
    iteration: usize,
    target_sparsity: f64,
    prunable_target: usize,
    step: StepPlan,
    started: Instant,
) -> IterationRecord {
    let pc = model.param_count();
    IterationRecord {
        iteration,
        target_sparsity,
        importance: step.importance,
        sparsity: step.sparsity,
        removals: step.removals,
        plan: step.plan,
        prunable_target,
        prunable_params: prunable_params(&model.config),
        total_params: pc.total,
        layer_params: pc.per_layer,
        heads: model.config.head_count.clone(),
        channels: model.config.mlp_channels.clone(),
        train: None,
        perplexity: None,
        wall_clock_ms: started.elapsed().as_millis(),
    }
}

/// Multi-iteration adaptive pruning on an explicit calibration set.
pub fn adapt_prune_with<T: Real>(
    model: &Model<T>,
    calibration: &CalibrationSet,
    cfg: &PruneRunConfig,
) -> Result<(Model<T>, RunReport)> {
    cfg.validate()?;
    let mut model = model.clone();
    let reference = LayerWidths::of(&model.config);
    let total_prunable = reference.total_prunable(model.config.hidden, model.config.head_dim);
    let mut report = RunReport::default();
    for i in 1..=cfg.iterations {
        let started = Instant::now();
        let s_cur = iteration_target(cfg.sparsity, i, cfg.iterations)?;
        let goal = ((1.0 - s_cur) * total_prunable as f64).round() as usize;
        let step = plan_step(&model, calibration, &reference, s_cur, cfg.amplitude, cfg.sim_fn, goal, i == cfg.iterations)?;
        prune_in_place(&mut model, &step.plan)?;
        report.push(record(&model, i, s_cur, goal, step, started));
    }
    Ok((model, report))
}

/// Multi-iteration adaptive pruning; calibration is sampled from `corpus`.
pub fn adapt_prune<T: Real>(model: &Model<T>, corpus: &Corpus, cfg: &PruneRunConfig) -> Result<(Model<T>, RunReport)> {
    let calibration = cfg.calibration.sample(corpus)?;
    adapt_prune_with(model, &calibration, cfg)
}

/// The same procedure with every layer pruned at the common rate.
pub fn uniform_prune<T: Real>(model: &Model<T>, corpus: &Corpus, cfg: &PruneRunConfig) -> Result<(Model<T>, RunReport)> {
    adapt_prune(model, corpus, &PruneRunConfig { amplitude: 0.0, ..cfg.clone() })
}

/// Size ladder, token split and learning-rate curve of an interleaved run.
pub fn accel_schedule(
    source_params: usize,
    cfg: &AccelRunConfig,
    total_tokens: usize,
) -> Result<AccelSchedule> {
    let tokens = allocate_phases(total_tokens, cfg.interleaves)?;
    let steps: Vec<usize> = tokens
        .counts
        .iter()
        .map(|&n| phase_steps(n, cfg.train.batch_size, cfg.train.seq_len))
        .collect();
    let lr = LrSchedule::new(steps.iter().sum(), &cfg.lr)?;
    Ok(AccelSchedule {
        interleaves: cfg.interleaves,
        keep_ratio: keep_ratio(source_params as f64, cfg.target_params as f64, cfg.interleaves)?,
        size_targets: size_ladder(source_params, cfg.target_params, cfg.interleaves)?,
        tokens,
        phase_steps: steps,
        lr,
    })
}

/// Output of an interleaved run.
#[derive(Clone, Debug)]
pub struct AccelOutcome<T: Real> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub schedule: AccelSchedule,
    pub report: RunReport,
}

/// Interleaved pruning and recovery training. Each interleave takes one
/// adaptive prune step to the next rung of the size ladder, then trains on
/// its share of `train_tokens` with its slice of the global lr curve.
/// `eval_tokens`, when given, is scored after every interleave.
pub fn adapt_accel<T: Real>(
    model: &Model<T>,
    train_tokens: &[u32],
    calibration: &CalibrationSet,
    cfg: &AccelRunConfig,
    eval_tokens: Option<(&[u32], usize)>,
) -> Result<AccelOutcome<T>> {
    let source = model.param_count().total;
    cfg.validate(source)?;
    let fixed = fixed_params(model);
    let (h, hd) = (model.config.hidden, model.config.head_dim);
    let floor = fixed
        + model.config.n_layers() * (group_size(GroupKind::AttentionHead, h, hd) + group_size(GroupKind::MlpChannel, h, hd));
    if cfg.target_params < floor {
        return config_err(
            "target_params",
            format!("{} is below the smallest reachable size {floor} (one head and one channel per layer)", cfg.target_params),
        );
    }
    let stream = shuffle_blocks(train_tokens, cfg.shuffle_block, cfg.seed);
    let schedule = accel_schedule(source, cfg, stream.len())?;
    let phases = schedule.tokens.partition(&stream)?;
    let reference = LayerWidths::of(&model.config);
    let total_prunable = reference.total_prunable(h, hd);

    let mut model = model.clone();
    let mut opt = AdamW::new(&model, cfg.train.optimizer.clone());
    let mut report = RunReport::default();
    for (i, phase) in phases.iter().enumerate() {
        let started = Instant::now();
        let goal = schedule.size_targets[i] - fixed;
        let s_cur = 1.0 - goal as f64 / total_prunable as f64;
        let last = i + 1 == phases.len();
        let step = plan_step(&model, calibration, &reference, s_cur, cfg.amplitude, cfg.sim_fn, goal, last)?;
        prune_in_place(&mut model, &step.plan)?;
        opt.prune(&step.plan)?;
        let phase_report = train_phase(&mut model, &mut opt, phase, &schedule.lr_slice(i), &cfg.train)?;
        let mut rec = record(&model, i + 1, s_cur, goal, step, started);
        rec.train = Some(phase_report);
        if let Some((tokens, max_len)) = eval_tokens {
            rec.perplexity = Some(perplexity(&model, tokens, max_len)?);
        }
        rec.wall_clock_ms = started.elapsed().as_millis();
        report.push(rec);
    }
    Ok(AccelOutcome {
        model,
        optimizer: opt,
        schedule,
        report,
    })
}
