//! Deterministic actor–learner pipeline with bounded rollout staleness.
//!
//! The learner at step `t` holds θ_t (version `t`). Rollouts come from the
//! snapshot `behavior_version_for(t)`, the gradient is taken at θ_t against
//! those rollouts, and the optional alignment controller decides whether
//! and how the gradient is applied. Every random draw for step `t` comes
//! from a stream keyed by `(seed, t)`, so a run is a pure function of its
//! inputs.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{sample_batch, ContextualBanditSpec, RolloutBatch, DEFAULT_PROMPTS_PER_BATCH};
use crate::error::{Error, Result};
use crate::gac::{cosine, ControlAction, GacConfig, GacController, Regime};
use crate::gradvec::{GradientVector, ShardLayout};
use crate::grpo::{apply_update, surrogate_gradient, GrpoConfig, PolicySnapshot};
use crate::stats;

/// Steps excluded from alignment summaries.
pub const SUMMARY_WARMUP_STEPS: u64 = 50;
pub const DEFAULT_COLLAPSE_WINDOW: usize = 25;
pub const DEFAULT_COLLAPSE_DROP: f64 = 0.5;
/// Window for the reported final return.
pub const FINAL_RETURN_WINDOW: usize = 50;
/// `|c_t|` at or below this counts as on-policy-like alignment.
pub const LOW_COSINE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagMode {
    /// Lag is exactly `staleness` once past warmup.
    #[default]
    Fixed,
    /// Lag drawn uniformly from `0..=staleness` each step.
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StalenessSchedule {
    pub staleness: u64,
    pub warmup_clamp: bool,
    pub lag_mode: LagMode,
}

impl Default for StalenessSchedule {
    fn default() -> Self {
        Self::fixed(0)
    }
}

impl StalenessSchedule {
    pub fn fixed(staleness: u64) -> Self {
        Self {
            staleness,
            warmup_clamp: true,
            lag_mode: LagMode::Fixed,
        }
    }
}

/// Behavior snapshot version under the fixed-lag schedule.
pub fn behavior_version_for(t: u64, schedule: &StalenessSchedule) -> Result<u64> {
    lagged_version(t, schedule.staleness, schedule.warmup_clamp)
}

fn lagged_version(t: u64, lag: u64, clamp: bool) -> Result<u64> {
    match t.checked_sub(lag) {
        Some(v) => Ok(v),
        None if clamp => Ok(0),
        None => Err(Error::StalenessUnderflow { step: t, staleness: lag }),
    }
}

/// Ring of the most recent policy snapshots, contiguous in version.
#[derive(Debug, Clone)]
pub struct SnapshotStore {
    snapshots: VecDeque<PolicySnapshot>,
    capacity: usize,
}

impl SnapshotStore {
    /// Store able to serve every version within `staleness` of the newest.
    pub fn for_staleness(staleness: u64) -> Self {
        Self::with_capacity(staleness as usize + 1)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            snapshots: VecDeque::with_capacity(capacity.max(1)),
            capacity: capacity.max(1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn oldest_version(&self) -> Option<u64> {
        self.snapshots.front().map(|s| s.version)
    }

    pub fn newest_version(&self) -> Option<u64> {
        self.snapshots.back().map(|s| s.version)
    }

    /// Appends the next version, evicting the oldest beyond capacity.
    pub fn push(&mut self, snapshot: PolicySnapshot) -> Result<()> {
        if let Some(newest) = self.newest_version() {
            if snapshot.version != newest + 1 {
                return Err(Error::Validation(format!(
                    "snapshot version {} does not follow {newest}",
                    snapshot.version
                )));
            }
        }
        self.snapshots.push_back(snapshot);
        while self.snapshots.len() > self.capacity {
            self.snapshots.pop_front();
        }
        Ok(())
    }

    pub fn get(&self, version: u64) -> Result<&PolicySnapshot> {
        let (Some(oldest), Some(newest)) = (self.oldest_version(), self.newest_version()) else {
            return Err(Error::SnapshotMiss {
                version,
                oldest: 0,
                newest: 0,
            });
        };
        if version < oldest || version > newest {
            return Err(Error::SnapshotMiss { version, oldest, newest });
        }
        Ok(&self.snapshots[(version - oldest) as usize])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd
    }
}

/// Optimizer state for the learner; plain ascent unless AdamW is selected.
#[derive(Debug, Clone)]
struct Optimizer {
    kind: OptimizerKind,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, dim: usize) -> Self {
        let dim = if matches!(kind, OptimizerKind::Sgd) { 0 } else { dim };
        Self {
            kind,
            first: vec![0.0; dim],
            second: vec![0.0; dim],
            steps: 0,
        }
    }

    fn apply(&mut self, theta: &PolicySnapshot, grad: &GradientVector, lr: f64) -> Result<PolicySnapshot> {
        match self.kind {
            OptimizerKind::Sgd => apply_update(theta, grad, lr),
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                self.steps += 1;
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                let mut direction = Vec::with_capacity(grad.dim());
                for (i, (&g, &p)) in grad.as_slice().iter().zip(theta.theta()).enumerate() {
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let m = self.first[i] / c1;
                    let v = self.second[i] / c2;
                    direction.push(m / (v.sqrt() + eps) - weight_decay * p);
                }
                let direction = GradientVector::new(direction).map_err(|_| Error::Divergence {
                    version: theta.version + 1,
                })?;
                apply_update(theta, &direction, lr)
            }
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSetup {
    pub env: ContextualBanditSpec,
    pub prompts_per_batch: usize,
    pub grpo: GrpoConfig,
    pub schedule: StalenessSchedule,
    pub controller: Option<GacConfig>,
    pub steps: u64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Simulated data-parallel ranks for the cosine reduction.
    pub shard_count: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainingSetup {
    fn default() -> Self {
        Self {
            env: ContextualBanditSpec::default(),
            prompts_per_batch: DEFAULT_PROMPTS_PER_BATCH,
            grpo: GrpoConfig::default(),
            schedule: StalenessSchedule::default(),
            controller: None,
            steps: 500,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            shard_count: 4,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

pub const DEFAULT_LEARNING_RATE: f64 = 16.0;

/// Per-step trace of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub behavior_version: u64,
    /// Mean verifier reward of the consumed batch.
    pub mean_return: f64,
    /// Exact expected reward of the learner policy θ_t.
    pub policy_return: f64,
    /// Cosine between this raw gradient and the previous one.
    pub cosine: Option<f64>,
    /// Controller regime; `None` when no controller is attached.
    pub regime: Option<Regime>,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub skipped: bool,
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub q90_abs_cosine: f64,
    pub max_abs_cosine: f64,
    pub frac_low_cosine: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<StepRecord>,
}

impl RunMetrics {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_return).collect()
    }

    /// `|c_t|` for every step after `cutoff` with a defined cosine.
    pub fn abs_cosines_after(&self, cutoff: u64) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.step > cutoff)
            .filter_map(|r| r.cosine.map(f64::abs))
            .collect()
    }

    pub fn alignment_stats(&self, cutoff: u64) -> Option<AlignmentStats> {
        alignment_stats(&self.abs_cosines_after(cutoff))
    }

    /// Mean batch return over the last `window` steps.
    pub fn final_return(&self, window: usize) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(window)..];
        stats::mean(&tail.iter().map(|r| r.mean_return).collect::<Vec<_>>()).unwrap_or(0.0)
    }

    /// Mean exact policy return over the last `window` steps.
    pub fn final_policy_return(&self, window: usize) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(window)..];
        stats::mean(&tail.iter().map(|r| r.policy_return).collect::<Vec<_>>()).unwrap_or(0.0)
    }

    pub fn regime_count(&self, regime: Option<Regime>) -> usize {
        self.records.iter().filter(|r| r.regime == regime).count()
    }

    pub fn skipped_steps(&self) -> usize {
        self.records.iter().filter(|r| r.skipped).count()
    }

    pub fn divergence_events(&self) -> usize {
        self.records.iter().filter(|r| r.diverged).count()
    }
}

/// q0.9, max, and the share at or below [`LOW_COSINE`] of `|c_t|` values.
pub fn alignment_stats(abs_cosines: &[f64]) -> Option<AlignmentStats> {
    let q90 = stats::quantile(abs_cosines, 0.9)?;
    let max = abs_cosines.iter().copied().fold(0.0, f64::max);
    let low = abs_cosines.iter().filter(|&&c| c <= LOW_COSINE).count();
    Some(AlignmentStats {
        q90_abs_cosine: q90,
        max_abs_cosine: max,
        frac_low_cosine: low as f64 / abs_cosines.len() as f64,
        count: abs_cosines.len(),
    })
}

/// True when some trailing-window mean return drops below
/// `drop_fraction × best earlier window` and never climbs back above that
/// level for the rest of the run.
pub fn detect_collapse(metrics: &RunMetrics, window: usize, drop_fraction: f64) -> bool {
    detect_collapse_in(&metrics.returns(), window, drop_fraction)
}

pub fn detect_collapse_in(returns: &[f64], window: usize, drop_fraction: f64) -> bool {
    if window == 0 || returns.len() < window {
        return false;
    }
    let windowed: Vec<f64> = returns
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    let mut suffix_max = windowed.clone();
    for i in (0..suffix_max.len().saturating_sub(1)).rev() {
        suffix_max[i] = suffix_max[i].max(suffix_max[i + 1]);
    }
    let mut best = f64::NEG_INFINITY;
    for i in 0..windowed.len() {
        if best > 0.0 && suffix_max[i] < drop_fraction * best {
            return true;
        }
        best = best.max(windowed[i]);
    }
    false
}

fn step_rng(seed: u64, step: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(step);
    rng
}

const SAMPLING_SALT: u64 = 0;

/// Generator behind the rollout draws of step `step`.
pub fn sampling_rng(seed: u64, step: u64) -> ChaCha8Rng {
    step_rng(seed, step, SAMPLING_SALT)
}

const LAG_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Runs the learner loop, with or without alignment control.
pub fn run_training(setup: &TrainingSetup) -> Result<RunMetrics> {
    run_training_observed(setup, |_| {})
}

/// [`run_training`], handing each new learner snapshot (versions `1..=steps`)
/// to `observe` as soon as it is produced.
pub fn run_training_observed<F>(setup: &TrainingSetup, mut observe: F) -> Result<RunMetrics>
where
    F: FnMut(&PolicySnapshot),
{
    if setup.steps == 0 {
        return Err(Error::Validation("steps must be at least 1".into()));
    }
    setup.env.validate()?;
    setup.grpo.validate()?;
    let mut theta = PolicySnapshot::uniform(setup.env.context_count, setup.env.action_count)?;
    let dim = theta.dim();
    let layout = ShardLayout::even(dim, setup.shard_count.clamp(1, dim))?;
    let mut controller = setup.controller.map(|cfg| GacController::new(cfg, layout.clone()));
    // Diagnostic-only reference for runs without a controller.
    let mut diagnostic_prev: Option<GradientVector> = None;
    let mut store = SnapshotStore::for_staleness(setup.schedule.staleness);
    store.push(theta.clone())?;
    let mut optimizer = Optimizer::new(setup.optimizer, dim);
    let mut metrics = RunMetrics::default();

    for t in 0..setup.steps {
        let lag = match setup.schedule.lag_mode {
            LagMode::Fixed => setup.schedule.staleness,
            LagMode::UniformRandom => {
                step_rng(setup.seed, t, LAG_SALT).gen_range(0..=setup.schedule.staleness)
            }
        };
        let behavior = store.get(lagged_version(t, lag, setup.schedule.warmup_clamp)?)?;
        let mut rng = sampling_rng(setup.seed, t);
        let batch: RolloutBatch = sample_batch(
            &setup.env,
            behavior,
            setup.prompts_per_batch,
            setup.grpo.group_size,
            &mut rng,
        )?;
        let (grad, report) = surrogate_gradient(&theta, &batch, behavior, &setup.grpo)?;
        let grad_norm = grad.norm();
        let policy_return = setup.env.expected_return(&theta)?;

        let (action, cosine_value, regime) = match controller.as_mut() {
            Some(ctrl) => {
                let action = ctrl.step(grad)?;
                let state = ctrl.state();
                debug_assert!(state.persistent_snapshots() <= 1);
                (action, state.last_cosine, state.last_regime)
            }
            None => {
                let c = match &diagnostic_prev {
                    Some(prev) => Some(cosine(&grad, prev, &layout, GacConfig::default().cosine_epsilon)?),
                    None => None,
                };
                diagnostic_prev = Some(grad.clone());
                (ControlAction::Apply(grad), c, None)
            }
        };

        let mut skipped = false;
        let mut diverged = false;
        let next = match action {
            ControlAction::Apply(update) => match optimizer.apply(&theta, &update, setup.learning_rate) {
                Ok(next) => next,
                Err(Error::Divergence { .. }) => {
                    diverged = true;
                    skipped = true;
                    PolicySnapshot::new(theta.contexts(), theta.actions(), theta.theta().to_vec(), t + 1)?
                }
                Err(e) => return Err(e),
            },
            ControlAction::Skip => {
                skipped = true;
                PolicySnapshot::new(theta.contexts(), theta.actions(), theta.theta().to_vec(), t + 1)?
            }
        };

        metrics.records.push(StepRecord {
            step: t,
            behavior_version: batch.behavior_version,
            mean_return: batch.mean_return(),
            policy_return,
            cosine: cosine_value,
            regime,
            clip_fraction: report.clip_fraction,
            grad_norm,
            skipped,
            diverged,
        });
        observe(&next);
        store.push(next.clone())?;
        theta = next;
    }
    Ok(metrics)
}
