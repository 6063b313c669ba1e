//! GRPO surrogate and its analytic gradient for tabular softmax policies.
//!
//! The surrogate maximized here is
//!
//! ```text
//! J(θ) = 1/N Σ_i 1/G Σ_g min(r·A, clip(r, 1-ε, 1+ε)·A)
//!      + c_H · 1/N Σ_i H(π_θ(·|c_i))
//!      - c_KL · 1/N Σ_i 1/G Σ_g (r - 1 - ln r)
//! ```
//!
//! with `r = π_θ(a|c) / π_b(a|c)` and group-normalized advantages `A`.

use serde::{Deserialize, Serialize};

use crate::envs::RolloutBatch;
use crate::error::{Error, Result};
use crate::gradvec::GradientVector;

/// Tabular softmax logits, one row per context, stamped with the learner
/// step that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    theta: Vec<f64>,
    contexts: usize,
    actions: usize,
    pub version: u64,
}

impl PolicySnapshot {
    pub fn new(contexts: usize, actions: usize, theta: Vec<f64>, version: u64) -> Result<Self> {
        if contexts == 0 || actions == 0 {
            return Err(Error::ShapeMismatch(
                "policy needs at least one context and one action".into(),
            ));
        }
        if theta.len() != contexts * actions {
            return Err(Error::ShapeMismatch(format!(
                "{} logits for a {contexts}x{actions} table",
                theta.len()
            )));
        }
        if let Some(index) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            theta,
            contexts,
            actions,
            version,
        })
    }

    /// Uniform policy (all logits zero) at version 0.
    pub fn uniform(contexts: usize, actions: usize) -> Result<Self> {
        Self::new(contexts, actions, vec![0.0; contexts * actions], 0)
    }

    pub fn contexts(&self) -> usize {
        self.contexts
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn row(&self, context: usize) -> &[f64] {
        &self.theta[context * self.actions..(context + 1) * self.actions]
    }

    /// Same parameters under a different version stamp.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.contexts, self.actions, theta, self.version)
    }

    fn check_context(&self, context: usize) -> Result<()> {
        if context >= self.contexts {
            return Err(Error::OutOfRange {
                what: "context",
                index: context,
                limit: self.contexts,
            });
        }
        Ok(())
    }

    pub fn log_probs(&self, context: usize) -> Result<Vec<f64>> {
        self.check_context(context)?;
        Ok(log_softmax(self.row(context)))
    }

    pub fn probs(&self, context: usize) -> Result<Vec<f64>> {
        Ok(self.log_probs(context)?.into_iter().map(f64::exp).collect())
    }

    pub fn log_prob(&self, context: usize, action: usize) -> Result<f64> {
        if action >= self.actions {
            return Err(Error::OutOfRange {
                what: "action",
                index: action,
                limit: self.actions,
            });
        }
        Ok(self.log_probs(context)?[action])
    }
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &z in logits {
        sum += (z - max).exp();
    }
    let lse = max + sum.ln();
    logits.iter().map(|z| z - lse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub clip_epsilon: f64,
    pub adv_epsilon: f64,
    pub entropy_coef: f64,
    pub kl_coef: f64,
    pub group_size: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            adv_epsilon: 1e-8,
            entropy_coef: 0.0,
            kl_coef: 0.0,
            group_size: 8,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Validation("grpo.clip_epsilon must lie in (0, 1)".into()));
        }
        if !(self.adv_epsilon > 0.0 && self.adv_epsilon.is_finite()) {
            return Err(Error::Validation("grpo.adv_epsilon must be positive".into()));
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return Err(Error::Validation("grpo.entropy_coef must be nonnegative".into()));
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return Err(Error::Validation("grpo.kl_coef must be nonnegative".into()));
        }
        if self.group_size == 0 {
            return Err(Error::Validation("grpo.group_size must be positive".into()));
        }
        Ok(())
    }
}

/// Which side of the clipped minimum produced the term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Unclipped,
    Clipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub loss_value: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

/// `(R - mean) / (std + adv_epsilon)` with the population standard deviation.
pub fn group_advantage(returns: &[f64], adv_epsilon: f64) -> Result<Vec<f64>> {
    if returns.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + adv_epsilon;
    Ok(returns.iter().map(|r| (r - mean) / denom).collect())
}

/// `π_θ(a|c) / π_b(a|c)` from the current logits and a recorded behavior
/// log-probability.
pub fn importance_ratio(
    theta: &PolicySnapshot,
    context: usize,
    action: usize,
    behavior_logprob: f64,
) -> Result<f64> {
    let ratio = (theta.log_prob(context, action)? - behavior_logprob).exp();
    if !ratio.is_finite() || ratio <= 0.0 {
        return Err(Error::RatioOverflow { context, action });
    }
    Ok(ratio)
}

/// `min(r·A, clip(r, 1-ε, 1+ε)·A)`; ties resolve to the unclipped branch.
pub fn clipped_term(ratio: f64, advantage: f64, clip_epsilon: f64) -> (f64, Branch) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantage;
    if clipped < unclipped {
        (clipped, Branch::Clipped)
    } else {
        (unclipped, Branch::Unclipped)
    }
}

fn entropy(log_probs: &[f64]) -> f64 {
    -log_probs.iter().map(|lp| lp.exp() * lp).sum::<f64>()
}

fn check_shapes(theta: &PolicySnapshot, batch: &RolloutBatch, config: &GrpoConfig) -> Result<()> {
    if batch.group_size != config.group_size {
        return Err(Error::ShapeMismatch(format!(
            "batch group size {} but config expects {}",
            batch.group_size, config.group_size
        )));
    }
    batch.check_shape(theta.contexts(), theta.actions())
}

struct Term {
    context: usize,
    action: usize,
    ratio: f64,
    advantage: f64,
}

fn batch_terms(theta: &PolicySnapshot, batch: &RolloutBatch, config: &GrpoConfig) -> Result<Vec<Term>> {
    let mut terms = Vec::with_capacity(batch.contexts.len() * batch.group_size);
    for (i, &context) in batch.contexts.iter().enumerate() {
        let advantages = group_advantage(&batch.returns[i], config.adv_epsilon)?;
        for g in 0..batch.group_size {
            let action = batch.actions[i][g];
            terms.push(Term {
                context,
                action,
                ratio: importance_ratio(theta, context, action, batch.behavior_logprobs[i][g])?,
                advantage: advantages[g],
            });
        }
    }
    Ok(terms)
}

/// Value of the empirical surrogate at `theta`.
pub fn surrogate_value(theta: &PolicySnapshot, batch: &RolloutBatch, config: &GrpoConfig) -> Result<f64> {
    check_shapes(theta, batch, config)?;
    let n = batch.contexts.len() as f64;
    let per_term = 1.0 / (n * batch.group_size as f64);
    let mut value = 0.0;
    for term in batch_terms(theta, batch, config)? {
        value += per_term * clipped_term(term.ratio, term.advantage, config.clip_epsilon).0;
        if config.kl_coef > 0.0 {
            value -= per_term * config.kl_coef * (term.ratio - 1.0 - term.ratio.ln());
        }
    }
    if config.entropy_coef > 0.0 {
        for &context in &batch.contexts {
            value += config.entropy_coef / n * entropy(&theta.log_probs(context)?);
        }
    }
    Ok(value)
}

/// Analytic gradient of [`surrogate_value`] with respect to the logits.
///
/// Clipped terms contribute nothing; unclipped terms contribute
/// `A·r·(onehot(a) - π(·|c))` on their context row.
pub fn surrogate_gradient(
    theta: &PolicySnapshot,
    batch: &RolloutBatch,
    behavior: &PolicySnapshot,
    config: &GrpoConfig,
) -> Result<(GradientVector, SurrogateReport)> {
    check_shapes(theta, batch, config)?;
    if batch.behavior_version != behavior.version {
        return Err(Error::ShapeMismatch(format!(
            "batch was sampled at version {} but behavior snapshot is version {}",
            batch.behavior_version, behavior.version
        )));
    }
    let actions = theta.actions();
    let n = batch.contexts.len() as f64;
    let per_term = 1.0 / (n * batch.group_size as f64);

    let mut grad = vec![0.0; theta.dim()];
    let mut value = 0.0;
    let mut clipped = 0usize;
    let mut ratio_sum = 0.0;
    let terms = batch_terms(theta, batch, config)?;
    let total = terms.len();

    for term in &terms {
        let (v, branch) = clipped_term(term.ratio, term.advantage, config.clip_epsilon);
        value += per_term * v;
        ratio_sum += term.ratio;
        let mut coeff = 0.0;
        match branch {
            Branch::Unclipped => coeff += per_term * term.advantage * term.ratio,
            Branch::Clipped => clipped += 1,
        }
        if config.kl_coef > 0.0 {
            value -= per_term * config.kl_coef * (term.ratio - 1.0 - term.ratio.ln());
            coeff -= per_term * config.kl_coef * (term.ratio - 1.0);
        }
        if coeff != 0.0 {
            let probs = theta.probs(term.context)?;
            let row = &mut grad[term.context * actions..(term.context + 1) * actions];
            for (j, (slot, p)) in row.iter_mut().zip(&probs).enumerate() {
                let indicator = if j == term.action { 1.0 } else { 0.0 };
                *slot += coeff * (indicator - p);
            }
        }
    }

    if config.entropy_coef > 0.0 {
        for &context in &batch.contexts {
            let log_probs = theta.log_probs(context)?;
            let h = entropy(&log_probs);
            value += config.entropy_coef / n * h;
            let row = &mut grad[context * actions..(context + 1) * actions];
            for (slot, lp) in row.iter_mut().zip(&log_probs) {
                *slot -= config.entropy_coef / n * lp.exp() * (lp + h);
            }
        }
    }

    let report = SurrogateReport {
        loss_value: value,
        clip_fraction: if total == 0 { 0.0 } else { clipped as f64 / total as f64 },
        mean_ratio: if total == 0 { 1.0 } else { ratio_sum / total as f64 },
    };
    Ok((GradientVector::new(grad)?, report))
}

/// Gradient ascent step `θ + η·g`, bumping the version.
pub fn apply_update(theta: &PolicySnapshot, grad: &GradientVector, learning_rate: f64) -> Result<PolicySnapshot> {
    if grad.dim() != theta.dim() {
        return Err(Error::DimensionMismatch {
            left: theta.dim(),
            right: grad.dim(),
        });
    }
    let next: Vec<f64> = theta
        .theta()
        .iter()
        .zip(grad.as_slice())
        .map(|(t, g)| t + learning_rate * g)
        .collect();
    let version = theta.version + 1;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { version });
    }
    PolicySnapshot::new(theta.contexts(), theta.actions(), next, version)
}
