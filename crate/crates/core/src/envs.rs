//! Contextual bandit with a binary verifier reward, and the
//! group-structured rollout batches it produces.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::PolicySnapshot;

/// `|C|` contexts, `K` actions, exactly one rewarded action per context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextualBanditSpec {
    pub context_count: usize,
    pub action_count: usize,
    pub correct_action: Vec<usize>,
    pub context_distribution: Vec<f64>,
}

impl ContextualBanditSpec {
    pub fn new(
        context_count: usize,
        action_count: usize,
        correct_action: Vec<usize>,
        context_distribution: Vec<f64>,
    ) -> Result<Self> {
        let spec = Self {
            context_count,
            action_count,
            correct_action,
            context_distribution,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Uniform contexts with a fixed scrambled answer key.
    pub fn uniform(context_count: usize, action_count: usize) -> Result<Self> {
        Self::new(
            context_count,
            action_count,
            default_answer_key(context_count, action_count),
            vec![1.0 / context_count.max(1) as f64; context_count],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_count == 0 || self.action_count == 0 {
            return Err(Error::Validation(
                "env.context_count and env.action_count must be positive".into(),
            ));
        }
        if self.correct_action.len() != self.context_count {
            return Err(Error::Validation(format!(
                "env.correct_action has {} entries for {} contexts",
                self.correct_action.len(),
                self.context_count
            )));
        }
        if let Some(&a) = self.correct_action.iter().find(|&&a| a >= self.action_count) {
            return Err(Error::Validation(format!(
                "env.correct_action entry {a} is not below action_count {}",
                self.action_count
            )));
        }
        if self.context_distribution.len() != self.context_count {
            return Err(Error::Validation(format!(
                "env.context_distribution has {} entries for {} contexts",
                self.context_distribution.len(),
                self.context_count
            )));
        }
        if self.context_distribution.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::Validation(
                "env.context_distribution entries must be nonnegative".into(),
            ));
        }
        let total: f64 = self.context_distribution.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "env.context_distribution sums to {total}, expected 1"
            )));
        }
        Ok(())
    }

    /// Expected verifier reward of `policy` under the context distribution.
    pub fn expected_return(&self, policy: &PolicySnapshot) -> Result<f64> {
        check_policy_shape(self, policy)?;
        let mut total = 0.0;
        for (c, &weight) in self.context_distribution.iter().enumerate() {
            total += weight * policy.log_prob(c, self.correct_action[c])?.exp();
        }
        Ok(total)
    }
}

impl Default for ContextualBanditSpec {
    fn default() -> Self {
        Self::uniform(DEFAULT_CONTEXTS, DEFAULT_ACTIONS).expect("default sizes are valid")
    }
}

pub const DEFAULT_CONTEXTS: usize = 64;
pub const DEFAULT_ACTIONS: usize = 8;
pub const DEFAULT_PROMPTS_PER_BATCH: usize = 32;

/// Answer key `c ↦ (5c + 3) mod K`.
pub fn default_answer_key(context_count: usize, action_count: usize) -> Vec<usize> {
    (0..context_count)
        .map(|c| (5 * c + 3) % action_count.max(1))
        .collect()
}

fn check_policy_shape(spec: &ContextualBanditSpec, policy: &PolicySnapshot) -> Result<()> {
    if policy.contexts() != spec.context_count || policy.actions() != spec.action_count {
        return Err(Error::ShapeMismatch(format!(
            "policy is {}x{}, environment is {}x{}",
            policy.contexts(),
            policy.actions(),
            spec.context_count,
            spec.action_count
        )));
    }
    Ok(())
}

/// One verifier call: 1.0 for the correct action, 0.0 otherwise.
pub fn verify_reward(spec: &ContextualBanditSpec, context: usize, action: usize) -> Result<f64> {
    if context >= spec.context_count {
        return Err(Error::OutOfRange {
            what: "context",
            index: context,
            limit: spec.context_count,
        });
    }
    if action >= spec.action_count {
        return Err(Error::OutOfRange {
            what: "action",
            index: action,
            limit: spec.action_count,
        });
    }
    Ok(if spec.correct_action[context] == action { 1.0 } else { 0.0 })
}

/// `G` sampled actions per drawn context, with the behavior policy's
/// log-probabilities and version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub contexts: Vec<usize>,
    pub group_size: usize,
    pub actions: Vec<Vec<usize>>,
    pub returns: Vec<Vec<f64>>,
    pub behavior_logprobs: Vec<Vec<f64>>,
    pub behavior_version: u64,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    pub fn mean_return(&self) -> f64 {
        let count = (self.contexts.len() * self.group_size) as f64;
        if count == 0.0 {
            return 0.0;
        }
        self.returns.iter().flatten().sum::<f64>() / count
    }

    /// Checks group lengths and index ranges against a `contexts x actions`
    /// policy table.
    pub fn check_shape(&self, contexts: usize, actions: usize) -> Result<()> {
        let n = self.contexts.len();
        if self.actions.len() != n || self.returns.len() != n || self.behavior_logprobs.len() != n {
            return Err(Error::ShapeMismatch("batch sequences differ in length".into()));
        }
        for i in 0..n {
            if self.contexts[i] >= contexts {
                return Err(Error::OutOfRange {
                    what: "context",
                    index: self.contexts[i],
                    limit: contexts,
                });
            }
            if self.actions[i].len() != self.group_size
                || self.returns[i].len() != self.group_size
                || self.behavior_logprobs[i].len() != self.group_size
            {
                return Err(Error::ShapeMismatch(format!(
                    "group {i} does not have {} members",
                    self.group_size
                )));
            }
            if let Some(&a) = self.actions[i].iter().find(|&&a| a >= actions) {
                return Err(Error::OutOfRange {
                    what: "action",
                    index: a,
                    limit: actions,
                });
            }
        }
        Ok(())
    }
}

/// Draws `prompts_per_batch` contexts and `group_size` actions for each from
/// `policy`, scoring every action with the verifier.
pub fn sample_batch<R: Rng + ?Sized>(
    spec: &ContextualBanditSpec,
    policy: &PolicySnapshot,
    prompts_per_batch: usize,
    group_size: usize,
    rng: &mut R,
) -> Result<RolloutBatch> {
    check_policy_shape(spec, policy)?;
    if prompts_per_batch == 0 || group_size == 0 {
        return Err(Error::Validation(
            "prompts_per_batch and group_size must be positive".into(),
        ));
    }
    let context_dist = WeightedIndex::new(&spec.context_distribution)
        .map_err(|e| Error::Validation(format!("context distribution: {e}")))?;
    let action_dists = (0..spec.context_count)
        .map(|c| {
            let log_probs = policy.log_probs(c)?;
            let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
            let dist = WeightedIndex::new(&probs)
                .map_err(|e| Error::Validation(format!("policy row {c}: {e}")))?;
            Ok((dist, log_probs))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut batch = RolloutBatch {
        contexts: Vec::with_capacity(prompts_per_batch),
        group_size,
        actions: Vec::with_capacity(prompts_per_batch),
        returns: Vec::with_capacity(prompts_per_batch),
        behavior_logprobs: Vec::with_capacity(prompts_per_batch),
        behavior_version: policy.version,
    };
    for _ in 0..prompts_per_batch {
        let context = context_dist.sample(rng);
        let (dist, log_probs) = &action_dists[context];
        let actions: Vec<usize> = (0..group_size).map(|_| dist.sample(rng)).collect();
        batch.returns.push(
            actions
                .iter()
                .map(|&a| verify_reward(spec, context, a))
                .collect::<Result<_>>()?,
        );
        batch.behavior_logprobs.push(actions.iter().map(|&a| log_probs[a]).collect());
        batch.contexts.push(context);
        batch.actions.push(actions);
    }
    Ok(batch)
}
