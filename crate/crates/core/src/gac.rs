//! Gradient alignment control.
//!
//! Each learner step compares the raw gradient with the previous raw
//! gradient. Low alignment passes through untouched, moderate alignment has
//! its component along the previous direction scaled by `c_low / |c_t|`,
//! and extreme alignment skips the update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradvec::{anisotropic_rescale, sharded_reduce, GradientVector, ShardLayout};

/// What happens to the stored previous gradient when a step is skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipSnapshot {
    /// The skipped raw gradient becomes the reference for the next step.
    #[default]
    Replace,
    /// The reference stays at the last gradient whose update was applied.
    Freeze,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GacConfig {
    pub c_low: f64,
    pub c_high: f64,
    pub cosine_epsilon: f64,
    pub beta: f64,
    pub on_skip: SkipSnapshot,
}

impl Default for GacConfig {
    fn default() -> Self {
        Self {
            c_low: 0.05,
            c_high: 0.3,
            cosine_epsilon: 1e-8,
            beta: 1.0,
            on_skip: SkipSnapshot::Replace,
        }
    }
}

impl GacConfig {
    pub fn with_thresholds(c_low: f64, c_high: f64) -> Result<Self> {
        let config = Self {
            c_low,
            c_high,
            ..Self::default()
        };
        config.validate()?;
        Ok(config)
    }

    /// Checks `0 < c_low < c_high <= 1`, `cosine_epsilon > 0`, `beta > 0`.
    ///
    /// The controller itself accepts any thresholds, which is how the
    /// degenerate limits (`c_low = 0`, `c_high = ∞`) are exercised.
    pub fn validate(&self) -> Result<()> {
        if !(self.c_low > 0.0 && self.c_low < 1.0) {
            return Err(Error::Validation("gac.c_low must lie in (0, 1)".into()));
        }
        if !(self.c_low < self.c_high) {
            return Err(Error::Validation("c_low < c_high required".into()));
        }
        if self.c_high > 1.0 {
            return Err(Error::Validation("gac.c_high must not exceed 1".into()));
        }
        if !(self.cosine_epsilon > 0.0 && self.cosine_epsilon.is_finite()) {
            return Err(Error::Validation("gac.cosine_epsilon must be positive".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Validation("gac.beta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Warmup,
    Safe,
    Projection,
    Violation,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Warmup, Regime::Safe, Regime::Projection, Regime::Violation];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Warmup => "warmup",
            Regime::Safe => "safe",
            Regime::Projection => "projection",
            Regime::Violation => "violation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

/// `<curr, prev> / (sqrt(|curr|² |prev|²) + ε)` from a sharded reduction.
pub fn cosine(
    curr: &GradientVector,
    prev: &GradientVector,
    layout: &ShardLayout,
    cosine_epsilon: f64,
) -> Result<f64> {
    let t = sharded_reduce(curr, prev, layout)?;
    Ok(t.dot_cross / ((t.norm_sq_curr * t.norm_sq_prev).sqrt() + cosine_epsilon))
}

/// `|c| <= c_low` is safe, `|c| >= c_high` is a violation, anything between
/// is projected.
pub fn classify(c_t: f64, config: &GacConfig) -> Regime {
    let a = c_t.abs();
    if a <= config.c_low {
        Regime::Safe
    } else if a >= config.c_high {
        Regime::Violation
    } else {
        Regime::Projection
    }
}

/// Scales the component of `curr` along `prev` by `c_low / |c_t|` and the
/// orthogonal remainder by `beta`.
pub fn project(
    curr: &GradientVector,
    prev: &GradientVector,
    c_t: f64,
    config: &GacConfig,
) -> Result<GradientVector> {
    let alpha = config.c_low / c_t.abs();
    anisotropic_rescale(curr, prev, alpha, config.beta)
}

/// Cosine between a projected gradient and the reference direction, in
/// closed form: `sign(c)·c_low / sqrt(c_low² + 1 - c²)`.
pub fn post_projection_cosine(c_t: f64, c_low: f64) -> f64 {
    c_t.signum() * c_low / (c_low * c_low + 1.0 - c_t * c_t).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlAction {
    Apply(GradientVector),
    Skip,
}

/// Controller memory between learner steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignmentState {
    pub prev_grad: Option<GradientVector>,
    pub last_cosine: Option<f64>,
    pub last_regime: Option<Regime>,
}

impl AlignmentState {
    /// Gradient snapshots held across steps; never more than one.
    pub fn persistent_snapshots(&self) -> usize {
        usize::from(self.prev_grad.is_some())
    }
}

/// One pass of the control loop over a freshly computed raw gradient.
pub fn control_step(
    state: AlignmentState,
    curr: GradientVector,
    layout: &ShardLayout,
    config: &GacConfig,
) -> Result<(ControlAction, AlignmentState)> {
    let Some(prev) = state.prev_grad else {
        return Ok((
            ControlAction::Apply(curr.clone()),
            AlignmentState {
                prev_grad: Some(curr),
                last_cosine: None,
                last_regime: Some(Regime::Warmup),
            },
        ));
    };
    let c_t = cosine(&curr, &prev, layout, config.cosine_epsilon)?;
    let regime = classify(c_t, config);
    let action = match regime {
        Regime::Safe | Regime::Warmup => ControlAction::Apply(curr.clone()),
        Regime::Projection => ControlAction::Apply(project(&curr, &prev, c_t, config)?),
        Regime::Violation => ControlAction::Skip,
    };
    let next_prev = match (regime, config.on_skip) {
        (Regime::Violation, SkipSnapshot::Freeze) => prev,
        _ => curr,
    };
    Ok((
        action,
        AlignmentState {
            prev_grad: Some(next_prev),
            last_cosine: Some(c_t),
            last_regime: Some(regime),
        },
    ))
}

/// Stateful wrapper that owns the alignment state and counts regimes.
#[derive(Debug, Clone)]
pub struct GacController {
    config: GacConfig,
    layout: ShardLayout,
    state: AlignmentState,
    counts: [usize; 4],
}

impl GacController {
    pub fn new(config: GacConfig, layout: ShardLayout) -> Self {
        Self {
            config,
            layout,
            state: AlignmentState::default(),
            counts: [0; 4],
        }
    }

    pub fn config(&self) -> &GacConfig {
        &self.config
    }

    pub fn state(&self) -> &AlignmentState {
        &self.state
    }

    pub fn step(&mut self, curr: GradientVector) -> Result<ControlAction> {
        let state = std::mem::take(&mut self.state);
        let (action, next) = control_step(state, curr, &self.layout, &self.config)?;
        if let Some(regime) = next.last_regime {
            self.counts[regime as usize] += 1;
        }
        self.state = next;
        Ok(action)
    }

    pub fn regime_count(&self, regime: Regime) -> usize {
        self.counts[regime as usize]
    }
}
