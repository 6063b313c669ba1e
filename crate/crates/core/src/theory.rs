//! Numerical oracles for the staleness analysis.
//!
//! * [`check_bias_reduction`] evaluates, for one draw, how much squared
//!   bias is removed by projecting away the previous gradient direction
//!   when the bias is a persistent linear function of that gradient.
//! * [`run_quadratic_testbed`] runs stale stochastic gradient ascent on
//!   `L(θ) = -½‖θ - θ*‖²`, where the true gradient, the bias and the
//!   one-step operator (`B_t = I`) are all available in closed form, and
//!   [`check_convergence_bound`] evaluates both sides of the
//!   alignment-aware convergence bound from the recorded ledger.
//! * [`finite_diff_check`] is the central-difference gradient checker used
//!   for the GRPO surrogate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradvec::{dot, GradientVector};

/// Absolute slack on the bias-reduction inequality.
pub const BIAS_SLACK: f64 = 1e-10;
/// Absolute slack on the convergence bound.
pub const BOUND_SLACK: f64 = 1e-8;

/// Linear bias model `b = η_prev · B · g_prev + r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasModel {
    /// Row-major `dim x dim` operator.
    pub operator: Vec<f64>,
    pub dim: usize,
    pub lambda_min: f64,
    pub eta_prev: f64,
    pub remainder_bound: f64,
}

impl BiasModel {
    /// `B = λ I`.
    pub fn scaled_identity(dim: usize, lambda: f64, eta_prev: f64, remainder_bound: f64) -> Self {
        let mut operator = vec![0.0; dim * dim];
        for i in 0..dim {
            operator[i * dim + i] = lambda;
        }
        Self {
            operator,
            dim,
            lambda_min: lambda,
            eta_prev,
            remainder_bound,
        }
    }

    /// `B = λ I + scale · MᵀM / ‖MᵀM‖_F` with Gaussian `M`, so that
    /// `gᵀBg ≥ λ‖g‖²` for every `g`.
    pub fn random_psd<R: Rng + ?Sized>(
        dim: usize,
        lambda_min: f64,
        scale: f64,
        eta_prev: f64,
        remainder_bound: f64,
        rng: &mut R,
    ) -> Self {
        let m: Vec<f64> = (0..dim * dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut gram = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                let mut acc = 0.0;
                for k in 0..dim {
                    acc += m[k * dim + i] * m[k * dim + j];
                }
                gram[i * dim + j] = acc;
            }
        }
        let frob = gram.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut operator: Vec<f64> = gram.iter().map(|v| scale * v / frob).collect();
        for i in 0..dim {
            operator[i * dim + i] += lambda_min;
        }
        Self {
            operator,
            dim,
            lambda_min,
            eta_prev,
            remainder_bound,
        }
    }

    pub fn apply(&self, g: &GradientVector) -> Result<GradientVector> {
        if g.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                left: self.dim,
                right: g.dim(),
            });
        }
        let x = g.as_slice();
        GradientVector::new(
            self.operator
                .chunks(self.dim)
                .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
        )
    }

    /// `gᵀBg / ‖g‖²`.
    pub fn rayleigh_quotient(&self, g: &GradientVector) -> Result<f64> {
        Ok(dot(g, &self.apply(g)?)? / g.norm_sq())
    }
}

/// Both sides of the bias-reduction inequality for one draw, plus the
/// intermediate identities of its derivation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasReductionCheck {
    /// `‖P⊥ b‖²`, computed from the explicit projection.
    pub lhs: f64,
    /// `‖b‖² - η²λ²‖g‖² + 2ηλ‖g‖‖r‖`.
    pub rhs: f64,
    pub holds: bool,
    /// `g_prev = 0`: the projector is the identity.
    pub degenerate: bool,
    pub bias_norm_sq: f64,
    /// `⟨b, u⟩²`.
    pub removed: f64,
    /// `|‖b‖² - ‖P⊥ b‖² - ⟨b,u⟩²| / ‖b‖²`.
    pub pythagoras_residual: f64,
    /// `(ηλ‖g‖ - ‖r‖)² - ‖r‖²`, the lower bound on `removed`.
    pub removed_lower_bound: f64,
}

pub fn check_bias_reduction(
    model: &BiasModel,
    g_prev: &GradientVector,
    remainder: &GradientVector,
) -> Result<BiasReductionCheck> {
    let r_norm = remainder.norm();
    if r_norm > model.remainder_bound * (1.0 + 1e-12) {
        return Err(Error::Validation(format!(
            "remainder norm {r_norm} exceeds bound {}",
            model.remainder_bound
        )));
    }
    let b = model.apply(g_prev)?.scaled(model.eta_prev)?.add_scaled(1.0, remainder)?;
    let b_sq = b.norm_sq();
    let g_norm = g_prev.norm();
    if g_norm == 0.0 {
        return Ok(BiasReductionCheck {
            lhs: b_sq,
            rhs: b_sq,
            holds: true,
            degenerate: true,
            bias_norm_sq: b_sq,
            removed: 0.0,
            pythagoras_residual: 0.0,
            removed_lower_bound: 0.0,
        });
    }
    let u = g_prev.scaled(1.0 / g_norm)?;
    let along = dot(&b, &u)?;
    let b_perp = b.add_scaled(-along, &u)?;
    let lhs = b_perp.norm_sq();
    let el = model.eta_prev * model.lambda_min;
    let rhs = b_sq - el * el * g_norm * g_norm + 2.0 * el * g_norm * r_norm;
    let removed = along * along;
    Ok(BiasReductionCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + BIAS_SLACK,
        degenerate: false,
        bias_norm_sq: b_sq,
        removed,
        pythagoras_residual: if b_sq > 0.0 {
            (b_sq - lhs - removed).abs() / b_sq
        } else {
            0.0
        },
        removed_lower_bound: (el * g_norm - r_norm).powi(2) - r_norm * r_norm,
    })
}

/// One Monte-Carlo trial of the bias-reduction oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasTrial {
    pub trial: usize,
    pub dim: usize,
    pub lambda_min: f64,
    pub remainder_norm: f64,
    #[serde(flatten)]
    pub check: BiasReductionCheck,
}

/// Parameters of a bias-reduction Monte-Carlo study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasStudy {
    pub trials: usize,
    pub dims: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub eta_prev: f64,
    pub psd_scale: f64,
    /// `‖r‖` as a fraction of the model's remainder bound, per trial.
    pub remainder_fractions: Vec<f64>,
    pub remainder_bound: f64,
    pub seed: u64,
}

impl Default for BiasStudy {
    fn default() -> Self {
        Self {
            trials: 10_000,
            dims: vec![10, 50],
            lambdas: vec![0.1, 0.3, 1.0],
            eta_prev: 0.5,
            psd_scale: 1.0,
            remainder_fractions: vec![0.0, 0.1, 1.0],
            remainder_bound: 0.05,
            seed: 0,
        }
    }
}

/// Cycles through every (dim, λ, remainder) combination with a fresh
/// operator, previous gradient and remainder direction per trial.
pub fn run_bias_study(study: &BiasStudy) -> Result<Vec<BiasTrial>> {
    let mut rng = ChaCha8Rng::seed_from_u64(study.seed);
    let combos: Vec<(usize, f64, f64)> = study
        .dims
        .iter()
        .flat_map(|&d| {
            study.lambdas.iter().flat_map(move |&l| {
                study.remainder_fractions.iter().map(move |&f| (d, l, f))
            })
        })
        .collect();
    if combos.is_empty() {
        return Err(Error::Validation("bias study needs dims, lambdas and remainders".into()));
    }
    (0..study.trials)
        .map(|trial| {
            let (dim, lambda, fraction) = combos[trial % combos.len()];
            let model = BiasModel::random_psd(
                dim,
                lambda,
                study.psd_scale,
                study.eta_prev,
                study.remainder_bound,
                &mut rng,
            );
            let g_prev = gaussian_vector(dim, 1.0, &mut rng)?;
            let direction = gaussian_vector(dim, 1.0, &mut rng)?;
            let remainder = direction.scaled(fraction * study.remainder_bound / direction.norm())?;
            Ok(BiasTrial {
                trial,
                dim,
                lambda_min: lambda,
                remainder_norm: remainder.norm(),
                check: check_bias_reduction(&model, &g_prev, &remainder)?,
            })
        })
        .collect()
}

fn gaussian_vector<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Result<GradientVector> {
    GradientVector::new(
        (0..dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
}

/// Measured quantities for one ascent step of the quadratic testbed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerStep {
    pub step: usize,
    pub lag: usize,
    /// `L(θ_t)`.
    pub objective: f64,
    /// `‖∇L(θ_t)‖²`.
    pub grad_true_norm_sq: f64,
    /// `‖b_t‖²`.
    pub bias_norm_sq: f64,
    /// `⟨∇L(θ_t), b_t⟩`.
    pub inner_grad_bias: f64,
    /// `⟨∇L(θ_t), B_t ĝ_{t-1}⟩`, zero when the lag is zero.
    pub first_lag_inner: f64,
    /// `ĝ_{t-1}ᵀ B_t ĝ_{t-1}`, zero when the lag is zero.
    pub prev_quadratic_form: f64,
    /// `‖ĝ_{t-1}‖²`, zero when the lag is zero.
    pub prev_grad_norm_sq: f64,
    /// `Σ_{k=2..τ} |⟨∇L(θ_t), B_t ĝ_{t-k}⟩|`.
    pub higher_lag_abs: f64,
    /// `‖∇L(θ_t)‖·‖r_t‖`; the quadratic has `r_t = 0`.
    pub grad_remainder: f64,
    /// Cosine of `ĝ_t` with `ĝ_{t-1}` (zero at the first step).
    pub cosine: f64,
}

/// Per-step record of a testbed run (or the seed average of several).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLedger {
    pub steps: Vec<LedgerStep>,
    /// `b_t` per step; empty for seed-averaged ledgers.
    #[serde(skip)]
    pub biases: Vec<GradientVector>,
    /// `ĝ_t` per step; empty for seed-averaged ledgers.
    #[serde(skip)]
    pub estimates: Vec<GradientVector>,
    pub noise_var_bound: f64,
    pub l_smooth: f64,
    pub l_star: f64,
    pub eta: f64,
    pub staleness: usize,
    pub seeds: usize,
}

impl ConvergenceLedger {
    /// Step-wise mean of every scalar field over equally long ledgers.
    pub fn seed_average(ledgers: &[ConvergenceLedger]) -> Result<ConvergenceLedger> {
        let first = ledgers
            .first()
            .ok_or_else(|| Error::InsufficientData("no ledgers to average".into()))?;
        let t = first.steps.len();
        if ledgers.iter().any(|l| l.steps.len() != t) {
            return Err(Error::InsufficientData("ledgers differ in length".into()));
        }
        let n = ledgers.len() as f64;
        let steps = (0..t)
            .map(|i| {
                let mean = |f: fn(&LedgerStep) -> f64| ledgers.iter().map(|l| f(&l.steps[i])).sum::<f64>() / n;
                LedgerStep {
                    step: i,
                    lag: first.steps[i].lag,
                    objective: mean(|s| s.objective),
                    grad_true_norm_sq: mean(|s| s.grad_true_norm_sq),
                    bias_norm_sq: mean(|s| s.bias_norm_sq),
                    inner_grad_bias: mean(|s| s.inner_grad_bias),
                    first_lag_inner: mean(|s| s.first_lag_inner),
                    prev_quadratic_form: mean(|s| s.prev_quadratic_form),
                    prev_grad_norm_sq: mean(|s| s.prev_grad_norm_sq),
                    higher_lag_abs: mean(|s| s.higher_lag_abs),
                    grad_remainder: mean(|s| s.grad_remainder),
                    cosine: mean(|s| s.cosine),
                }
            })
            .collect();
        Ok(ConvergenceLedger {
            steps,
            biases: Vec::new(),
            estimates: Vec::new(),
            noise_var_bound: first.noise_var_bound,
            l_smooth: first.l_smooth,
            l_star: first.l_star,
            eta: first.eta,
            staleness: first.staleness,
            seeds: ledgers.iter().map(|l| l.seeds).sum(),
        })
    }

    /// `Σ‖b_t‖² / T`.
    pub fn mean_bias_norm_sq(&self) -> f64 {
        self.steps.iter().map(|s| s.bias_norm_sq).sum::<f64>() / self.steps.len().max(1) as f64
    }

    /// Mean cosine of consecutive stochastic gradients over steps after `cutoff`.
    pub fn mean_cosine_after(&self, cutoff: usize) -> f64 {
        let tail: Vec<f64> = self.steps.iter().filter(|s| s.step > cutoff).map(|s| s.cosine).collect();
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Configuration of one quadratic-testbed run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticTestbed {
    pub dim: usize,
    pub staleness: usize,
    pub noise_sigma: f64,
    pub eta: f64,
    pub steps: usize,
    pub seed: u64,
}

/// Stale stochastic gradient ascent on `L(θ) = -½‖θ - θ*‖²` from `θ_0 = 0`
/// with `θ* ~ N(0, I)`.
///
/// Step `t` uses `ĝ_t = ∇L(θ_{t-τ}) + ξ_t`, `τ = min(t, staleness)`, and
/// `ξ_t ~ N(0, σ²/dim · I)` so that `E‖ξ_t‖² = σ²`.
pub fn run_quadratic_testbed(cfg: &QuadraticTestbed) -> Result<ConvergenceLedger> {
    const L_SMOOTH: f64 = 1.0;
    if cfg.dim == 0 || cfg.steps == 0 {
        return Err(Error::Validation("testbed needs positive dim and steps".into()));
    }
    if !(cfg.eta > 0.0 && cfg.eta <= 1.0 / (4.0 * L_SMOOTH)) {
        return Err(Error::Validation(format!(
            "eta {} must lie in (0, 1/(4L)] with L = 1",
            cfg.eta
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let target: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
    let noise_std = cfg.noise_sigma / (cfg.dim as f64).sqrt();

    let true_grad = |theta: &[f64]| -> Result<GradientVector> {
        GradientVector::new(target.iter().zip(theta).map(|(s, t)| s - t).collect())
    };

    let mut thetas: Vec<Vec<f64>> = vec![vec![0.0; cfg.dim]];
    let mut estimates: Vec<GradientVector> = Vec::with_capacity(cfg.steps);
    let mut ledger = ConvergenceLedger {
        steps: Vec::with_capacity(cfg.steps),
        biases: Vec::with_capacity(cfg.steps),
        estimates: Vec::new(),
        noise_var_bound: cfg.noise_sigma * cfg.noise_sigma,
        l_smooth: L_SMOOTH,
        l_star: 0.0,
        eta: cfg.eta,
        staleness: cfg.staleness,
        seeds: 1,
    };

    for t in 0..cfg.steps {
        let lag = t.min(cfg.staleness);
        let theta = &thetas[t];
        let grad = true_grad(theta)?;
        let stale = true_grad(&thetas[t - lag])?;
        let bias = GradientVector::new(
            theta.iter().zip(&thetas[t - lag]).map(|(a, b)| a - b).collect(),
        )?;
        let noise = gaussian_vector(cfg.dim, noise_std, &mut rng)?;
        let estimate = stale.add_scaled(1.0, &noise)?;

        let (first_lag_inner, prev_quadratic_form, prev_grad_norm_sq) = if lag >= 1 {
            let prev = &estimates[t - 1];
            (dot(&grad, prev)?, prev.norm_sq(), prev.norm_sq())
        } else {
            (0.0, 0.0, 0.0)
        };
        let mut higher_lag_abs = 0.0;
        for k in 2..=lag {
            higher_lag_abs += dot(&grad, &estimates[t - k])?.abs();
        }
        let cosine = match estimates.last() {
            Some(prev) => {
                let denom = (estimate.norm_sq() * prev.norm_sq()).sqrt();
                if denom > 0.0 {
                    dot(&estimate, prev)? / denom
                } else {
                    0.0
                }
            }
            None => 0.0,
        };

        ledger.steps.push(LedgerStep {
            step: t,
            lag,
            objective: -0.5 * grad.norm_sq(),
            grad_true_norm_sq: grad.norm_sq(),
            bias_norm_sq: bias.norm_sq(),
            inner_grad_bias: dot(&grad, &bias)?,
            first_lag_inner,
            prev_quadratic_form,
            prev_grad_norm_sq,
            higher_lag_abs,
            grad_remainder: 0.0,
            cosine,
        });
        ledger.biases.push(bias);

        let next: Vec<f64> = theta
            .iter()
            .zip(estimate.as_slice())
            .map(|(p, g)| p + cfg.eta * g)
            .collect();
        thetas.push(next);
        estimates.push(estimate);
    }
    ledger.estimates = estimates;
    Ok(ledger)
}

/// Both forms of the convergence bound evaluated on a ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// `min_t E‖∇L(θ_t)‖²`.
    pub lhs: f64,
    /// Bias form: telescoping + noise + bias magnitude − bias alignment.
    pub rhs: f64,
    pub holds: bool,
    /// `Err(T)` of the persistence form.
    pub err_term: f64,
    pub telescoping: f64,
    pub noise_term: f64,
    pub bias_magnitude_term: f64,
    /// `(2/T) Σ E⟨∇L(θ_t), b_t⟩`, subtracted in `rhs`.
    pub alignment_term: f64,
    /// `(2/T) Σ η ρ_t λ_t E‖ĝ_{t-1}‖²`, subtracted in `rhs_persistence`.
    pub persistence_term: f64,
    /// Persistence form: telescoping + noise + bias magnitude − persistence + Err.
    pub rhs_persistence: f64,
    pub holds_persistence: bool,
    /// `Σ‖b_t‖² / T`.
    pub mean_bias_norm_sq: f64,
    /// Mean over lagged steps of the measured `ρ_t` before clamping to `[0, 1]`.
    pub mean_raw_rho: f64,
    /// Smallest `Σ δ_t` for which one-step alignment stability holds.
    pub total_delta: f64,
}

pub fn check_convergence_bound(ledger: &ConvergenceLedger) -> Result<BoundCheck> {
    let t_len = ledger.steps.len();
    if t_len == 0 || ledger.steps.iter().enumerate().any(|(i, s)| s.step != i) {
        return Err(Error::InsufficientData("ledger is empty or has gaps".into()));
    }
    if !(ledger.l_smooth > 0.0) || ledger.eta > 1.0 / (4.0 * ledger.l_smooth) + 1e-15 {
        return Err(Error::Validation("ledger violates eta <= 1/(4L)".into()));
    }
    let t = t_len as f64;
    let eta = ledger.eta;
    let l = ledger.l_smooth;

    let lhs = ledger
        .steps
        .iter()
        .map(|s| s.grad_true_norm_sq)
        .fold(f64::INFINITY, f64::min);
    let telescoping = 2.0 * (ledger.l_star - ledger.steps[0].objective) / (eta * t);
    let noise_term = 2.0 * l * eta * ledger.noise_var_bound;
    let bias_sum: f64 = ledger.steps.iter().map(|s| s.bias_norm_sq).sum();
    let bias_magnitude_term = 4.0 * l * eta / t * bias_sum;
    let alignment_term = 2.0 / t * ledger.steps.iter().map(|s| s.inner_grad_bias).sum::<f64>();
    let rhs = telescoping + noise_term + bias_magnitude_term - alignment_term;

    let mut persistence_sum = 0.0;
    let mut err_sum = 0.0;
    let mut total_delta = 0.0;
    let mut raw_rho_sum = 0.0;
    let mut lagged = 0usize;
    for s in &ledger.steps {
        let mut delta = 0.0;
        if s.lag >= 1 && s.prev_grad_norm_sq > 0.0 {
            let lambda = s.prev_quadratic_form / s.prev_grad_norm_sq;
            let raw_rho = s.first_lag_inner / s.prev_quadratic_form;
            let rho = raw_rho.clamp(0.0, 1.0);
            delta = (rho * s.prev_quadratic_form - s.first_lag_inner).max(0.0);
            persistence_sum += eta * rho * lambda * s.prev_grad_norm_sq;
            raw_rho_sum += raw_rho;
            lagged += 1;
        }
        total_delta += delta;
        err_sum += eta * s.higher_lag_abs + s.grad_remainder + eta * delta;
    }
    let persistence_term = 2.0 / t * persistence_sum;
    let err_term = 2.0 / t * err_sum;
    let rhs_persistence = telescoping + noise_term + bias_magnitude_term - persistence_term + err_term;

    Ok(BoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + BOUND_SLACK,
        err_term,
        telescoping,
        noise_term,
        bias_magnitude_term,
        alignment_term,
        persistence_term,
        rhs_persistence,
        holds_persistence: lhs <= rhs_persistence + BOUND_SLACK,
        mean_bias_norm_sq: bias_sum / t,
        mean_raw_rho: if lagged > 0 { raw_rho_sum / lagged as f64 } else { 0.0 },
        total_delta,
    })
}

/// Seed-averaged bound checks over a staleness × noise grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundGrid {
    pub dim: usize,
    pub eta: f64,
    pub steps: usize,
    pub seeds: u64,
    pub staleness: Vec<usize>,
    pub noise_sigmas: Vec<f64>,
}

impl Default for BoundGrid {
    fn default() -> Self {
        Self {
            dim: 20,
            eta: 0.2,
            steps: 200,
            seeds: 20,
            staleness: vec![0, 4, 8, 16],
            noise_sigmas: vec![0.0, 0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub staleness: usize,
    pub noise_sigma: f64,
    pub seeds: u64,
    pub steps: usize,
    /// Seed-averaged `E[c_t]` over steps after 50.
    pub mean_cosine: f64,
    #[serde(flatten)]
    pub check: BoundCheck,
}

/// One record per (noise, staleness) cell, noise-major.
pub fn run_bound_grid(grid: &BoundGrid) -> Result<Vec<BoundRecord>> {
    let mut out = Vec::new();
    for &noise_sigma in &grid.noise_sigmas {
        for &staleness in &grid.staleness {
            let ledgers = (0..grid.seeds)
                .map(|seed| {
                    run_quadratic_testbed(&QuadraticTestbed {
                        dim: grid.dim,
                        staleness,
                        noise_sigma,
                        eta: grid.eta,
                        steps: grid.steps,
                        seed,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let avg = ConvergenceLedger::seed_average(&ledgers)?;
            out.push(BoundRecord {
                staleness,
                noise_sigma,
                seeds: grid.seeds,
                steps: grid.steps,
                mean_cosine: avg.mean_cosine_after(50),
                check: check_convergence_bound(&avg)?,
            });
        }
    }
    Ok(out)
}

/// Central-difference derivatives of `objective` at `point` along `coords`.
pub fn central_differences<F>(mut objective: F, point: &[f64], step: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Validation("finite-difference step must be positive".into()));
    }
    let mut x = point.to_vec();
    coords
        .iter()
        .map(|&i| {
            if i >= x.len() {
                return Err(Error::OutOfRange {
                    what: "coordinate",
                    index: i,
                    limit: x.len(),
                });
            }
            let orig = x[i];
            x[i] = orig + step;
            let plus = objective(&x)?;
            x[i] = orig - step;
            let minus = objective(&x)?;
            x[i] = orig;
            Ok((plus - minus) / (2.0 * step))
        })
        .collect()
}

/// Largest relative error between `analytic` and central differences of
/// `objective` over the sampled coordinates. The denominator is floored at
/// `1e-12`.
pub fn finite_diff_check<F>(
    objective: F,
    analytic: &GradientVector,
    point: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.dim() != point.len() {
        return Err(Error::DimensionMismatch {
            left: point.len(),
            right: analytic.dim(),
        });
    }
    let numeric = central_differences(objective, point, step, coords)?;
    Ok(coords.iter().zip(numeric).fold(0.0, |worst: f64, (&i, n)| {
        let exact = analytic.as_slice()[i];
        let denom = exact.abs().max(n.abs()).max(1e-12);
        worst.max((exact - n).abs() / denom)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gv(v: &[f64]) -> GradientVector {
        GradientVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn scaled_identity_without_remainder_is_tight() {
        let model = BiasModel::scaled_identity(4, 0.3, 0.5, 0.0);
        let check = check_bias_reduction(&model, &gv(&[1.0, -2.0, 0.5, 3.0]), &GradientVector::zeros(4)).unwrap();
        assert!(check.lhs.abs() < 1e-10);
        assert!(check.rhs.abs() < 1e-10);
        assert!((check.lhs - check.rhs).abs() < 1e-10);
        assert!(check.holds);
    }

    #[test]
    fn zero_previous_gradient_is_degenerate() {
        let model = BiasModel::scaled_identity(3, 1.0, 0.1, 1.0);
        let r = gv(&[0.1, 0.0, 0.2]);
        let check = check_bias_reduction(&model, &GradientVector::zeros(3), &r).unwrap();
        assert!(check.degenerate && check.holds);
        assert_eq!(check.lhs, r.norm_sq());
    }

    #[test]
    fn remainder_bound_enforced() {
        let model = BiasModel::scaled_identity(2, 1.0, 0.1, 0.01);
        assert!(check_bias_reduction(&model, &gv(&[1.0, 0.0]), &gv(&[0.1, 0.0])).is_err());
    }

    #[test]
    fn psd_construction_satisfies_persistence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = BiasModel::random_psd(12, 0.3, 2.0, 0.5, 0.0, &mut rng);
        for _ in 0..200 {
            let g = gaussian_vector(12, 1.0, &mut rng).unwrap();
            assert!(model.rayleigh_quotient(&g).unwrap() >= 0.3 - 1e-12);
        }
    }

    #[test]
    fn testbed_without_lag_or_noise_contracts_geometrically() {
        let cfg = QuadraticTestbed {
            dim: 5,
            staleness: 0,
            noise_sigma: 0.0,
            eta: 0.2,
            steps: 30,
            seed: 9,
        };
        let ledger = run_quadratic_testbed(&cfg).unwrap();
        let g0 = ledger.steps[0].grad_true_norm_sq;
        for s in &ledger.steps {
            assert_eq!(s.bias_norm_sq, 0.0);
            let want = 0.8f64.powi(2 * s.step as i32) * g0;
            assert!((s.grad_true_norm_sq - want).abs() <= 1e-12 * g0);
        }
        let check = check_convergence_bound(&ledger).unwrap();
        assert!(check.holds);
        assert!(check.rhs >= check.telescoping - 1e-12);
    }

    #[test]
    fn testbed_rejects_large_steps() {
        let cfg = QuadraticTestbed {
            dim: 3,
            staleness: 0,
            noise_sigma: 0.0,
            eta: 0.3,
            steps: 5,
            seed: 0,
        };
        assert!(run_quadratic_testbed(&cfg).is_err());
    }

    #[test]
    fn finite_differences_on_quadratic() {
        let point = [0.3, -1.2, 2.0];
        let f = |x: &[f64]| Ok(x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>());
        let grad = gv(&[0.6, -4.8, 12.0]);
        assert!(finite_diff_check(f, &grad, &point, 1e-5, &[0, 1, 2]).unwrap() < 1e-8);
        let flat = |_: &[f64]| Ok(1.0);
        assert_eq!(finite_diff_check(flat, &GradientVector::zeros(3), &point, 1e-5, &[0, 2]).unwrap(), 0.0);
    }
}
