//! Run orchestration: TOML configs, sweeps, metrics files, calibration and
//! plot-ready exports.
//!
//! Files written per run, under `<output root>/<experiment_name>/`:
//!
//! * `metrics.csv` with header `step,mean_return,cosine,regime,clip_fraction,grad_norm,skipped`.
//!   `cosine` is empty when undefined (first step), `regime` is `none`
//!   when no controller is attached.
//! * `summary.jsonl`, one [`RunSummary`] per run (one line per cell for sweeps).
//!
//! The output root is `output_dir` from the config unless the
//! `GACSIM_OUTPUT_ROOT` environment variable is set.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{default_answer_key, ContextualBanditSpec, DEFAULT_ACTIONS, DEFAULT_CONTEXTS, DEFAULT_PROMPTS_PER_BATCH};
use crate::error::{Error, Result};
use crate::gac::{GacConfig, Regime, SkipSnapshot};
use crate::grpo::GrpoConfig;
use crate::pipeline::{
    detect_collapse, run_training, OptimizerKind, RunMetrics, StalenessSchedule, StepRecord, TrainingSetup,
    DEFAULT_COLLAPSE_DROP, DEFAULT_COLLAPSE_WINDOW, DEFAULT_LEARNING_RATE, FINAL_RETURN_WINDOW, LOW_COSINE,
    SUMMARY_WARMUP_STEPS,
};
use crate::stats;

pub const OUTPUT_ROOT_ENV: &str = "GACSIM_OUTPUT_ROOT";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.jsonl";
pub const METRICS_HEADER: &str = "step,mean_return,cosine,regime,clip_fraction,grad_norm,skipped";
/// Regime label written for runs without a controller.
pub const NO_REGIME: &str = "none";
/// Minimum post-warmup cosines for [`calibrate_thresholds`].
pub const MIN_CALIBRATION_SAMPLES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub context_count: usize,
    pub action_count: usize,
    /// Defaults to the built-in answer key.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct_action: Option<Vec<usize>>,
    /// Defaults to uniform.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_distribution: Option<Vec<f64>>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            context_count: DEFAULT_CONTEXTS,
            action_count: DEFAULT_ACTIONS,
            correct_action: None,
            context_distribution: None,
        }
    }
}

impl EnvConfig {
    pub fn to_spec(&self) -> Result<ContextualBanditSpec> {
        let c = self.context_count;
        ContextualBanditSpec::new(
            c,
            self.action_count,
            self.correct_action
                .clone()
                .unwrap_or_else(|| default_answer_key(c, self.action_count)),
            self.context_distribution
                .clone()
                .unwrap_or_else(|| vec![1.0 / c.max(1) as f64; c]),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GacSection {
    pub enabled: bool,
    pub c_low: f64,
    pub c_high: f64,
    pub cosine_epsilon: f64,
    pub beta: f64,
    pub on_skip: SkipSnapshot,
}

impl Default for GacSection {
    fn default() -> Self {
        let d = GacConfig::default();
        Self {
            enabled: false,
            c_low: d.c_low,
            c_high: d.c_high,
            cosine_epsilon: d.cosine_epsilon,
            beta: d.beta,
            on_skip: d.on_skip,
        }
    }
}

impl GacSection {
    pub fn config(&self) -> GacConfig {
        GacConfig {
            c_low: self.c_low,
            c_high: self.c_high,
            cosine_epsilon: self.cosine_epsilon,
            beta: self.beta,
            on_skip: self.on_skip,
        }
    }
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment_name: String,
    pub seed: u64,
    pub steps: u64,
    pub learning_rate: f64,
    pub prompts_per_batch: usize,
    pub shard_count: usize,
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub grpo: GrpoConfig,
    pub schedule: StalenessSchedule,
    pub gac: GacSection,
    pub optimizer: OptimizerKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment_name: "default".into(),
            seed: 0,
            steps: 500,
            learning_rate: DEFAULT_LEARNING_RATE,
            prompts_per_batch: DEFAULT_PROMPTS_PER_BATCH,
            shard_count: 4,
            output_dir: PathBuf::from("runs"),
            env: EnvConfig::default(),
            grpo: GrpoConfig::default(),
            schedule: StalenessSchedule::default(),
            gac: GacSection::default(),
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let name = &self.experiment_name;
        if name.is_empty()
            || !name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(Error::Validation(format!(
                "experiment_name {name:?} must be nonempty and use only letters, digits, '-' and '_'"
            )));
        }
        if self.seed > i64::MAX as u64 || self.steps > i64::MAX as u64 {
            return Err(Error::Validation("seed and steps must fit in a signed 64-bit integer".into()));
        }
        if self.steps == 0 {
            return Err(Error::Validation("steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation("learning_rate must be positive".into()));
        }
        if self.prompts_per_batch == 0 {
            return Err(Error::Validation("prompts_per_batch must be positive".into()));
        }
        if self.shard_count == 0 || self.shard_count > self.env.context_count * self.env.action_count {
            return Err(Error::Validation(
                "shard_count must lie in 1..=context_count*action_count".into(),
            ));
        }
        self.env.to_spec()?;
        self.grpo.validate()?;
        self.gac.config().validate()?;
        if let OptimizerKind::AdamW { beta1, beta2, eps, weight_decay } = self.optimizer {
            let unit = |b: f64| (0.0..1.0).contains(&b);
            if !(unit(beta1) && unit(beta2) && eps > 0.0 && weight_decay >= 0.0) {
                return Err(Error::Validation("optimizer: invalid AdamW hyperparameters".into()));
            }
        }
        Ok(())
    }

    pub fn training_setup(&self) -> Result<TrainingSetup> {
        self.validate()?;
        Ok(TrainingSetup {
            env: self.env.to_spec()?,
            prompts_per_batch: self.prompts_per_batch,
            grpo: self.grpo,
            schedule: self.schedule,
            controller: self.gac.enabled.then(|| self.gac.config()),
            steps: self.steps,
            learning_rate: self.learning_rate,
            seed: self.seed,
            shard_count: self.shard_count,
            optimizer: self.optimizer,
        })
    }

    /// `GACSIM_OUTPUT_ROOT` if set, otherwise `output_dir`.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(&self.experiment_name)
    }
}

fn toml_error(text: &str, e: toml::de::Error) -> Error {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    Error::Parse {
        line,
        message: e.message().to_string(),
    }
}

/// Parses and validates a config; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| toml_error(text, e))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&fs::read_to_string(path)?)
}

pub fn serialize_config(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Validation(e.to_string()))
}

/// Per-run summary line of `summary.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment_name: String,
    pub seed: u64,
    pub staleness: u64,
    pub gac_enabled: bool,
    pub c_low: f64,
    pub c_high: f64,
    pub steps: u64,
    /// `None` when no step after the warmup cutoff has a cosine.
    pub q90_abs_cosine: Option<f64>,
    pub max_abs_cosine: Option<f64>,
    pub frac_low_cosine: Option<f64>,
    pub final_return: f64,
    pub final_policy_return: f64,
    pub collapse_detected: bool,
    pub skipped_steps: usize,
    pub divergence_events: usize,
    pub regime_counts: BTreeMap<String, usize>,
}

fn regime_label(r: Option<Regime>) -> &'static str {
    r.map(Regime::as_str).unwrap_or(NO_REGIME)
}

pub fn regime_counts(metrics: &RunMetrics) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in &metrics.records {
        *counts.entry(regime_label(r.regime).to_string()).or_insert(0) += 1;
    }
    counts
}

pub fn summarize(cfg: &RunConfig, metrics: &RunMetrics) -> RunSummary {
    let align = metrics.alignment_stats(SUMMARY_WARMUP_STEPS);
    let window = DEFAULT_COLLAPSE_WINDOW.min(metrics.len().saturating_sub(1)).max(1);
    RunSummary {
        experiment_name: cfg.experiment_name.clone(),
        seed: cfg.seed,
        staleness: cfg.schedule.staleness,
        gac_enabled: cfg.gac.enabled,
        c_low: cfg.gac.c_low,
        c_high: cfg.gac.c_high,
        steps: cfg.steps,
        q90_abs_cosine: align.map(|a| a.q90_abs_cosine),
        max_abs_cosine: align.map(|a| a.max_abs_cosine),
        frac_low_cosine: align.map(|a| a.frac_low_cosine),
        final_return: metrics.final_return(FINAL_RETURN_WINDOW),
        final_policy_return: metrics.final_policy_return(FINAL_RETURN_WINDOW),
        collapse_detected: detect_collapse(metrics, window, DEFAULT_COLLAPSE_DROP),
        skipped_steps: metrics.skipped_steps(),
        divergence_events: metrics.divergence_events(),
        regime_counts: regime_counts(metrics),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricsRow {
    step: u64,
    mean_return: f64,
    cosine: Option<f64>,
    regime: String,
    clip_fraction: f64,
    grad_norm: f64,
    skipped: bool,
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io.to_string()),
        kind => Error::Parse {
            line,
            message: format!("{kind:?}"),
        },
    }
}

pub fn write_metrics_csv<W: Write>(metrics: &RunMetrics, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in &metrics.records {
        w.serialize(MetricsRow {
            step: r.step,
            mean_return: r.mean_return,
            cosine: r.cosine,
            regime: regime_label(r.regime).into(),
            clip_fraction: r.clip_fraction,
            grad_norm: r.grad_norm,
            skipped: r.skipped,
        })
        .map_err(csv_error)?;
    }
    if metrics.is_empty() {
        w.write_record(METRICS_HEADER.split(',')).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a metrics CSV back. Columns not stored in the file come back as
/// `behavior_version = 0`, `policy_return = NaN`, `diverged = false`.
pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<RunMetrics> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(csv_error)?.iter().collect::<Vec<_>>().join(",");
    if header != METRICS_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {METRICS_HEADER:?}, found {header:?}"),
        });
    }
    let mut records = Vec::new();
    for row in rdr.deserialize() {
        let row: MetricsRow = row.map_err(csv_error)?;
        let regime = match row.regime.as_str() {
            NO_REGIME => None,
            s => Some(Regime::parse(s).ok_or_else(|| Error::Parse {
                line: records.len() + 2,
                message: format!("unknown regime {s:?}"),
            })?),
        };
        records.push(StepRecord {
            step: row.step,
            behavior_version: 0,
            mean_return: row.mean_return,
            policy_return: f64::NAN,
            cosine: row.cosine,
            regime,
            clip_fraction: row.clip_fraction,
            grad_norm: row.grad_norm,
            skipped: row.skipped,
            diverged: false,
        });
    }
    Ok(RunMetrics { records })
}

pub fn load_metrics(path: &Path) -> Result<RunMetrics> {
    read_metrics_csv(fs::File::open(path)?)
}

fn summary_line(value: &impl Serialize) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Io(e.to_string()))
}

/// Output of [`execute_run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub metrics: RunMetrics,
    pub summary: RunSummary,
}

/// Runs `cfg` and writes `metrics.csv` and `summary.jsonl` into `dir`.
pub fn execute_run_in(cfg: &RunConfig, dir: &Path) -> Result<RunOutput> {
    let metrics = run_training(&cfg.training_setup()?)?;
    let summary = summarize(cfg, &metrics);
    fs::create_dir_all(dir)?;
    write_metrics_csv(&metrics, fs::File::create(dir.join(METRICS_FILE))?)?;
    fs::write(dir.join(SUMMARY_FILE), summary_line(&summary)? + "\n")?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        metrics,
        summary,
    })
}

pub fn execute_run(cfg: &RunConfig) -> Result<RunOutput> {
    execute_run_in(cfg, &cfg.run_dir())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Staleness,
    CLow,
    CHigh,
    Seed,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Staleness => "staleness",
            SweepAxis::CLow => "c_low",
            SweepAxis::CHigh => "c_high",
            SweepAxis::Seed => "seed",
        }
    }
}

/// A one-axis sweep over a base config.
///
/// ```toml
/// axis = "staleness"
/// values = [0, 4, 8, 16, 32]
///
/// [base]
/// experiment_name = "staleness"
/// gac.enabled = true
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub base: RunConfig,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

fn as_count(axis: SweepAxis, v: f64) -> Result<u64> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as u64)
    } else {
        Err(Error::Validation(format!(
            "{} values must be nonnegative integers, got {v}",
            axis.as_str()
        )))
    }
}

impl SweepSpec {
    /// Base config with the axis set to `value`.
    pub fn cell_config(&self, value: f64) -> Result<RunConfig> {
        let mut cfg = self.base.clone();
        match self.axis {
            SweepAxis::Staleness => cfg.schedule.staleness = as_count(self.axis, value)?,
            SweepAxis::Seed => cfg.seed = as_count(self.axis, value)?,
            SweepAxis::CLow => cfg.gac.c_low = value,
            SweepAxis::CHigh => cfg.gac.c_high = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Validation("sweep values must be nonempty".into()));
        }
        self.base.validate()?;
        for &v in &self.values {
            self.cell_config(v)?;
        }
        Ok(())
    }
}

pub fn parse_sweep(text: &str) -> Result<SweepSpec> {
    let spec: SweepSpec = toml::from_str(text).map_err(|e| toml_error(text, e))?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_sweep(path: &Path) -> Result<SweepSpec> {
    parse_sweep(&fs::read_to_string(path)?)
}

/// One line of a sweep's `summary.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub cell: usize,
    pub axis: SweepAxis,
    pub value: f64,
    pub error: Option<String>,
    #[serde(flatten)]
    pub summary: Option<RunSummary>,
}

/// Cell directory name, e.g. `cell03_staleness_16`.
pub fn cell_dir_name(index: usize, axis: SweepAxis, value: f64) -> String {
    format!("cell{index:02}_{}_{value}", axis.as_str())
}

/// Runs every cell in order under `root/<base name>/`. A failing cell is
/// recorded with its error and the sweep continues.
pub fn run_sweep_in(spec: &SweepSpec, root: &Path) -> Result<Vec<SweepCell>> {
    spec.validate()?;
    let sweep_dir = root.join(&spec.base.experiment_name);
    fs::create_dir_all(&sweep_dir)?;
    let mut cells = Vec::with_capacity(spec.values.len());
    for (i, &value) in spec.values.iter().enumerate() {
        let dir = sweep_dir.join(cell_dir_name(i, spec.axis, value));
        let outcome = spec.cell_config(value).and_then(|cfg| execute_run_in(&cfg, &dir));
        cells.push(match outcome {
            Ok(out) => SweepCell {
                cell: i,
                axis: spec.axis,
                value,
                error: None,
                summary: Some(out.summary),
            },
            Err(e) => SweepCell {
                cell: i,
                axis: spec.axis,
                value,
                error: Some(e.to_string()),
                summary: None,
            },
        });
    }
    let mut text = String::new();
    for c in &cells {
        text.push_str(&summary_line(c)?);
        text.push('\n');
    }
    fs::write(sweep_dir.join(SUMMARY_FILE), text)?;
    Ok(cells)
}

pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepCell>> {
    run_sweep_in(spec, &spec.base.output_root())
}

/// Alignment statistics of a synchronous run and the thresholds they suggest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub q90_abs_cosine: f64,
    pub max_abs_cosine: f64,
    pub frac_low_cosine: f64,
    pub samples: usize,
    pub c_low: f64,
    pub c_high: f64,
}

/// `c_low` is q0.9 of `|c_t|` after step 50 rounded up to two decimals
/// (at least 0.01); `c_high` is `6·c_low` capped at 0.5.
pub fn calibrate_thresholds(metrics: &RunMetrics) -> Result<Calibration> {
    let abs = metrics.abs_cosines_after(SUMMARY_WARMUP_STEPS);
    if abs.len() < MIN_CALIBRATION_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "calibration needs at least {MIN_CALIBRATION_SAMPLES} cosines after step {SUMMARY_WARMUP_STEPS}, found {}",
            abs.len()
        )));
    }
    let q90 = stats::quantile(&abs, 0.9).expect("nonempty");
    let max = abs.iter().copied().fold(0.0, f64::max);
    let low = abs.iter().filter(|&&c| c <= LOW_COSINE).count() as f64 / abs.len() as f64;
    let c_low = ((q90 * 100.0 - 1e-9).ceil() / 100.0).max(0.01);
    let c_high = ((6.0 * c_low).min(0.5) * 100.0).round() / 100.0;
    Ok(Calibration {
        q90_abs_cosine: q90,
        max_abs_cosine: max,
        frac_low_cosine: low,
        samples: abs.len(),
        c_low,
        c_high,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Reward,
    Cosine,
    RegimeHistogram,
}

impl PlotKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PlotKind::Reward => "reward",
            PlotKind::Cosine => "cosine",
            PlotKind::RegimeHistogram => "regime_histogram",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [PlotKind::Reward, PlotKind::Cosine, PlotKind::RegimeHistogram]
            .into_iter()
            .find(|k| k.as_str() == s)
    }
}

/// Writes `plot_<kind>.csv` into `dir`:
///
/// * `reward`: `step,mean_return`
/// * `cosine`: `step,cosine`, steps without a cosine omitted
/// * `regime_histogram`: `regime,count` for warmup, safe, projection,
///   violation and none, in that order; counts sum to the step count
pub fn emit_plot_data(metrics: &RunMetrics, kind: PlotKind, dir: &Path) -> Result<PathBuf> {
    if metrics.is_empty() {
        return Err(Error::InsufficientData("no metrics to plot".into()));
    }
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("plot_{}.csv", kind.as_str()));
    let mut w = csv::Writer::from_path(&path).map_err(csv_error)?;
    match kind {
        PlotKind::Reward => {
            w.write_record(["step", "mean_return"]).map_err(csv_error)?;
            for r in &metrics.records {
                w.serialize((r.step, r.mean_return)).map_err(csv_error)?;
            }
        }
        PlotKind::Cosine => {
            w.write_record(["step", "cosine"]).map_err(csv_error)?;
            for r in &metrics.records {
                if let Some(c) = r.cosine {
                    w.serialize((r.step, c)).map_err(csv_error)?;
                }
            }
        }
        PlotKind::RegimeHistogram => {
            w.write_record(["regime", "count"]).map_err(csv_error)?;
            let labels = Regime::ALL.iter().map(|r| Some(*r)).chain([None]);
            for label in labels {
                let n = metrics.regime_count(label);
                w.serialize((regime_label(label), n)).map_err(csv_error)?;
            }
        }
    }
    w.flush()?;
    Ok(path)
}

/// Writes one JSON line per item.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = String::new();
    for item in items {
        text.push_str(&summary_line(item)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
