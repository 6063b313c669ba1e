use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gacsim::cli::{
    calibrate_thresholds, emit_plot_data, execute_run, load_config, load_metrics, load_sweep, run_sweep,
    write_jsonl, PlotKind, OUTPUT_ROOT_ENV,
};
use gacsim::theory::{run_bias_study, run_bound_grid, BiasStudy, BoundGrid};
use gacsim::{Error, Result};

/// Asynchronous GRPO simulator with gradient alignment control.
#[derive(Parser)]
#[command(name = "gacsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training configuration.
    Run { config: PathBuf },
    /// Run a one-axis sweep.
    Sweep { spec: PathBuf },
    /// Suggest GAC thresholds from a synchronous run's metrics.
    Calibrate { metrics: PathBuf },
    /// Run the numerical theory oracles (both when no flag is given).
    VerifyTheory {
        #[arg(long)]
        proposition: bool,
        #[arg(long)]
        bound: bool,
    },
    /// Write plot-ready CSV next to the metrics file (or into --out).
    PlotData {
        metrics: PathBuf,
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn theory_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
        .join("theory")
}

/// Ok(false) when an oracle ran but did not hold.
fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let out = execute_run(&cfg)?;
            println!("{}", out.dir.display());
            println!("{}", serde_json::to_string(&out.summary).expect("summary serializes"));
            Ok(true)
        }
        Command::Sweep { spec } => {
            let spec = load_sweep(&spec)?;
            let cells = run_sweep(&spec)?;
            let failed = cells.iter().filter(|c| c.error.is_some()).count();
            for c in &cells {
                match (&c.summary, &c.error) {
                    (Some(s), _) => println!(
                        "cell {} {}={} final_return={:.4} q90|c|={} collapse={}",
                        c.cell,
                        c.axis.as_str(),
                        c.value,
                        s.final_return,
                        s.q90_abs_cosine.map_or("n/a".into(), |q| format!("{q:.4}")),
                        s.collapse_detected
                    ),
                    (None, err) => println!("cell {} {}={} error: {}", c.cell, c.axis.as_str(), c.value, err.as_deref().unwrap_or("")),
                }
            }
            if failed > 0 {
                return Err(Error::Validation(format!("{failed} sweep cell(s) failed")));
            }
            Ok(true)
        }
        Command::Calibrate { metrics } => {
            let cal = calibrate_thresholds(&load_metrics(&metrics)?)?;
            println!("{}", serde_json::to_string(&cal).expect("calibration serializes"));
            Ok(true)
        }
        Command::VerifyTheory { proposition, bound } => {
            let both = !proposition && !bound;
            let mut ok = true;
            if proposition || both {
                let trials = run_bias_study(&BiasStudy::default())?;
                let holds = trials.iter().filter(|t| t.check.holds).count();
                let path = theory_root().join("proposition.jsonl");
                write_jsonl(&path, &trials)?;
                println!("bias reduction: {holds}/{} trials hold ({})", trials.len(), path.display());
                ok &= holds == trials.len();
            }
            if bound || both {
                let records = run_bound_grid(&BoundGrid::default())?;
                for r in &records {
                    println!(
                        "bound: s={:<2} sigma={:<4} lhs={:.4e} rhs={:.4e} err={:.4e} holds={}",
                        r.staleness, r.noise_sigma, r.check.lhs, r.check.rhs, r.check.err_term, r.check.holds
                    );
                    ok &= r.check.holds;
                }
                let path = theory_root().join("bound.jsonl");
                write_jsonl(&path, &records)?;
                println!("bound records: {}", path.display());
            }
            Ok(ok)
        }
        Command::PlotData { metrics, kind, out } => {
            let kind = PlotKind::parse(&kind).ok_or_else(|| {
                Error::Validation(format!("unknown plot kind {kind:?} (reward, cosine, regime_histogram)"))
            })?;
            let dir = out.unwrap_or_else(|| metrics.parent().map(PathBuf::from).unwrap_or_default());
            let path = emit_plot_data(&load_metrics(&metrics)?, kind, &dir)?;
            println!("{}", path.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
