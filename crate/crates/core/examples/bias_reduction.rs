//! Projection removes part of the stale bias whenever the bias operator is
//! positive definite.

use gacsim::theory::{run_bias_study, BiasStudy};

fn main() -> gacsim::Result<()> {
    let study = BiasStudy {
        trials: 1_000,
        ..BiasStudy::default()
    };
    let trials = run_bias_study(&study)?;
    let held = trials.iter().filter(|t| t.check.holds).count();
    let worst = trials.iter().map(|t| t.check.rhs - t.check.lhs).fold(f64::INFINITY, f64::min);
    println!("{held}/{} trials hold; smallest margin {worst:.3e}", trials.len());
    for t in trials.iter().take(5) {
        println!(
            "dim {:>2} lambda {:.1} |r| {:.3}: biased {:.4} -> projected {:.4}",
            t.dim, t.lambda_min, t.remainder_norm, t.check.rhs, t.check.lhs
        );
    }
    Ok(())
}
