//! One stale run with and without the controller.

use gacsim::gac::{GacConfig, Regime};
use gacsim::pipeline::{run_training, StalenessSchedule, TrainingSetup};

fn main() -> gacsim::Result<()> {
    for controller in [None, Some(GacConfig::default())] {
        let setup = TrainingSetup {
            schedule: StalenessSchedule::fixed(16),
            controller,
            ..TrainingSetup::default()
        };
        let m = run_training(&setup)?;
        let stats = m.alignment_stats(50).expect("enough steps");
        println!(
            "gac={:<5} final return {:.3}  q90|c| {:.3}  projections {}  violations {}",
            setup.controller.is_some(),
            m.final_return(50),
            stats.q90_abs_cosine,
            m.regime_count(Some(Regime::Projection)),
            m.regime_count(Some(Regime::Violation)),
        );
    }
    Ok(())
}
