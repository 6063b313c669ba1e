//! Derives thresholds from a synchronous run, then trains a stale run with them.

use gacsim::cli::{calibrate_thresholds, RunConfig};
use gacsim::pipeline::run_training;

fn main() -> gacsim::Result<()> {
    let sync = RunConfig::default();
    let cal = calibrate_thresholds(&run_training(&sync.training_setup()?)?)?;
    println!(
        "{} samples: q90 {:.4}, max {:.4}, frac<=0.05 {:.2} -> c_low {}, c_high {}",
        cal.samples, cal.q90_abs_cosine, cal.max_abs_cosine, cal.frac_low_cosine, cal.c_low, cal.c_high
    );

    let mut stale = RunConfig::default();
    stale.schedule.staleness = 16;
    stale.gac.enabled = true;
    stale.gac.c_low = cal.c_low;
    stale.gac.c_high = cal.c_high;
    let m = run_training(&stale.training_setup()?)?;
    println!("stale run with calibrated thresholds: final return {:.3}", m.final_return(50));
    Ok(())
}
