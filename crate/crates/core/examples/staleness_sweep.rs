//! Alignment and final return as the rollout lag grows, averaged over seeds.

use gacsim::pipeline::{run_training, StalenessSchedule, TrainingSetup};

fn main() -> gacsim::Result<()> {
    let seeds = 3;
    println!("{:>3} {:>10} {:>12}", "s", "q90|c|", "final return");
    for s in [0, 4, 8, 16, 32] {
        let (mut q, mut r) = (0.0, 0.0);
        for seed in 0..seeds {
            let m = run_training(&TrainingSetup {
                schedule: StalenessSchedule::fixed(s),
                seed,
                ..TrainingSetup::default()
            })?;
            q += m.alignment_stats(50).expect("enough steps").q90_abs_cosine;
            r += m.final_return(50);
        }
        println!("{s:>3} {:>10.4} {:>12.4}", q / seeds as f64, r / seeds as f64);
    }
    Ok(())
}
