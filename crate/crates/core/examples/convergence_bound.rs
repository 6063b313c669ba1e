//! Stale gradient ascent on a noisy quadratic, with every term of the
//! convergence bound logged.

use gacsim::theory::{run_bound_grid, BoundGrid};

fn main() -> gacsim::Result<()> {
    let grid = BoundGrid {
        seeds: 5,
        ..BoundGrid::default()
    };
    println!("{:>3} {:>6} {:>10} {:>10} {:>10} {:>8} {:>6}", "s", "sigma", "lhs", "rhs", "bias", "cos", "holds");
    for r in run_bound_grid(&grid)? {
        println!(
            "{:>3} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>8.3} {:>6}",
            r.staleness, r.noise_sigma, r.check.lhs, r.check.rhs, r.check.mean_bias_norm_sq, r.mean_cosine, r.check.holds
        );
    }
    Ok(())
}
