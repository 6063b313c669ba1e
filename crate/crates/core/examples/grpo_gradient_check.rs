//! Checks the analytic clipped-surrogate gradient against central
//! differences on an off-policy batch.

use gacsim::envs::{sample_batch, ContextualBanditSpec};
use gacsim::grpo::{surrogate_gradient, surrogate_value, GrpoConfig, PolicySnapshot};
use gacsim::theory::finite_diff_check;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gacsim::Result<()> {
    let (contexts, actions) = (4, 5);
    let env = ContextualBanditSpec::uniform(contexts, actions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let behavior_theta: Vec<f64> = (0..contexts * actions).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let behavior = PolicySnapshot::new(contexts, actions, behavior_theta.clone(), 0)?;
    let batch = sample_batch(&env, &behavior, 6, 8, &mut rng)?;

    let config = GrpoConfig {
        entropy_coef: 0.01,
        kl_coef: 0.05,
        ..GrpoConfig::default()
    };
    let theta: Vec<f64> = behavior_theta.iter().map(|x| x + rng.gen_range(-0.05..0.05)).collect();
    let policy = behavior.with_theta(theta.clone())?;
    let (grad, report) = surrogate_gradient(&policy, &batch, &behavior, &config)?;
    println!("{report:?}");

    let coords: Vec<usize> = (0..theta.len()).collect();
    let worst = finite_diff_check(
        |x| surrogate_value(&behavior.with_theta(x.to_vec())?, &batch, &config),
        &grad,
        &theta,
        1e-6,
        &coords,
    )?;
    println!("largest relative error over {} coordinates: {worst:.2e}", coords.len());
    Ok(())
}
