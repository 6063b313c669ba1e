//! Cosine between consecutive gradients, computed as if the parameters were
//! split across ranks. The result does not depend on how the vector is cut.

use gacsim::gac::cosine;
use gacsim::gradvec::{GradientVector, ShardLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gacsim::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dim = 10_000;
    let prev: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let curr: Vec<f64> = prev.iter().map(|p| 0.3 * p + rng.gen_range(-1.0..1.0)).collect();
    let (prev, curr) = (GradientVector::new(prev)?, GradientVector::new(curr)?);

    for ranks in [1, 2, 8, 64] {
        let layout = ShardLayout::even(dim, ranks)?;
        println!("{ranks:>3} ranks: cosine = {:.15}", cosine(&curr, &prev, &layout, 1e-12)?);
    }
    let ragged = ShardLayout::new(dim, &[3, 1_000, 9_999])?;
    println!("ragged : cosine = {:.15}", cosine(&curr, &prev, &ragged, 1e-12)?);
    Ok(())
}
