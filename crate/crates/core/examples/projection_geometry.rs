//! What the controller does to a gradient in each regime.

use gacsim::gac::{classify, cosine, post_projection_cosine, project, GacConfig};
use gacsim::gradvec::{decompose, GradientVector, ShardLayout};

fn main() -> gacsim::Result<()> {
    let config = GacConfig::default();
    let layout = ShardLayout::single(2)?;
    let prev = GradientVector::new(vec![1.0, 0.0])?;
    println!("c_low = {}, c_high = {}", config.c_low, config.c_high);
    println!("{:>8} {:>11} {:>10} {:>10} {:>12}", "c_t", "regime", "|g|", "|g'|", "cos(g',prev)");
    for c in [0.02, 0.1, 0.2, 0.29, 0.5, -0.2] {
        let g = GradientVector::new(vec![c, (1.0f64 - c * c).sqrt()])?.scaled(3.0)?;
        let c_t = cosine(&g, &prev, &layout, 0.0)?;
        let regime = classify(c_t, &config);
        let (out, after) = match regime.as_str() {
            "projection" => {
                let out = project(&g, &prev, c_t, &config)?;
                let (par, _) = decompose(&out, &prev)?;
                let signed = par.as_slice()[0] / out.norm();
                assert!((signed - post_projection_cosine(c_t, config.c_low)).abs() < 1e-12);
                (out.norm(), signed)
            }
            "violation" => (0.0, f64::NAN),
            _ => (g.norm(), c_t),
        };
        println!("{c_t:>8.3} {:>11} {:>10.4} {out:>10.4} {after:>12.6}", regime.as_str(), g.norm());
    }
    Ok(())
}
