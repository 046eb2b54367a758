//! Masking schedules and the forward (noising) process on a sticky chain.
//!
//!     cargo run --example forward_process

use maskdiff::process::forward_sample;
use maskdiff::rng::rng_from_seed;
use maskdiff::{MaskingSchedule, StickyChainModel};

fn main() -> maskdiff::Result<()> {
    println!("{:>5} {:>10} {:>10} {:>10} {:>10}", "t", "alpha lin", "alpha cos", "beta lin", "beta cos");
    for i in 0..=8 {
        let t = i as f64 / 8.0;
        let beta = |s: MaskingSchedule| s.beta(t).map_or("inf".to_string(), |b| format!("{b:.4}"));
        println!(
            "{t:>5.3} {:>10.4} {:>10.4} {:>10} {:>10}",
            MaskingSchedule::Linear.alpha(t)?,
            MaskingSchedule::Cosine.alpha(t)?,
            beta(MaskingSchedule::Linear),
            beta(MaskingSchedule::Cosine)
        );
    }

    let model = StickyChainModel::standard();
    let mut rng = rng_from_seed(7);
    let x0 = model.sample(48, &mut rng)?;
    println!("\nclean  {x0}");
    for t in [0.25, 0.5, 0.75, 1.0] {
        let xt = forward_sample(&x0, t, MaskingSchedule::Cosine, &mut rng)?;
        println!("t={t:<4} {xt}  ({} masked)", xt.n_masked());
    }
    Ok(())
}
