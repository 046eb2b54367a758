//! Exact leave-one-out posteriors of a partially masked sticky chain by
//! message passing, checked against enumeration, and the error-rate metric.
//!
//!     cargo run --example hmm_posterior

use maskdiff::hmm::{brute_force_posterior, error_rate, leave_one_out_posterior};
use maskdiff::process::forward_sample;
use maskdiff::rng::rng_from_seed;
use maskdiff::{MaskingSchedule, SequenceState, StickyChainModel};

fn main() -> maskdiff::Result<()> {
    let model = StickyChainModel::standard();
    let mut rng = rng_from_seed(3);
    let x0 = model.sample(8, &mut rng)?;
    let x = forward_sample(&x0, 0.6, MaskingSchedule::Cosine, &mut rng)?;
    println!("clean {x0}\nnoisy {x}\n");

    let fast = leave_one_out_posterior(&model, &x)?;
    let slow = brute_force_posterior(&model, &x)?;
    for d in 0..x.len() {
        let row: Vec<String> = fast.row(d).iter().map(|p| format!("{p:.4}")).collect();
        println!("d={d} p(x0^d | rest) = [{}]", row.join(", "));
    }
    println!("max deviation from enumeration: {:.2e}", fast.max_abs_diff(&slow));

    let spec = model.spec(6)?;
    let legal = SequenceState::new(spec, vec![0, 0, 1, 1, 2, 3])?;
    let broken = SequenceState::new(spec, vec![0, 2, 2, 1, 1, 1])?;
    println!("\nerror rate {legal}: {:.2}", error_rate(std::slice::from_ref(&legal), &model)?);
    println!("error rate {broken}: {:.2}", error_rate(std::slice::from_ref(&broken), &model)?);
    Ok(())
}
