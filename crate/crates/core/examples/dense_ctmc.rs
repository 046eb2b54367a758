//! Exact dense CTMC objects on a two-token, two-position space: the joint
//! absorbing rate, the time reversal under exact marginals, and the
//! forward-backward generator that keeps those marginals fixed.
//!
//!     cargo run --example dense_ctmc

use maskdiff::process::{
    absorbing_rate_base, backward_rate_dense, corrector_rate_dense, exact_marginals, joint_rate_dense,
    transition_probs_expm,
};
use maskdiff::{MaskingSchedule, SequenceSpec, SequenceState, StickyChainModel};

fn main() -> maskdiff::Result<()> {
    let schedule = MaskingSchedule::Cosine;
    let model = StickyChainModel::new(2, 0.8)?;
    let spec = SequenceSpec::new(2, 2)?;
    let t = 0.5;

    let base = absorbing_rate_base(2);
    let p = transition_probs_expm(&base, 0.0, t, schedule)?;
    println!("single-token transition probabilities 0 -> {t}:\n{p:.6}");
    println!("survival alpha_t = {:.6}\n", schedule.alpha(t)?);

    let q = exact_marginals(spec, &model.dense_prior(2)?, schedule.alpha(t)?)?;
    let forward = joint_rate_dense(spec, t, schedule)?;
    let backward = backward_rate_dense(&forward, &q)?;
    let corrector = corrector_rate_dense(&forward, &q)?;

    for (i, qi) in q.iter().enumerate() {
        println!("q_t({}) = {qi:.6}", SequenceState::from_dense_index(spec, i));
    }
    let drift = |v: Vec<f64>| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    println!("\nmax |q^T R|      = {:.3e}", drift(forward.left_apply(&q)));
    println!("max |q^T R~|     = {:.3e}", drift(backward.left_apply(&q)));
    println!("max |q^T (R+R~)| = {:.3e}", drift(corrector.left_apply(&q)));
    Ok(())
}
