//! The masked, unmasked and averaged bounds, plus the general CTMC bound,
//! for several random denoisers. Their pairwise gaps stay fixed while the
//! values themselves move.
//!
//!     cargo run --example elbo_equivalence

use maskdiff::losses::{loss_breakdown, loss_ctmc_dense, LossMode};
use maskdiff::{MaskingSchedule, SequenceSpec, SequenceState, TabularDenoiser};

fn main() -> maskdiff::Result<()> {
    let schedule = MaskingSchedule::Cosine;
    let spec = SequenceSpec::new(2, 3)?;
    let x0 = SequenceState::new(spec, vec![0, 1, 1])?;
    println!("{:>4} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}", "seed", "masked", "unmasked", "hd", "ctmc", "m - u", "ctmc - u");
    for seed in 0..5 {
        let den = TabularDenoiser::random(spec, seed, 1.5)?;
        let b = loss_breakdown(&den, &x0, schedule, LossMode::exact())?;
        let ctmc = loss_ctmc_dense(&den, &x0, schedule, LossMode::exact())?.value;
        let (m, u) = (b.masked.value, b.unmasked.value);
        println!("{seed:>4} {m:>10.6} {u:>10.6} {:>10.6} {ctmc:>10.6} {:>10.6} {:>10.6}", b.hd.value, m - u, ctmc - u);
    }

    let den = TabularDenoiser::uniform(spec)?;
    let mc = loss_breakdown(&den, &x0, schedule, LossMode::monte_carlo(20_000, 1))?;
    let exact = loss_breakdown(&den, &x0, schedule, LossMode::monte_carlo(1, 1).exact_over_same_window())?;
    println!(
        "\nuniform denoiser, hd bound: monte carlo {:.4} ± {:.4}, exact {:.4}",
        mc.hd.value, mc.hd.std_error, exact.hd.value
    );
    Ok(())
}
