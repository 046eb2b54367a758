//! Compares samplers on the sticky chain at several NFE budgets. Each
//! sampler's hyperparameters are picked per budget on tuning seeds, then
//! evaluated on separate seeds.
//!
//!     cargo run --release --example markov_benchmark

use maskdiff::bench::{run_bench, ExperimentConfig, RunOptions, TuningSection};

fn main() -> maskdiff::Result<()> {
    let config = ExperimentConfig { tuning: Some(TuningSection::default()), ..Default::default() };
    let outcome = run_bench(&config, RunOptions::default())?;

    println!("{:<18} {:>4} {:>4} {:>6} {:>6} {:>9} {:>8}", "sampler", "nfe", "k", "tau", "h_c", "error", "se");
    for s in &outcome.summary {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        println!(
            "{:<18} {:>4} {:>4} {:>6} {:>6} {:>9.5} {:>8.5}",
            s.sampler.as_str(),
            s.nfe,
            opt(s.k.map(|k| k.to_string())),
            opt(s.tau.map(|t| t.to_string())),
            opt(s.h_c.map(|h| h.to_string())),
            s.err_mean,
            s.err_se
        );
    }
    Ok(())
}
