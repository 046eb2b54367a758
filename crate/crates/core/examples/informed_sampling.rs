//! Generates sticky-chain sequences with and without the informed
//! corrector and prints the step trace of one run.
//!
//!     cargo run --release --example informed_sampling

use maskdiff::hmm::error_rate;
use maskdiff::samplers::generate;
use maskdiff::{CorrectorKind, OracleDenoiser, SamplerConfig, StickyChainModel};

fn main() -> maskdiff::Result<()> {
    let model = StickyChainModel::standard();
    let spec = model.spec(64)?;
    let oracle = OracleDenoiser::new(model.clone());

    let plain = SamplerConfig { steps: 16, ..Default::default() };
    let informed =
        SamplerConfig { steps: 8, corrector: CorrectorKind::Informed, k: 2, tau: 0.1, t_c: 1.0, ..Default::default() };

    for (name, config) in [("no corrector", plain), ("informed", informed)] {
        let mut samples = Vec::new();
        for seed in 0..64 {
            samples.push(generate(&SamplerConfig { seed, ..config }, &oracle, spec, false)?.sample);
        }
        println!("{name:<13} nfe={:<3} error rate {:.4}", config.expected_nfe(), error_rate(&samples, &model)?);
    }

    let report = generate(&informed, &oracle, spec, true)?;
    println!("\ntrace ({} evaluations):", report.nfe);
    for step in report.trace.as_deref().unwrap_or_default() {
        println!("  t={:.3} {:<12} changed {:?}", step.t, format!("{:?}", step.action), step.changed);
    }
    println!("sample {}", report.sample);
    Ok(())
}
