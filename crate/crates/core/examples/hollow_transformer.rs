//! A randomly initialized hollow transformer: output row `d` never depends
//! on the token at `d`. Also round-trips the parameter file.
//!
//!     cargo run --example hollow_transformer

use maskdiff::{Denoiser, HollowConfig, HollowNet, SequenceSpec, SequenceState};

fn main() -> maskdiff::Result<()> {
    let config = HollowConfig { vocab_size: 4, max_len: 32, layers: 4, mix_every: 2, embed: 32, heads: 4 };
    let net = HollowNet::init(config, 11)?;
    println!("{} parameters, {} mixing layers, tied streams: {}", net.n_params(), config.n_mixers(), net.weights_tied());

    let spec = SequenceSpec::new(4, 12)?;
    let x = SequenceState::new(spec, vec![0, 0, 1, 4, 4, 2, 2, 2, 3, 4, 0, 0])?;
    let out = net.evaluate(&x, 0.5)?;
    let d = 5;
    for v in 0..4 {
        let mut y = x.clone();
        y.set(d, v);
        let row = net.forward(&y)?;
        let same = row.row(d) == out.row(d);
        println!("x^{d} = {v}: row {d} = {:?} identical: {same}", fmt(row.row(d)));
    }

    let mut buf = Vec::new();
    net.save(&mut buf)?;
    let back = HollowNet::load(buf.as_slice())?;
    println!("reloaded output identical: {}", back.forward(&x)? == out);
    Ok(())
}

fn fmt(row: &[f64]) -> Vec<String> {
    row.iter().map(|p| format!("{p:.4}")).collect()
}
