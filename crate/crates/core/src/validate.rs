//! Named self-checks comparing fast implementations against brute-force
//! enumeration and exact dense computations. Each check returns a
//! [`CheckReport`]; [`run_all`] is what the `validate` command executes.

use std::time::Instant;

use rand::Rng;

use crate::denoiser::{Denoiser, OracleDenoiser, TabularDenoiser};
use crate::error::{Error, Result};
use crate::hmm::{brute_force_posterior, error_rate, leave_one_out_posterior, PosteriorTable, StickyChainModel};
use crate::hollow::{HollowConfig, HollowNet};
use crate::losses::{loss_breakdown, loss_ctmc_dense, score_from_denoiser, LossMode};
use crate::process::{corrector_rate_dense, exact_marginals, forward_sample, joint_rate_dense};
use crate::rng::{rng_from_seed, substream, SamplerRng};
use crate::samplers::{generate, generate_with_rng, gumbel_top_k, CorrectorKind, PredictorKind, SamplerConfig, StepAction};
use crate::schedule::MaskingSchedule;
use crate::sequence::{SequenceSpec, SequenceState, Token};

/// Signature of a leave-one-out posterior, swappable for negative controls.
pub type PosteriorFn = fn(&StickyChainModel, &SequenceState) -> Result<PosteriorTable>;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub id: &'static str,
    pub passed: bool,
    /// Largest observed deviation, or another headline number.
    pub metric: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

impl CheckReport {
    pub fn line(&self) -> String {
        format!(
            "{} {:<26} metric={:.3e} tol={:.1e} {:.2}s {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.metric,
            self.tolerance,
            self.seconds,
            self.detail
        )
    }
}

fn report(id: &'static str, start: Instant, metric: f64, tolerance: f64, detail: String) -> CheckReport {
    CheckReport { id, passed: metric <= tolerance, metric, tolerance, detail, seconds: start.elapsed().as_secs_f64() }
}

fn failed(id: &'static str, start: Instant, err: Error) -> CheckReport {
    CheckReport {
        id,
        passed: false,
        metric: f64::INFINITY,
        tolerance: 0.0,
        detail: format!("error: {err}"),
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn guard(id: &'static str, start: Instant, body: impl FnOnce() -> Result<CheckReport>) -> CheckReport {
    body().unwrap_or_else(|e| failed(id, start, e))
}

/// Strictly positive random prior over `S^D`.
fn random_prior(spec: SequenceSpec, rng: &mut SamplerRng) -> Vec<f64> {
    let n = spec.vocab_size.pow(spec.len as u32);
    let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Exact `q(x0^d | ctx)` of an arbitrary prior by enumerating completions.
fn prior_conditional(spec: SequenceSpec, prior: &[f64], d: usize, ctx: &SequenceState) -> Vec<f64> {
    let s = spec.vocab_size;
    let mut row = vec![0.0; s];
    for (idx, &p) in prior.iter().enumerate() {
        let mut rem = idx;
        let mut clean = vec![0usize; spec.len];
        for pos in (0..spec.len).rev() {
            clean[pos] = rem % s;
            rem /= s;
        }
        let consistent = (0..spec.len).all(|e| e == d || ctx.is_masked(e) || ctx.get(e) as usize == clean[e]);
        if consistent {
            row[clean[d]] += p;
        }
    }
    row
}

/// Exact denoiser of an arbitrary prior on a tiny space.
pub fn prior_denoiser(spec: SequenceSpec, prior: &[f64]) -> Result<TabularDenoiser> {
    TabularDenoiser::from_fn(spec, |d, ctx| {
        let row = prior_conditional(spec, prior, d, ctx);
        if row.iter().sum::<f64>() > 0.0 {
            row
        } else {
            vec![1.0; spec.vocab_size]
        }
    })
}

/// Message-passing posterior against enumeration on random masked chains.
pub fn check_posterior(posterior: PosteriorFn, instances: usize, seed: u64) -> CheckReport {
    let id = "posterior-equivalence";
    let start = Instant::now();
    guard(id, start, || {
        let mut rng = rng_from_seed(seed);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let s = rng.random_range(2..=4);
            let len = rng.random_range(1..=8);
            let model = StickyChainModel::new(s, rng.random_range(0.5..0.99))?;
            let clean = model.sample(len, &mut rng)?;
            let t = rng.random_range(0.05..0.95);
            let x = forward_sample(&clean, t, MaskingSchedule::Cosine, &mut rng)?;
            let fast = posterior(&model, &x)?;
            let slow = brute_force_posterior(&model, &x)?;
            worst = worst.max(fast.max_abs_diff(&slow));
        }
        Ok(report(id, start, worst, 1e-10, format!("{instances} instances, D <= 8, S <= 4")))
    })
}

/// `q_t^T (R_t + R~_t) = 0` on dense joint spaces.
pub fn check_corrector_stationarity(seed: u64) -> CheckReport {
    let id = "corrector-stationarity";
    let start = Instant::now();
    guard(id, start, || {
        let mut rng = rng_from_seed(seed);
        let schedule = MaskingSchedule::Cosine;
        let mut worst = 0.0f64;
        let mut cases = 0;
        for len in 1..=2 {
            for s in 2..=3 {
                let spec = SequenceSpec::new(s, len)?;
                let priors = [random_prior(spec, &mut rng), StickyChainModel::new(s, 0.8)?.dense_prior(len)?];
                for prior in &priors {
                    for t in [0.2, 0.5, 0.8] {
                        let q = exact_marginals(spec, prior, schedule.alpha(t)?)?;
                        let forward = joint_rate_dense(spec, t, schedule)?;
                        let gen = corrector_rate_dense(&forward, &q)?;
                        gen.check_generator(1e-9)?;
                        worst = gen.left_apply(&q).iter().fold(worst, |m, v| m.max(v.abs()));
                        cases += 1;
                    }
                }
            }
        }
        Ok(report(id, start, worst, 1e-8, format!("{cases} cases, D <= 2, S <= 3")))
    })
}

fn spread(values: &[f64]) -> f64 {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

/// The gap between two bound expressions does not depend on the denoiser.
pub fn check_objective_equivalence(n_denoisers: usize, seed: u64) -> CheckReport {
    let id = "objective-equivalence";
    let start = Instant::now();
    guard(id, start, || {
        let schedule = MaskingSchedule::Cosine;
        let mut worst = 0.0f64;
        let spec4 = SequenceSpec::new(2, 4)?;
        let spec3 = SequenceSpec::new(2, 3)?;
        let cases: [(SequenceSpec, Vec<Token>); 3] =
            [(spec4, vec![0, 1, 1, 0]), (spec4, vec![1, 1, 1, 1]), (spec3, vec![0, 1, 0])];
        for (spec, tokens) in cases {
            let x0 = SequenceState::new(spec, tokens)?;
            let mut simplified = Vec::new();
            let mut dense = Vec::new();
            for i in 0..n_denoisers {
                let den = TabularDenoiser::random(spec, seed.wrapping_add(i as u64), 1.5)?;
                let b = loss_breakdown(&den, &x0, schedule, LossMode::exact())?;
                simplified.push(b.masked.value - b.unmasked.value);
                if spec.len <= 3 {
                    dense.push(loss_ctmc_dense(&den, &x0, schedule, LossMode::exact())?.value - b.unmasked.value);
                }
            }
            worst = worst.max(spread(&simplified));
            if !dense.is_empty() {
                worst = worst.max(spread(&dense));
            }
        }
        Ok(report(id, start, worst, 1e-5, format!("{n_denoisers} random tabular denoisers per case")))
    })
}

/// Scores computed from one denoiser row against ratios of exact marginals.
pub fn check_score_simplification(seed: u64) -> CheckReport {
    let id = "score-simplification";
    let start = Instant::now();
    guard(id, start, || {
        let mut rng = rng_from_seed(seed);
        let schedule = MaskingSchedule::Cosine;
        let mut worst = 0.0f64;
        let mut compared = 0;
        for len in 1..=3 {
            for s in [2, 3] {
                let spec = SequenceSpec::new(s, len)?;
                let model = StickyChainModel::new(s, 0.7)?;
                let priors = [random_prior(spec, &mut rng), model.dense_prior(len)?];
                for (which, prior) in priors.iter().enumerate() {
                    let tab;
                    let oracle = OracleDenoiser::new(model.clone());
                    let den: &dyn Denoiser = if which == 0 {
                        tab = prior_denoiser(spec, prior)?;
                        &tab
                    } else {
                        &oracle
                    };
                    for t in [0.2, 0.5, 0.8] {
                        let q = exact_marginals(spec, prior, schedule.alpha(t)?)?;
                        for (i, &qx) in q.iter().enumerate() {
                            let x = SequenceState::from_dense_index(spec, i);
                            for d in x.unmasked_positions() {
                                let qy = q[x.masked_at(d).dense_index()];
                                if qy <= 0.0 {
                                    continue;
                                }
                                let score = score_from_denoiser(den, &x, d, t, schedule)?;
                                let exact = qx / qy;
                                worst = worst.max((score - exact).abs() / exact.abs().max(1.0));
                                compared += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(report(id, start, worst, 1e-10, format!("{compared} score entries, D <= 3")))
    })
}

/// Changing `x^d` never changes output row `d`, compared bit for bit.
pub fn check_hollowness(trials: usize, seed: u64) -> CheckReport {
    let id = "hollowness";
    let start = Instant::now();
    guard(id, start, || {
        let config = HollowConfig { vocab_size: 4, max_len: 24, layers: 3, mix_every: 2, embed: 16, heads: 4 };
        let net = HollowNet::init(config, seed)?;
        let mut rng = rng_from_seed(seed ^ 0x5eed);
        let mut mismatches = 0usize;
        for _ in 0..trials {
            let len = rng.random_range(1..=config.max_len);
            let spec = SequenceSpec::new(config.vocab_size, len)?;
            let tokens: Vec<Token> = (0..len).map(|_| rng.random_range(0..=config.vocab_size as Token)).collect();
            let x = SequenceState::new(spec, tokens)?;
            let d = rng.random_range(0..len);
            let mut y = x.clone();
            while y.get(d) == x.get(d) {
                y.set(d, rng.random_range(0..=config.vocab_size as Token));
            }
            let (a, b) = (net.forward(&x)?, net.forward(&y)?);
            if a.row(d).iter().zip(b.row(d)).any(|(p, q)| p.to_bits() != q.to_bits()) {
                mismatches += 1;
            }
        }
        Ok(report(id, start, mismatches as f64, 0.0, format!("{trials} single-position perturbations")))
    })
}

/// Unmasking one token per step with the exact posterior never produces
/// an illegal pair.
pub fn check_zero_error(n_sequences: usize, seed: u64) -> CheckReport {
    let id = "zero-error-one-at-a-time";
    let start = Instant::now();
    guard(id, start, || {
        let model = StickyChainModel::standard();
        let spec = model.spec(128)?;
        let oracle = OracleDenoiser::new(model.clone());
        let config = SamplerConfig { predictor: PredictorKind::OneAtATime, steps: spec.len, ..Default::default() };
        let samples = {
            use rayon::prelude::*;
            (0..n_sequences)
                .into_par_iter()
                .map(|i| {
                    let mut rng = substream(seed, &[i as u64]);
                    generate_with_rng(&config, &oracle, spec, false, &mut rng).map(|r| r.sample)
                })
                .collect::<Result<Vec<_>>>()?
        };
        let rate = error_rate(&samples, &model)?;
        Ok(report(id, start, rate, 0.0, format!("{n_sequences} sequences, S=4, D=128, p=0.9")))
    })
}

/// Empirical first picks of the Gumbel ranking against `softmax(-c / tau)`.
/// The metric is the largest deviation in units of the binomial sigma.
pub fn check_gumbel_top_k(draws: usize, seed: u64) -> CheckReport {
    let id = "gumbel-top-k";
    let start = Instant::now();
    guard(id, start, || {
        let cases: [(&[f64], f64); 3] = [(&[0.0, 1.0, 2.0], 1.0), (&[-1.0, 0.5, 0.5, 3.0], 0.5), (&[2.0, -2.0, 0.0, 1.0, -0.5], 2.0)];
        let mut rng = rng_from_seed(seed);
        let mut worst = 0.0f64;
        for (scores, tau) in cases {
            let indexed: Vec<(usize, f64)> = scores.iter().cloned().enumerate().collect();
            let mut counts = vec![0usize; scores.len()];
            for _ in 0..draws {
                counts[gumbel_top_k(&indexed, 1, tau, &mut rng)?[0]] += 1;
            }
            let w: Vec<f64> = scores.iter().map(|c| (-c / tau).exp()).collect();
            let total: f64 = w.iter().sum();
            for (i, &n) in counts.iter().enumerate() {
                let p = w[i] / total;
                let sigma = (p * (1.0 - p) / draws as f64).sqrt();
                worst = worst.max((n as f64 / draws as f64 - p).abs() / sigma);
            }
        }
        Ok(report(id, start, worst, 3.0, format!("3 score vectors, {draws} draws each, metric in sigmas")))
    })
}

/// Random-scan single-site Gibbs with uniform site choice among unmasked
/// positions, rows from the exact denoiser, leaves `q_t(. | mask set)`
/// invariant. The kernel is built exactly, not sampled.
pub fn check_gibbs_stationarity(seed: u64) -> CheckReport {
    let id = "gibbs-stationarity";
    let start = Instant::now();
    guard(id, start, || {
        let spec = SequenceSpec::new(2, 3)?;
        let mut rng = rng_from_seed(seed);
        let prior = random_prior(spec, &mut rng);
        let den = prior_denoiser(spec, &prior)?;
        let q = exact_marginals(spec, &prior, MaskingSchedule::Cosine.alpha(0.5)?)?;
        let n = q.len();
        let mut worst = 0.0f64;
        for mask_bits in 0u32..(1 << spec.len) - 1 {
            let in_class = |x: &SequenceState| (0..spec.len).all(|d| x.is_masked(d) == (mask_bits >> d & 1 == 1));
            let members: Vec<usize> = (0..n).filter(|&i| in_class(&SequenceState::from_dense_index(spec, i))).collect();
            let z: f64 = members.iter().map(|&i| q[i]).sum();
            let mut moved = vec![0.0; n];
            for &i in &members {
                let x = SequenceState::from_dense_index(spec, i);
                let out = den.evaluate(&x, 0.5)?;
                let sites = x.unmasked_positions();
                for &d in &sites {
                    for v in 0..spec.vocab_size {
                        let mut y = x.clone();
                        y.set(d, v as Token);
                        moved[y.dense_index()] += q[i] / z * out.row(d)[v] / sites.len() as f64;
                    }
                }
            }
            for &i in &members {
                worst = worst.max((moved[i] - q[i] / z).abs());
            }
        }
        Ok(report(id, start, worst, 1e-10, "D=3, S=2, every mask configuration".into()))
    })
}

/// Eight predictor steps, eight correctors and a final argmax cost 17
/// evaluations, and the trace records each one.
pub fn check_nfe_accounting(seed: u64) -> CheckReport {
    let id = "nfe-accounting";
    let start = Instant::now();
    guard(id, start, || {
        let model = StickyChainModel::standard();
        let oracle = OracleDenoiser::new(model.clone());
        let config = SamplerConfig {
            steps: 8,
            corrector: CorrectorKind::Informed,
            corrector_steps: 1,
            t_c: 1.0,
            final_argmax: true,
            seed,
            ..Default::default()
        };
        let r = generate(&config, &oracle, model.spec(128)?, true)?;
        let trace = r.trace.unwrap_or_default();
        let count = |a| trace.iter().filter(|s| s.action == a).count();
        let shape = (count(StepAction::Predictor), count(StepAction::Corrector), count(StepAction::FinalArgmax));
        let ok = r.nfe == 17 && trace.len() == 17 && shape == (8, 8, 1);
        Ok(report(
            id,
            start,
            if ok { 0.0 } else { 1.0 },
            0.0,
            format!("nfe={} trace={} (predictor, corrector, argmax)={shape:?}", r.nfe, trace.len()),
        ))
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ValidateOptions {
    pub seed: u64,
    pub posterior: PosteriorFn,
    pub zero_error_sequences: usize,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self { seed: 0, posterior: leave_one_out_posterior, zero_error_sequences: 1000 }
    }
}

pub fn run_all(opts: &ValidateOptions) -> Vec<CheckReport> {
    let s = opts.seed;
    vec![
        check_posterior(opts.posterior, 100, s),
        check_corrector_stationarity(s),
        check_objective_equivalence(5, s),
        check_score_simplification(s),
        check_hollowness(200, s),
        check_zero_error(opts.zero_error_sequences, s),
        check_gumbel_top_k(100_000, s),
        check_gibbs_stationarity(s),
        check_nfe_accounting(s),
    ]
}
