//! ELBO estimators for masked diffusion.
//!
//! * [`loss_masked`]: weight `alpha'/(1-alpha)` on the masked positions.
//! * [`loss_unmasked`]: weight `alpha'/alpha` on the unmasked positions,
//!   using `p(x_0^d | M^d(x))` from a single hollow evaluation.
//! * [`loss_hd`]: their average on shared draws.
//! * [`loss_ctmc_dense`]: the general CTMC bound with explicit neighbor sums,
//!   evaluated over the dense state space of tiny problems.
//!
//! All values are positive NLL bounds in nats per sequence. The unmasked and
//! CTMC forms differ from the masked form by a parameter-free constant that
//! is reported as-is, never subtracted.
//!
//! In exact mode the expectation over mask patterns is summed in closed
//! form, which cancels the `1/(1-alpha)` and `1/alpha` singularities, so the
//! time integral can run over the whole unit interval.

use gauss_quad::GaussLegendre;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::floored_ln;
use crate::process::{dense_size, joint_rate_dense};
use crate::rng::rng_from_seed;
use crate::schedule::MaskingSchedule;
use crate::sequence::{SequenceSpec, SequenceState};

/// Most mask patterns exact mode will enumerate.
pub const MAX_PATTERNS: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LossMode {
    /// Gauss-Legendre in `t` over `[t_min, 1 - t_min]`, exact sums elsewhere.
    Exact { nodes: usize, t_min: f64 },
    /// `t ~ U[t_min, 1 - t_min]`, `x ~ q(x | x0)`.
    MonteCarlo { samples: usize, seed: u64, t_min: f64 },
}

impl LossMode {
    pub const DEFAULT_NODES: usize = 64;
    pub const DEFAULT_T_MIN: f64 = 1e-3;

    pub fn exact() -> Self {
        Self::Exact { nodes: Self::DEFAULT_NODES, t_min: 0.0 }
    }

    pub fn monte_carlo(samples: usize, seed: u64) -> Self {
        Self::MonteCarlo { samples, seed, t_min: Self::DEFAULT_T_MIN }
    }

    pub fn t_min(&self) -> f64 {
        match *self {
            Self::Exact { t_min, .. } | Self::MonteCarlo { t_min, .. } => t_min,
        }
    }

    /// The exact counterpart integrating over the same window.
    pub fn exact_over_same_window(&self) -> Self {
        Self::Exact { nodes: Self::DEFAULT_NODES, t_min: self.t_min() }
    }

    fn window(&self) -> Result<(f64, f64)> {
        let t_min = self.t_min();
        if !(0.0..0.5).contains(&t_min) {
            return Err(Error::Domain(format!("t_min {t_min} outside [0, 0.5)")));
        }
        Ok((t_min, 1.0 - t_min))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub value: f64,
    /// Monte Carlo standard error; zero for exact evaluation.
    pub std_error: f64,
    pub n_samples: usize,
}

impl LossEstimate {
    fn exact(value: f64) -> Self {
        Self { value, std_error: 0.0, n_samples: 0 }
    }

    fn from_draws(draws: &[f64]) -> Self {
        let n = draws.len();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self { value: mean, std_error: (var / n as f64).sqrt(), n_samples: n }
    }

    /// Merges independent shards by sample-weighted averaging.
    pub fn merge(parts: &[LossEstimate]) -> LossEstimate {
        let n: usize = parts.iter().map(|p| p.n_samples).sum();
        if n == 0 {
            return LossEstimate::exact(0.0);
        }
        let value = parts.iter().map(|p| p.value * p.n_samples as f64).sum::<f64>() / n as f64;
        let var = parts.iter().map(|p| (p.std_error * p.n_samples as f64).powi(2)).sum::<f64>() / (n as f64).powi(2);
        LossEstimate { value, std_error: var.sqrt(), n_samples: n }
    }
}

/// All three simplified estimators computed on the same draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub masked: LossEstimate,
    pub unmasked: LossEstimate,
    pub hd: LossEstimate,
}

fn check_clean(x0: &SequenceState) -> Result<()> {
    if x0.has_mask() {
        return Err(Error::InvalidInput("x0 must be a clean sequence".into()));
    }
    Ok(())
}

fn check_hollow<D: Denoiser + ?Sized>(denoiser: &D) -> Result<()> {
    if !denoiser.is_hollow() {
        return Err(Error::Contract("the unmasked-position estimator needs a hollow denoiser".into()));
    }
    Ok(())
}

/// `(sum over masked d of log p(x0^d | x), sum over unmasked d of log p(x0^d | M^d x))`.
fn log_prob_sums(out: &DenoiserOutput, x: &SequenceState, x0: &SequenceState) -> (f64, f64) {
    let mut masked = 0.0;
    let mut unmasked = 0.0;
    for d in 0..x.len() {
        let lp = floored_ln(out.prob(d, x0.get(d)));
        if x.is_masked(d) {
            masked += lp;
        } else {
            unmasked += lp;
        }
    }
    (masked, unmasked)
}

fn gauss_legendre(nodes: usize) -> Result<GaussLegendre> {
    let n = std::num::NonZeroUsize::new(nodes).ok_or_else(|| Error::Config("quadrature needs at least one node".into()))?;
    Ok(GaussLegendre::new(n))
}

struct Pattern {
    n_masked: i32,
    masked_sum: f64,
    unmasked_sum: f64,
}

fn enumerate_patterns<D: Denoiser + ?Sized>(denoiser: &D, x0: &SequenceState) -> Result<Vec<Pattern>> {
    let len = x0.len();
    if len >= 17 {
        return Err(Error::Capacity { size: 1u128 << len, limit: MAX_PATTERNS as u128 });
    }
    let mask = x0.spec().mask();
    (0..1usize << len)
        .map(|bits| {
            let mut x = x0.clone();
            for d in 0..len {
                if bits >> d & 1 == 1 {
                    x.set(d, mask);
                }
            }
            let out = denoiser.evaluate(&x, 0.5)?;
            let (masked_sum, unmasked_sum) = log_prob_sums(&out, &x, x0);
            Ok(Pattern { n_masked: bits.count_ones() as i32, masked_sum, unmasked_sum })
        })
        .collect()
}

fn exact_breakdown<D: Denoiser + ?Sized>(
    denoiser: &D,
    x0: &SequenceState,
    schedule: MaskingSchedule,
    nodes: usize,
    window: (f64, f64),
) -> Result<(f64, f64)> {
    let patterns = enumerate_patterns(denoiser, x0)?;
    let len = x0.len() as i32;
    let quad = gauss_legendre(nodes)?;
    // alpha' alpha^{kept} (1-alpha)^{masked-1} per masked term, and
    // alpha' alpha^{kept-1} (1-alpha)^{masked} per unmasked term
    let masked = quad.integrate(window.0, window.1, |t| {
        let a = schedule.alpha_unchecked(t);
        let ap = schedule.alpha_prime_unchecked(t);
        patterns
            .iter()
            .filter(|p| p.n_masked > 0)
            .map(|p| ap * a.powi(len - p.n_masked) * (1.0 - a).powi(p.n_masked - 1) * p.masked_sum)
            .sum()
    });
    let unmasked = quad.integrate(window.0, window.1, |t| {
        let a = schedule.alpha_unchecked(t);
        let ap = schedule.alpha_prime_unchecked(t);
        patterns
            .iter()
            .filter(|p| p.n_masked < len)
            .map(|p| ap * a.powi(len - p.n_masked - 1) * (1.0 - a).powi(p.n_masked) * p.unmasked_sum)
            .sum()
    });
    Ok((masked, unmasked))
}

fn mc_draws<D: Denoiser + ?Sized>(
    denoiser: &D,
    x0: &SequenceState,
    schedule: MaskingSchedule,
    samples: usize,
    seed: u64,
    window: (f64, f64),
) -> Result<Vec<(f64, f64)>> {
    if samples == 0 {
        return Err(Error::Config("Monte Carlo mode needs at least one sample".into()));
    }
    let mut rng = rng_from_seed(seed);
    let width = window.1 - window.0;
    let mask = x0.spec().mask();
    (0..samples)
        .map(|_| {
            let t = window.0 + width * rng.random::<f64>();
            let a = schedule.alpha_unchecked(t);
            let ap = schedule.alpha_prime_unchecked(t);
            let mut x = x0.clone();
            for d in 0..x.len() {
                if rng.random::<f64>() >= a {
                    x.set(d, mask);
                }
            }
            let out = denoiser.evaluate(&x, t)?;
            let (ms, us) = log_prob_sums(&out, &x, x0);
            let masked = if x.n_masked() > 0 { width * ap / (1.0 - a) * ms } else { 0.0 };
            let unmasked = if x.n_masked() < x.len() { width * ap / a * us } else { 0.0 };
            Ok((masked, unmasked))
        })
        .collect()
}

/// Evaluates all three simplified forms; in Monte Carlo mode they share
/// every `(t, x)` draw and every denoiser evaluation.
pub fn loss_breakdown<D: Denoiser + ?Sized>(
    denoiser: &D,
    x0: &SequenceState,
    schedule: MaskingSchedule,
    mode: LossMode,
) -> Result<LossBreakdown> {
    check_clean(x0)?;
    check_hollow(denoiser)?;
    let window = mode.window()?;
    match mode {
        LossMode::Exact { nodes, .. } => {
            let (m, u) = exact_breakdown(denoiser, x0, schedule, nodes, window)?;
            Ok(LossBreakdown {
                masked: LossEstimate::exact(m),
                unmasked: LossEstimate::exact(u),
                hd: LossEstimate::exact(0.5 * (m + u)),
            })
        }
        LossMode::MonteCarlo { samples, seed, .. } => {
            let draws = mc_draws(denoiser, x0, schedule, samples, seed, window)?;
            let m: Vec<f64> = draws.iter().map(|d| d.0).collect();
            let u: Vec<f64> = draws.iter().map(|d| d.1).collect();
            let h: Vec<f64> = draws.iter().map(|d| 0.5 * (d.0 + d.1)).collect();
            Ok(LossBreakdown {
                masked: LossEstimate::from_draws(&m),
                unmasked: LossEstimate::from_draws(&u),
                hd: LossEstimate::from_draws(&h),
            })
        }
    }
}

pub fn loss_masked<D: Denoiser + ?Sized>(
    denoiser: &D,
    x0: &SequenceState,
    schedule: MaskingSchedule,
    mode: LossMode,
) -> Result<LossEstimate> {
    check_clean(x0)?;
    let window = mode.window()?;
    match mode {
        LossMode::Exact { nodes, .. } => {
            // the masked form never reads rows of unmasked positions, so any
            // denoiser qualifies here
            let (m, _) = exact_breakdown(denoiser, x0, schedule, nodes, window)?;
            Ok(LossEstimate::exact(m))
        }
        LossMode::MonteCarlo { samples, seed, .. } => {
            let draws = mc_draws(denoiser, x0, schedule, samples, seed, window)?;
            Ok(LossEstimate::from_draws(&draws.iter().map(|d| d.0).collect::<Vec<_>>()))
        }
    }
}

pub fn loss_unmasked<D: Denoiser + ?Sized>(
    denoiser: &D,
    x0: &SequenceState,
    schedule: MaskingSchedule,
    mode: LossMode,
) -> Result<LossEstimate> {
    Ok(loss_breakdown(denoiser, x0, schedule, mode)?.unmasked)
}

pub fn loss_hd<D: Denoiser + ?Sized>(
    denoiser: &D,
    x0: &SequenceState,
    schedule: MaskingSchedule,
    mode: LossMode,
) -> Result<LossEstimate> {
    Ok(loss_breakdown(denoiser, x0, schedule, mode)?.hd)
}

/// Concrete score between a masked state and its unmasking at `d`:
/// `alpha/(1-alpha) * p(x^d | M^d(x))`.
pub fn score_from_probability(alpha: f64, prob: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::SingularSchedule { t: f64::NAN, alpha });
    }
    Ok(alpha / (1.0 - alpha) * prob)
}

/// `s_t(M^d(x))_x` from one denoiser evaluation at `M^d(x)`.
pub fn score_from_denoiser<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &SequenceState,
    d: usize,
    t: f64,
    schedule: MaskingSchedule,
) -> Result<f64> {
    if x.is_masked(d) {
        return Err(Error::InvalidInput(format!("position {d} is masked")));
    }
    let alpha = schedule.alpha(t)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::SingularSchedule { t, alpha });
    }
    let out = denoiser.evaluate(&x.masked_at(d), t)?;
    score_from_probability(alpha, out.prob(d, x.get(d)))
}

/// Largest `S` and `D` accepted by [`loss_ctmc_dense`].
pub const CTMC_DENSE_MAX: usize = 3;

/// The general CTMC bound with learned reverse rates
/// `R~(y, x) = R(x, y) s(y)_x`, summed over all neighbors of every state
/// and weighted by exact `q(y | x0)`:
///
/// `int E_{q(y|x0)} sum_{x != y} [ R~(y, x) - R(x, y) q(x|x0)/q(y|x0) log R~(y, x) ] dt`.
///
/// Only exact mode is supported.
pub fn loss_ctmc_dense<D: Denoiser + ?Sized>(
    denoiser: &D,
    x0: &SequenceState,
    schedule: MaskingSchedule,
    mode: LossMode,
) -> Result<LossEstimate> {
    check_clean(x0)?;
    let spec = x0.spec();
    if spec.len > CTMC_DENSE_MAX || spec.vocab_size > CTMC_DENSE_MAX {
        return Err(Error::Capacity {
            size: (spec.n_symbols() as u128).pow(spec.len as u32),
            limit: ((CTMC_DENSE_MAX + 1) as u128).pow(CTMC_DENSE_MAX as u32),
        });
    }
    let LossMode::Exact { nodes, .. } = mode else {
        return Err(Error::Config("the dense CTMC bound is exact-only".into()));
    };
    let window = mode.window()?;
    let n = dense_size(spec)?;
    // denoiser outputs are time independent; evaluate once per state
    let outputs: Vec<DenoiserOutput> = (0..n)
        .map(|i| denoiser.evaluate(&SequenceState::from_dense_index(spec, i), 0.5))
        .collect::<Result<_>>()?;
    let states: Vec<SequenceState> = (0..n).map(|i| SequenceState::from_dense_index(spec, i)).collect();
    let quad = gauss_legendre(nodes)?;
    let mut failure = None;
    let value = quad.integrate(window.0, window.1, |t| match ctmc_integrand(&states, &outputs, x0, spec, schedule, t) {
        Ok(v) => v,
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(LossEstimate::exact(value)),
    }
}

fn conditional_prob(y: &SequenceState, x0: &SequenceState, alpha: f64) -> f64 {
    (0..y.len())
        .map(|d| {
            if y.is_masked(d) {
                1.0 - alpha
            } else if y.get(d) == x0.get(d) {
                alpha
            } else {
                0.0
            }
        })
        .product()
}

fn ctmc_integrand(
    states: &[SequenceState],
    outputs: &[DenoiserOutput],
    x0: &SequenceState,
    spec: SequenceSpec,
    schedule: MaskingSchedule,
    t: f64,
) -> Result<f64> {
    let rate = joint_rate_dense(spec, t, schedule)?;
    let alpha = schedule.alpha(t)?;
    let q: Vec<f64> = states.iter().map(|y| conditional_prob(y, x0, alpha)).collect();
    let mut total = 0.0;
    for (yi, y) in states.iter().enumerate() {
        if q[yi] == 0.0 {
            continue;
        }
        for (xi, x) in states.iter().enumerate() {
            let r = rate.entries[(xi, yi)];
            if xi == yi || r <= 0.0 {
                continue;
            }
            // x -> y masks exactly one position d
            let d = (0..spec.len).find(|&d| x.get(d) != y.get(d)).expect("neighbors differ");
            let prob = outputs[yi].prob(d, x.get(d));
            let learned = r * score_from_probability(alpha, prob)?;
            let log_learned = (r * score_from_probability(alpha, prob.max(crate::PROB_FLOOR))?).ln();
            total += q[yi] * learned - r * q[xi] * log_learned;
        }
    }
    Ok(total)
}
