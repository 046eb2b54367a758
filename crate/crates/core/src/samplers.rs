//! Predictor and corrector steps for the masked backward process, and the
//! full generation loop with function-evaluation accounting.
//!
//! Every public `*_step` function performs exactly one denoiser evaluation.
//! The `apply_*` variants take an already computed [`DenoiserOutput`] so a
//! caller can account for evaluations itself.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::floored_ln;
use crate::rng::{categorical, gumbel, rng_from_seed, SamplerRng};
use crate::schedule::MaskingSchedule;
use crate::sequence::{SequenceSpec, SequenceState, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Ancestral,
    TauLeaping,
    OneAtATime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectorKind {
    None,
    ForwardBackward,
    Informed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    /// `log(alpha_t p(x^d | x^{\d}))`
    Plain,
    /// `log p(x^d | .) - max_{i != x^d} log p(i | .)`
    #[default]
    Margin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgmaxScope {
    /// Only masked positions are filled in.
    #[default]
    MaskedOnly,
    /// Every position is replaced by its row argmax.
    AllPositions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub predictor: PredictorKind,
    /// Number of predictor steps `P`.
    pub steps: usize,
    pub corrector: CorrectorKind,
    /// Corrector steps `C` after each predictor step once `t <= t_c`.
    pub corrector_steps: usize,
    /// Positions resampled in parallel per informed corrector step.
    pub k: usize,
    /// Gumbel temperature.
    pub tau: f64,
    pub confidence: Confidence,
    pub t_c: f64,
    pub t_min: f64,
    /// Forward-backward corrector step size.
    pub h_c: f64,
    pub final_argmax: bool,
    pub argmax_scope: ArgmaxScope,
    pub schedule: MaskingSchedule,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            predictor: PredictorKind::Ancestral,
            steps: 32,
            corrector: CorrectorKind::None,
            corrector_steps: 1,
            k: 1,
            tau: 1.0,
            confidence: Confidence::Margin,
            t_c: 0.9,
            t_min: 1e-3,
            h_c: 1.0,
            final_argmax: true,
            argmax_scope: ArgmaxScope::MaskedOnly,
            schedule: MaskingSchedule::Cosine,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, spec: SequenceSpec) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps < 1 {
            return bad("at least one predictor step is required".into());
        }
        if !(self.t_min > 0.0 && self.t_min < self.t_c && self.t_c <= 1.0) {
            return bad(format!("need 0 < t_min < t_c <= 1, got t_min = {}, t_c = {}", self.t_min, self.t_c));
        }
        if self.corrector == CorrectorKind::Informed && !(1..=spec.len).contains(&self.k) {
            return bad(format!("k = {} outside [1, {}]", self.k, spec.len));
        }
        if !(self.tau >= 0.0) {
            return bad(format!("tau = {} must be >= 0", self.tau));
        }
        if !(self.h_c >= 0.0) {
            return bad(format!("h_c = {} must be >= 0", self.h_c));
        }
        Ok(())
    }

    /// Predictor steps whose end time is at or below `t_c`.
    pub fn active_corrector_rounds(&self) -> usize {
        if self.corrector == CorrectorKind::None {
            return 0;
        }
        (1..=self.steps).filter(|&i| self.time_after(i) <= self.t_c).count()
    }

    /// Denoiser evaluations `generate` will spend.
    pub fn expected_nfe(&self) -> usize {
        let per_round = if self.corrector == CorrectorKind::None { 0 } else { self.corrector_steps };
        self.steps + self.active_corrector_rounds() * per_round + usize::from(self.final_argmax)
    }

    fn step_size(&self) -> f64 {
        (1.0 - self.t_min) / self.steps as f64
    }

    /// Time after `i` predictor steps on the uniform grid from 1 to `t_min`.
    pub fn time_after(&self, i: usize) -> f64 {
        if i >= self.steps {
            self.t_min
        } else {
            1.0 - i as f64 * self.step_size()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAction {
    Predictor,
    Corrector,
    FinalArgmax,
}

/// One record per denoiser evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub action: StepAction,
    pub changed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub sample: SequenceState,
    pub nfe: usize,
    /// Masks left in the sample (nonzero only without a final argmax).
    pub residual_masks: usize,
    pub trace: Option<Vec<StepRecord>>,
}

fn changed_positions(before: &SequenceState, after: &SequenceState) -> Vec<usize> {
    (0..before.len()).filter(|&d| before.get(d) != after.get(d)).collect()
}

fn sample_row<R: Rng + ?Sized>(out: &DenoiserOutput, d: usize, rng: &mut R) -> Token {
    categorical(rng, out.row(d)) as Token
}

fn check_step(t: f64, dt: f64) -> Result<()> {
    if !(dt >= 0.0) || !(t - dt >= 0.0) || t > 1.0 {
        return Err(Error::Domain(format!("invalid step from t = {t} by dt = {dt}")));
    }
    Ok(())
}

/// Probability that a masked position at `t` is unmasked by `t - dt` under
/// the exact backward conditional: `(alpha_{t-dt} - alpha_t) / (1 - alpha_t)`.
pub fn ancestral_unmask_prob(t: f64, dt: f64, schedule: MaskingSchedule) -> Result<f64> {
    check_step(t, dt)?;
    let a_t = schedule.alpha(t)?;
    let a_s = schedule.alpha(t - dt)?;
    if a_t >= 1.0 {
        return Err(Error::SingularSchedule { t, alpha: a_t });
    }
    Ok(((a_s - a_t) / (1.0 - a_t)).clamp(0.0, 1.0))
}

pub fn apply_ancestral<R: Rng + ?Sized>(
    x: &SequenceState,
    t: f64,
    dt: f64,
    out: &DenoiserOutput,
    schedule: MaskingSchedule,
    rng: &mut R,
) -> Result<SequenceState> {
    if !x.has_mask() {
        check_step(t, dt)?;
        return Ok(x.clone());
    }
    let p = ancestral_unmask_prob(t, dt, schedule)?;
    let mut next = x.clone();
    for d in x.mask_positions() {
        if rng.random::<f64>() < p {
            next.set(d, sample_row(out, d, rng));
        }
    }
    Ok(next)
}

pub fn ancestral_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x: &SequenceState,
    t: f64,
    dt: f64,
    denoiser: &D,
    schedule: MaskingSchedule,
    rng: &mut R,
) -> Result<SequenceState> {
    let out = denoiser.evaluate(x, t)?;
    apply_ancestral(x, t, dt, &out, schedule, rng)
}

/// Total backward unmasking rate of one masked position,
/// `beta(t) alpha_t / (1 - alpha_t) = -alpha'_t / (1 - alpha_t)`.
pub fn unmask_rate(t: f64, schedule: MaskingSchedule) -> Result<f64> {
    let v = schedule.eval(t)?;
    if v.alpha >= 1.0 {
        return Err(Error::SingularSchedule { t, alpha: v.alpha });
    }
    Ok(-v.alpha_prime / (1.0 - v.alpha))
}

/// Holds the rate at time `t` fixed over `[t - dt, t)`. A masked position
/// can jump at most once, so several firings collapse to one draw.
pub fn apply_tau_leaping<R: Rng + ?Sized>(
    x: &SequenceState,
    t: f64,
    dt: f64,
    out: &DenoiserOutput,
    schedule: MaskingSchedule,
    rng: &mut R,
) -> Result<SequenceState> {
    check_step(t, dt)?;
    if !x.has_mask() || dt == 0.0 {
        return Ok(x.clone());
    }
    let fire = 1.0 - (-unmask_rate(t, schedule)? * dt).exp();
    let mut next = x.clone();
    for d in x.mask_positions() {
        if rng.random::<f64>() < fire {
            next.set(d, sample_row(out, d, rng));
        }
    }
    Ok(next)
}

pub fn tau_leaping_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x: &SequenceState,
    t: f64,
    dt: f64,
    denoiser: &D,
    schedule: MaskingSchedule,
    rng: &mut R,
) -> Result<SequenceState> {
    let out = denoiser.evaluate(x, t)?;
    apply_tau_leaping(x, t, dt, &out, schedule, rng)
}

pub fn apply_one_at_a_time<R: Rng + ?Sized>(x: &SequenceState, out: &DenoiserOutput, rng: &mut R) -> Result<SequenceState> {
    let masked = x.mask_positions();
    if masked.is_empty() {
        return Err(Error::NoOp("no masked position to unmask"));
    }
    let d = masked[rng.random_range(0..masked.len())];
    let mut next = x.clone();
    next.set(d, sample_row(out, d, rng));
    Ok(next)
}

/// Unmasks one uniformly chosen masked position.
pub fn one_at_a_time_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x: &SequenceState,
    denoiser: &D,
    rng: &mut R,
) -> Result<SequenceState> {
    if !x.has_mask() {
        return Err(Error::NoOp("no masked position to unmask"));
    }
    let out = denoiser.evaluate(x, 0.0)?;
    apply_one_at_a_time(x, &out, rng)
}

/// Per-position probabilities of the forward-backward corrector over a
/// step of size `h_c`: `(re-mask an unmasked token, unmask a masked one)`.
pub fn fb_corrector_probs(t: f64, h_c: f64, schedule: MaskingSchedule) -> Result<(f64, f64)> {
    if !(h_c >= 0.0) {
        return Err(Error::Domain(format!("corrector step size {h_c} < 0")));
    }
    let beta = schedule.beta(t)?;
    let remask = 1.0 - (-beta * h_c).exp();
    let unmask = 1.0 - (-unmask_rate(t, schedule)? * h_c).exp();
    Ok((remask, unmask))
}

/// Tau-leap of the forward-plus-backward generator for duration `h_c`.
pub fn apply_fb_corrector<R: Rng + ?Sized>(
    x: &SequenceState,
    t: f64,
    h_c: f64,
    out: &DenoiserOutput,
    schedule: MaskingSchedule,
    rng: &mut R,
) -> Result<SequenceState> {
    let (remask, unmask) = fb_corrector_probs(t, h_c, schedule)?;
    let mask = x.spec().mask();
    let mut next = x.clone();
    for d in 0..x.len() {
        if x.is_masked(d) {
            if rng.random::<f64>() < unmask {
                next.set(d, sample_row(out, d, rng));
            }
        } else if rng.random::<f64>() < remask {
            next.set(d, mask);
        }
    }
    Ok(next)
}

pub fn fb_corrector_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x: &SequenceState,
    t: f64,
    h_c: f64,
    denoiser: &D,
    schedule: MaskingSchedule,
    rng: &mut R,
) -> Result<SequenceState> {
    if !(h_c >= 0.0) {
        return Err(Error::Domain(format!("corrector step size {h_c} < 0")));
    }
    let out = denoiser.evaluate(x, t)?;
    apply_fb_corrector(x, t, h_c, &out, schedule, rng)
}

/// Confidence of every unmasked position in its current token; masked
/// positions are never scored.
pub fn confidence_scores(
    out: &DenoiserOutput,
    x: &SequenceState,
    t: f64,
    schedule: MaskingSchedule,
    variant: Confidence,
) -> Result<Vec<(usize, f64)>> {
    let log_alpha = match variant {
        Confidence::Plain => schedule.alpha(t)?.ln(),
        Confidence::Margin => 0.0,
    };
    Ok(x.unmasked_positions()
        .into_iter()
        .map(|d| {
            let current = x.get(d) as usize;
            let row = out.row(d);
            let own = floored_ln(row[current]);
            let score = match variant {
                Confidence::Plain => log_alpha + own,
                Confidence::Margin => {
                    let best_other = row
                        .iter()
                        .enumerate()
                        .filter(|&(i, _)| i != current)
                        .map(|(_, &p)| floored_ln(p))
                        .fold(f64::NEG_INFINITY, f64::max);
                    own - best_other
                }
            };
            (d, score)
        })
        .collect())
}

/// Samples `k` distinct positions without replacement with probabilities
/// proportional to `exp(-c / tau)`: rank by `-c + tau * g` with
/// `g ~ Gumbel(0, 1)` and keep the top `k`. With `tau = 0` this picks the
/// `k` least confident positions, ties going to the earlier entry.
pub fn gumbel_top_k<R: Rng + ?Sized>(scores: &[(usize, f64)], k: usize, tau: f64, rng: &mut R) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Selection { k, available: scores.len() });
    }
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!("temperature {tau} < 0")));
    }
    let mut ranked: Vec<(f64, usize)> = scores
        .iter()
        .map(|&(d, c)| {
            let noise = if tau > 0.0 { tau * gumbel(rng) } else { 0.0 };
            (-c + noise, d)
        })
        .collect();
    // stable: equal keys keep input order
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(ranked.into_iter().take(k).map(|(_, d)| d).collect())
}

/// Informed corrector update: pick `k` low-confidence unmasked positions
/// and resample each from its own row, all in parallel from the same
/// evaluation. The mask configuration is never changed.
#[allow(clippy::too_many_arguments)]
pub fn apply_informed_corrector<R: Rng + ?Sized>(
    x: &SequenceState,
    t: f64,
    k: usize,
    tau: f64,
    variant: Confidence,
    out: &DenoiserOutput,
    schedule: MaskingSchedule,
    rng: &mut R,
) -> Result<SequenceState> {
    let scores = confidence_scores(out, x, t, schedule, variant)?;
    if scores.is_empty() {
        return Err(Error::NoOp("no unmasked position to correct"));
    }
    let picked = gumbel_top_k(&scores, k.min(scores.len()), tau, rng)?;
    let mut next = x.clone();
    for d in picked {
        next.set(d, sample_row(out, d, rng));
    }
    Ok(next)
}

#[allow(clippy::too_many_arguments)]
pub fn informed_corrector_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x: &SequenceState,
    t: f64,
    k: usize,
    tau: f64,
    variant: Confidence,
    denoiser: &D,
    schedule: MaskingSchedule,
    rng: &mut R,
) -> Result<SequenceState> {
    if !denoiser.is_hollow() {
        return Err(Error::Contract("the informed corrector needs a hollow denoiser".into()));
    }
    if !x.tokens().iter().any(|&v| v != x.spec().mask()) {
        return Err(Error::NoOp("no unmasked position to correct"));
    }
    let out = denoiser.evaluate(x, t)?;
    apply_informed_corrector(x, t, k, tau, variant, &out, schedule, rng)
}

pub fn apply_final_argmax(x: &SequenceState, out: &DenoiserOutput, scope: ArgmaxScope) -> SequenceState {
    let mut next = x.clone();
    for d in 0..x.len() {
        if scope == ArgmaxScope::AllPositions || x.is_masked(d) {
            next.set(d, out.argmax(d));
        }
    }
    next
}

/// Fills positions with their most likely token; ties go to the lowest index.
pub fn final_argmax<D: Denoiser + ?Sized>(x: &SequenceState, denoiser: &D, t: f64, scope: ArgmaxScope) -> Result<SequenceState> {
    let out = denoiser.evaluate(x, t)?;
    Ok(apply_final_argmax(x, &out, scope))
}

/// Runs the full backward process from the all-mask sequence with the
/// configured seed.
pub fn generate<D: Denoiser + ?Sized>(
    config: &SamplerConfig,
    denoiser: &D,
    spec: SequenceSpec,
    trace: bool,
) -> Result<GenerationReport> {
    let mut rng = rng_from_seed(config.seed);
    generate_with_rng(config, denoiser, spec, trace, &mut rng)
}

pub fn generate_with_rng<D: Denoiser + ?Sized>(
    config: &SamplerConfig,
    denoiser: &D,
    spec: SequenceSpec,
    trace: bool,
    rng: &mut SamplerRng,
) -> Result<GenerationReport> {
    config.validate(spec)?;
    if config.corrector == CorrectorKind::Informed && !denoiser.is_hollow() {
        return Err(Error::Contract("the informed corrector needs a hollow denoiser".into()));
    }
    let schedule = config.schedule;
    let mut x = SequenceState::all_masked(spec);
    let mut nfe = 0;
    let mut records = trace.then(Vec::new);
    let log = |records: &mut Option<Vec<StepRecord>>, t, action, before: &SequenceState, after: &SequenceState| {
        if let Some(r) = records.as_mut() {
            r.push(StepRecord { t, action, changed: changed_positions(before, after) });
        }
    };

    for step in 0..config.steps {
        let t = config.time_after(step);
        let t_next = config.time_after(step + 1);
        let out = denoiser.evaluate(&x, t)?;
        nfe += 1;
        let next = match config.predictor {
            PredictorKind::Ancestral => apply_ancestral(&x, t, t - t_next, &out, schedule, rng)?,
            PredictorKind::TauLeaping => apply_tau_leaping(&x, t, t - t_next, &out, schedule, rng)?,
            PredictorKind::OneAtATime => match apply_one_at_a_time(&x, &out, rng) {
                Ok(n) => n,
                Err(Error::NoOp(_)) => x.clone(),
                Err(e) => return Err(e),
            },
        };
        log(&mut records, t, StepAction::Predictor, &x, &next);
        x = next;

        if config.corrector == CorrectorKind::None || t_next > config.t_c {
            continue;
        }
        for _ in 0..config.corrector_steps {
            let out = denoiser.evaluate(&x, t_next)?;
            nfe += 1;
            let next = match config.corrector {
                CorrectorKind::ForwardBackward => apply_fb_corrector(&x, t_next, config.h_c, &out, schedule, rng)?,
                CorrectorKind::Informed => {
                    match apply_informed_corrector(&x, t_next, config.k, config.tau, config.confidence, &out, schedule, rng) {
                        Ok(n) => n,
                        Err(Error::NoOp(_)) => x.clone(),
                        Err(e) => return Err(e),
                    }
                }
                CorrectorKind::None => unreachable!(),
            };
            log(&mut records, t_next, StepAction::Corrector, &x, &next);
            x = next;
        }
    }

    if config.final_argmax {
        let out = denoiser.evaluate(&x, config.t_min)?;
        nfe += 1;
        let next = apply_final_argmax(&x, &out, config.argmax_scope);
        log(&mut records, config.t_min, StepAction::FinalArgmax, &x, &next);
        x = next;
    }

    Ok(GenerationReport { residual_masks: x.n_masked(), sample: x, nfe, trace: records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::OracleDenoiser;
    use crate::hmm::{error_rate, StickyChainModel};
    use crate::process::exact_marginals;
    use ndarray::Array2;

    struct Fixed(Array2<f64>);
    impl Denoiser for Fixed {
        fn evaluate(&self, _x: &SequenceState, _t: f64) -> Result<DenoiserOutput> {
            Ok(DenoiserOutput::new(self.0.clone()))
        }
    }

    fn uniform_out(len: usize, s: usize) -> DenoiserOutput {
        DenoiserOutput::new(Array2::from_elem((len, s), 1.0 / s as f64))
    }

    fn three_sigma(p: f64, n: usize) -> f64 {
        3.0 * (p * (1.0 - p) / n as f64).sqrt()
    }

    #[test]
    fn ancestral_edge_cases() {
        let spec = SequenceSpec::new(3, 20).unwrap();
        let x = SequenceState::all_masked(spec);
        let out = uniform_out(20, 3);
        let mut rng = rng_from_seed(1);
        let lin = MaskingSchedule::Linear;
        assert_eq!(apply_ancestral(&x, 0.5, 0.0, &out, lin, &mut rng).unwrap(), x);
        let all = apply_ancestral(&x, 0.5, 0.5, &out, lin, &mut rng).unwrap();
        assert!(!all.has_mask());
        assert!(apply_ancestral(&x, 0.2, 0.5, &out, lin, &mut rng).is_err());
    }

    #[test]
    fn ancestral_unmask_fraction() {
        let lin = MaskingSchedule::Linear;
        assert!((ancestral_unmask_prob(0.5, 0.25, lin).unwrap() - 0.5).abs() < 1e-15);
        let n = 100_000;
        let spec = SequenceSpec::new(2, n).unwrap();
        let x = SequenceState::all_masked(spec);
        let out = uniform_out(n, 2);
        let mut rng = rng_from_seed(2);
        let next = apply_ancestral(&x, 0.5, 0.25, &out, lin, &mut rng).unwrap();
        let frac = 1.0 - next.n_masked() as f64 / n as f64;
        assert!((frac - 0.5).abs() <= three_sigma(0.5, n), "{frac}");
    }

    #[test]
    fn tau_leaping_rates() {
        let cos = MaskingSchedule::Cosine;
        let spec = SequenceSpec::new(2, 1).unwrap();
        let x = SequenceState::all_masked(spec);
        let out = uniform_out(1, 2);
        let mut rng = rng_from_seed(3);
        assert_eq!(apply_tau_leaping(&x, 0.6, 0.0, &out, cos, &mut rng).unwrap(), x);
        let big = apply_tau_leaping(&x, 1e-9, 1e-9, &out, MaskingSchedule::Linear, &mut rng).unwrap();
        assert!(!big.has_mask());
        let (t, dt) = (0.6, 0.1);
        let p = 1.0 - (-unmask_rate(t, cos).unwrap() * dt).exp();
        let n = 100_000;
        let hits = (0..n).filter(|_| !apply_tau_leaping(&x, t, dt, &out, cos, &mut rng).unwrap().has_mask()).count();
        let freq = hits as f64 / n as f64;
        assert!((freq - p).abs() <= three_sigma(p, n), "{freq} vs {p}");
    }

    #[test]
    fn one_at_a_time_changes_one_position() {
        let m = StickyChainModel::standard();
        let oracle = OracleDenoiser::new(m.clone());
        let spec = m.spec(16).unwrap();
        let mut rng = rng_from_seed(4);
        let mut x = SequenceState::all_masked(spec);
        for _ in 0..16 {
            let next = one_at_a_time_step(&x, &oracle, &mut rng).unwrap();
            assert_eq!(next.hamming(&x), 1);
            x = next;
        }
        assert!(!x.has_mask());
        assert_eq!(error_rate(&[x.clone()], &m).unwrap(), 0.0);
        assert!(matches!(one_at_a_time_step(&x, &oracle, &mut rng), Err(Error::NoOp(_))));
    }

    #[test]
    fn fb_corrector_remask_mean() {
        let cos = MaskingSchedule::Cosine;
        let spec = SequenceSpec::new(2, 10).unwrap();
        let x = SequenceState::new(spec, vec![0; 10]).unwrap();
        let out = uniform_out(10, 2);
        let mut rng = rng_from_seed(5);
        assert_eq!(apply_fb_corrector(&x, 0.5, 0.0, &out, cos, &mut rng).unwrap(), x);
        assert!(matches!(fb_corrector_probs(0.5, -1.0, cos), Err(Error::Domain(_))));
        let (t, h) = (0.5, 0.3);
        let p = 1.0 - (-cos.beta(t).unwrap() * h).exp();
        let trials = 10_000;
        let total: usize = (0..trials).map(|_| apply_fb_corrector(&x, t, h, &out, cos, &mut rng).unwrap().n_masked()).sum();
        let mean = total as f64 / trials as f64;
        let sd = (10.0 * p * (1.0 - p) / trials as f64).sqrt();
        assert!((mean - 10.0 * p).abs() <= 3.0 * sd, "{mean} vs {}", 10.0 * p);
    }

    /// Exact one-step kernel of the forward-backward corrector applied to
    /// the exact marginal; returns the total-variation distance moved.
    fn fb_kernel_tv(h_c: f64) -> f64 {
        let m = StickyChainModel::new(2, 0.8).unwrap();
        let spec = m.spec(2).unwrap();
        let cos = MaskingSchedule::Cosine;
        let t = 0.5;
        let q = exact_marginals(spec, &m.dense_prior(2).unwrap(), cos.alpha(t).unwrap()).unwrap();
        let oracle = OracleDenoiser::new(m);
        let (remask, unmask) = fb_corrector_probs(t, h_c, cos).unwrap();
        let n = q.len();
        let mut next = vec![0.0; n];
        for xi in 0..n {
            let x = SequenceState::from_dense_index(spec, xi);
            let out = oracle.evaluate(&x, t).unwrap();
            for yi in 0..n {
                let y = SequenceState::from_dense_index(spec, yi);
                let mut p = 1.0;
                for d in 0..2 {
                    p *= match (x.is_masked(d), y.is_masked(d)) {
                        (false, true) => remask,
                        (false, false) if x.get(d) == y.get(d) => 1.0 - remask,
                        (false, false) => 0.0,
                        (true, true) => 1.0 - unmask,
                        (true, false) => unmask * out.prob(d, y.get(d)),
                    };
                }
                next[yi] += q[xi] * p;
            }
        }
        0.5 * q.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    #[test]
    fn fb_kernel_nearly_stationary() {
        let tvs: Vec<f64> = [0.05, 0.01, 0.001].iter().map(|&h| fb_kernel_tv(h)).collect();
        assert!(tvs[0] <= 0.02, "{tvs:?}");
        assert!(tvs[1] < tvs[0] && tvs[2] < tvs[1], "{tvs:?}");
    }

    #[test]
    fn margin_confidence_examples() {
        let spec = SequenceSpec::new(3, 2).unwrap();
        let x = SequenceState::new(spec, vec![0, 1]).unwrap();
        let out = DenoiserOutput::new(Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 0.5, 0.5, 0.0]).unwrap());
        let c = confidence_scores(&out, &x, 0.5, MaskingSchedule::Linear, Confidence::Margin).unwrap();
        assert!((c[0].1 - (0.0 - crate::PROB_FLOOR.ln())).abs() < 1e-12);
        assert_eq!(c[1].1, 0.0);
        let plain = confidence_scores(&out, &x, 0.5, MaskingSchedule::Linear, Confidence::Plain).unwrap();
        assert!((plain[1].1 - (0.25f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn oracle_margin_flags_impossible_token() {
        let m = StickyChainModel::standard();
        let mut tokens = vec![4; 10];
        tokens[0] = 0;
        tokens[1] = 2;
        let x = SequenceState::new(m.spec(10).unwrap(), tokens).unwrap();
        let out = OracleDenoiser::new(m).evaluate(&x, 0.5).unwrap();
        let c = confidence_scores(&out, &x, 0.5, MaskingSchedule::Cosine, Confidence::Margin).unwrap();
        let pos2 = c.iter().find(|(d, _)| *d == 1).unwrap().1;
        assert!((pos2 - (crate::PROB_FLOOR.ln() - 0.9f64.ln())).abs() < 1e-12);
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn gumbel_top_k_edge_cases() {
        let mut rng = rng_from_seed(6);
        let scores = vec![(0, 1.0), (3, -2.0), (5, 0.5), (7, -2.0)];
        let mut all = gumbel_top_k(&scores, 4, 1.0, &mut rng).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 3, 5, 7]);
        assert_eq!(gumbel_top_k(&scores, 3, 0.0, &mut rng).unwrap(), vec![3, 7, 5]);
        assert!(matches!(gumbel_top_k(&scores, 5, 1.0, &mut rng), Err(Error::Selection { .. })));
    }

    #[test]
    fn informed_corrector_fixes_point_mass() {
        let spec = SequenceSpec::new(3, 4).unwrap();
        let x = SequenceState::new(spec, vec![0, 2, 3, 1]).unwrap();
        let mut table = Array2::zeros((4, 3));
        for d in 0..4 {
            table[[d, [0, 2, 0, 1][d]]] = 1.0;
        }
        let fixed = Fixed(table);
        let mut rng = rng_from_seed(7);
        for _ in 0..50 {
            let y = informed_corrector_step(&x, 0.5, 3, 1.0, Confidence::Margin, &fixed, MaskingSchedule::Cosine, &mut rng).unwrap();
            assert_eq!(y, x);
        }
        let empty = SequenceState::all_masked(spec);
        assert!(matches!(
            informed_corrector_step(&empty, 0.5, 1, 1.0, Confidence::Margin, &fixed, MaskingSchedule::Cosine, &mut rng),
            Err(Error::NoOp(_))
        ));
    }

    #[test]
    fn informed_corrector_on_sticky_chain() {
        // x = (0, 2, masked...): both visible positions are impossible given
        // each other and tie in margin, so each is picked about half the
        // time; whichever is picked is redrawn from its oracle row
        let m = StickyChainModel::standard();
        let oracle = OracleDenoiser::new(m.clone());
        let mut tokens = vec![4; 8];
        tokens[0] = 0;
        tokens[1] = 2;
        let x = SequenceState::new(m.spec(8).unwrap(), tokens).unwrap();
        let mut rng = rng_from_seed(8);
        let n = 20_000;
        let (mut picked_second, mut second_to_zero) = (0, 0);
        for _ in 0..n {
            let y = informed_corrector_step(&x, 0.5, 1, 1.0, Confidence::Margin, &oracle, MaskingSchedule::Cosine, &mut rng).unwrap();
            assert_eq!(y.mask_positions(), x.mask_positions());
            if y.get(1) != 2 {
                picked_second += 1;
                assert!(y.get(1) <= 1);
                second_to_zero += usize::from(y.get(1) == 0);
                assert_eq!(y.get(0), 0);
            } else {
                assert!(y.get(0) == 1 || y.get(0) == 2);
            }
        }
        let frac = picked_second as f64 / n as f64;
        assert!((frac - 0.5).abs() < three_sigma(0.5, n));
        let p0 = second_to_zero as f64 / picked_second as f64;
        assert!((p0 - 0.9).abs() < three_sigma(0.9, picked_second));
    }

    #[test]
    fn final_argmax_scopes() {
        let spec = SequenceSpec::new(3, 3).unwrap();
        let x = SequenceState::new(spec, vec![2, 3, 1]).unwrap();
        let out = DenoiserOutput::new(Array2::from_shape_vec((3, 3), vec![0.1, 0.8, 0.1, 0.4, 0.2, 0.4, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap());
        assert_eq!(apply_final_argmax(&x, &out, ArgmaxScope::MaskedOnly).tokens(), &[2, 0, 1]);
        assert_eq!(apply_final_argmax(&x, &out, ArgmaxScope::AllPositions).tokens(), &[1, 0, 0]);
        let clean = SequenceState::new(spec, vec![2, 2, 1]).unwrap();
        assert_eq!(apply_final_argmax(&clean, &out, ArgmaxScope::MaskedOnly), clean);
    }

    #[test]
    fn generate_nfe_and_determinism() {
        let m = StickyChainModel::standard();
        let oracle = OracleDenoiser::new(m.clone());
        let spec = m.spec(32).unwrap();
        let config = SamplerConfig { steps: 8, corrector: CorrectorKind::Informed, corrector_steps: 1, k: 2, seed: 9, ..Default::default() };
        assert_eq!(config.expected_nfe(), 17);
        let a = generate(&config, &oracle, spec, true).unwrap();
        assert_eq!(a.nfe, 17);
        assert_eq!(a.trace.as_ref().unwrap().len(), 17);
        assert!(!a.sample.has_mask());
        assert_eq!(a, generate(&config, &oracle, spec, true).unwrap());

        let late = SamplerConfig { t_c: 0.5, ..config };
        let r = generate(&late, &oracle, spec, false).unwrap();
        assert_eq!(r.nfe, late.expected_nfe());
        assert!(r.nfe < 17);
    }

    #[test]
    fn predictors_never_remask() {
        let m = StickyChainModel::standard();
        let oracle = OracleDenoiser::new(m.clone());
        let spec = m.spec(24).unwrap();
        for predictor in [PredictorKind::Ancestral, PredictorKind::TauLeaping, PredictorKind::OneAtATime] {
            let config = SamplerConfig { predictor, steps: 10, seed: 3, ..Default::default() };
            let r = generate(&config, &oracle, spec, true).unwrap();
            let mut unmasked = [false; 24];
            for rec in r.trace.unwrap() {
                for d in rec.changed {
                    assert!(!unmasked[d] || rec.action == StepAction::FinalArgmax);
                    unmasked[d] = true;
                }
            }
        }
    }

    #[test]
    fn residual_masks_reported_without_argmax() {
        let m = StickyChainModel::standard();
        let oracle = OracleDenoiser::new(m.clone());
        let spec = m.spec(64).unwrap();
        let config = SamplerConfig { predictor: PredictorKind::OneAtATime, steps: 10, final_argmax: false, ..Default::default() };
        let r = generate(&config, &oracle, spec, false).unwrap();
        assert_eq!(r.residual_masks, 54);
        assert_eq!(r.nfe, 10);
    }

    #[test]
    fn config_validation() {
        let spec = SequenceSpec::new(4, 8).unwrap();
        let ok = SamplerConfig::default();
        ok.validate(spec).unwrap();
        for bad in [
            SamplerConfig { steps: 0, ..ok },
            SamplerConfig { t_min: 0.95, ..ok },
            SamplerConfig { corrector: CorrectorKind::Informed, k: 9, ..ok },
            SamplerConfig { tau: -1.0, ..ok },
        ] {
            assert!(matches!(bad.validate(spec), Err(Error::Config(_))));
        }
    }
}
