//! The sticky Markov chain task: each token repeats with probability `p`
//! or advances to `(i + 1) mod S`. Observing a partially masked sequence
//! is inference in a hidden Markov model whose emissions are either the
//! exact token or the mask, so the leave-one-out denoising posterior is
//! available exactly by message passing.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::categorical;
use crate::sequence::{SequenceSpec, SequenceState, Token};

/// Largest `S^D` the enumeration oracle accepts.
pub const MAX_ENUMERATION: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StickyChainModel {
    vocab_size: usize,
    stickiness: f64,
    transition: Array2<f64>,
}

impl StickyChainModel {
    pub fn new(vocab_size: usize, stickiness: f64) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Config(format!("vocab_size must be >= 2, got {vocab_size}")));
        }
        if !(0.0..=1.0).contains(&stickiness) {
            return Err(Error::Config(format!("stickiness {stickiness} outside [0, 1]")));
        }
        let mut transition = Array2::zeros((vocab_size, vocab_size));
        for i in 0..vocab_size {
            transition[[i, i]] = stickiness;
            transition[[i, (i + 1) % vocab_size]] = 1.0 - stickiness;
        }
        Ok(Self { vocab_size, stickiness, transition })
    }

    /// `S = 4`, `p = 0.9`.
    pub fn standard() -> Self {
        Self::new(4, 0.9).expect("valid constants")
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn stickiness(&self) -> f64 {
        self.stickiness
    }

    /// Row-stochastic `A[i][j] = P(next = j | current = i)`.
    pub fn transition(&self) -> &Array2<f64> {
        &self.transition
    }

    pub fn is_legal(&self, from: Token, to: Token) -> bool {
        self.transition[[from as usize, to as usize]] > 0.0
    }

    pub fn spec(&self, len: usize) -> Result<SequenceSpec> {
        SequenceSpec::new(self.vocab_size, len)
    }

    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Result<SequenceState> {
        let spec = self.spec(len)?;
        let mut tokens = Vec::with_capacity(len);
        let mut cur = rng.random_range(0..self.vocab_size);
        tokens.push(cur as Token);
        for _ in 1..len {
            cur = categorical(rng, self.transition.row(cur).as_slice().expect("contiguous"));
            tokens.push(cur as Token);
        }
        SequenceState::new(spec, tokens)
    }

    /// Prior probability of a clean sequence.
    pub fn prob(&self, tokens: &[usize]) -> f64 {
        let mut p = 1.0 / self.vocab_size as f64;
        for w in tokens.windows(2) {
            p *= self.transition[[w[0], w[1]]];
        }
        p
    }

    /// Prior over all `S^D` clean sequences, base-`S` index with the first
    /// position most significant.
    pub fn dense_prior(&self, len: usize) -> Result<Vec<f64>> {
        let n = enumeration_size(self.vocab_size, len)?;
        let mut tokens = vec![0usize; len];
        Ok((0..n)
            .map(|i| {
                decode_base(i, self.vocab_size, &mut tokens);
                self.prob(&tokens)
            })
            .collect())
    }
}

fn enumeration_size(vocab: usize, len: usize) -> Result<usize> {
    let size = (vocab as u128).pow(len as u32);
    if size > MAX_ENUMERATION {
        return Err(Error::Capacity { size, limit: MAX_ENUMERATION });
    }
    Ok(size as usize)
}

fn decode_base(mut index: usize, base: usize, out: &mut [usize]) {
    for slot in out.iter_mut().rev() {
        *slot = index % base;
        index /= base;
    }
}

/// Row `d` is the distribution of the clean token at `d` given every other
/// position of the observed sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTable {
    pub values: Array2<f64>,
}

impl PosteriorTable {
    pub fn row(&self, d: usize) -> &[f64] {
        let s = self.values.ncols();
        &self.values.as_slice().expect("standard layout")[d * s..(d + 1) * s]
    }

    pub fn max_abs_diff(&self, other: &PosteriorTable) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_observation(model: &StickyChainModel, x: &SequenceState) -> Result<()> {
    if x.spec().vocab_size != model.vocab_size {
        return Err(Error::InvalidInput(format!(
            "sequence vocabulary {} does not match model vocabulary {}",
            x.spec().vocab_size,
            model.vocab_size
        )));
    }
    Ok(())
}

fn normalize(v: &mut [f64]) -> f64 {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|p| *p /= total);
    }
    total
}

/// Leave-one-out posterior for every position in `O(D S^2)`.
///
/// A left-to-right pass carries the predictive distribution of position `d`
/// given positions `< d`; a right-to-left pass carries the likelihood of
/// positions `> d` given the token at `d`. Observed tokens are exact
/// emissions, so each message restarts from an indicator at the nearest
/// observation and is renormalized at every step. The local evidence at `d`
/// never enters row `d`.
///
/// If the observed tokens on the two sides of `d` are jointly impossible
/// under the chain, the row falls back to the left predictive distribution
/// (and to uniform when that is empty too).
pub fn leave_one_out_posterior(model: &StickyChainModel, x: &SequenceState) -> Result<PosteriorTable> {
    check_observation(model, x)?;
    let s = model.vocab_size;
    let len = x.len();
    let a = &model.transition;
    let uniform = 1.0 / s as f64;

    // predictive[d] = P(x^d | observations before d)
    let mut predictive = vec![0.0; len * s];
    predictive[..s].fill(uniform);
    let mut carry = vec![0.0; s];
    for d in 1..len {
        if x.is_masked(d - 1) {
            carry.copy_from_slice(&predictive[(d - 1) * s..d * s]);
        } else {
            carry.fill(0.0);
            carry[x.get(d - 1) as usize] = 1.0;
        }
        let row = &mut predictive[d * s..(d + 1) * s];
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = (0..s).map(|i| carry[i] * a[[i, j]]).sum();
        }
        if normalize(row) == 0.0 {
            row.fill(uniform);
        }
    }

    // likelihood[d] ∝ P(observations after d | x^d)
    let mut likelihood = vec![0.0; len * s];
    likelihood[(len - 1) * s..].fill(1.0);
    for d in (0..len.saturating_sub(1)).rev() {
        if x.is_masked(d + 1) {
            carry.copy_from_slice(&likelihood[(d + 1) * s..(d + 2) * s]);
        } else {
            carry.fill(0.0);
            carry[x.get(d + 1) as usize] = 1.0;
        }
        let row = &mut likelihood[d * s..(d + 1) * s];
        for (i, slot) in row.iter_mut().enumerate() {
            *slot = (0..s).map(|j| a[[i, j]] * carry[j]).sum();
        }
        let max = row.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            row.iter_mut().for_each(|v| *v /= max);
        }
    }

    let mut values = Array2::zeros((len, s));
    for d in 0..len {
        let pred = &predictive[d * s..(d + 1) * s];
        let like = &likelihood[d * s..(d + 1) * s];
        let mut row: Vec<f64> = pred.iter().zip(like).map(|(p, l)| p * l).collect();
        if normalize(&mut row) == 0.0 {
            row.copy_from_slice(pred);
        }
        for (i, v) in row.into_iter().enumerate() {
            values[[d, i]] = v;
        }
    }
    Ok(PosteriorTable { values })
}

/// Enumerates every completion consistent with the observations at positions
/// other than `skip` and accumulates the prior mass by the token at each
/// position. Returns `(mass by position and token, total mass)`.
fn enumerate_joint(
    model: &StickyChainModel,
    x: &SequenceState,
    skip: Option<usize>,
) -> Result<(Array2<f64>, f64)> {
    let s = model.vocab_size;
    let len = x.len();
    let n = enumeration_size(s, len)?;
    let mut marg = Array2::zeros((len, s));
    let mut total = 0.0;
    let mut tokens = vec![0usize; len];
    'outer: for i in 0..n {
        decode_base(i, s, &mut tokens);
        for (d, &v) in tokens.iter().enumerate() {
            if Some(d) != skip && !x.is_masked(d) && x.get(d) as usize != v {
                continue 'outer;
            }
        }
        let p = model.prob(&tokens);
        if p == 0.0 {
            continue;
        }
        total += p;
        for (d, &v) in tokens.iter().enumerate() {
            marg[[d, v]] += p;
        }
    }
    Ok((marg, total))
}

/// The leave-one-out table by exhaustive enumeration over all `S^D`
/// completions. Rows whose conditioning event has zero mass are left zero.
pub fn brute_force_posterior(model: &StickyChainModel, x: &SequenceState) -> Result<PosteriorTable> {
    check_observation(model, x)?;
    let s = model.vocab_size;
    let len = x.len();
    enumeration_size(s, len)?;
    let mut values = Array2::zeros((len, s));
    for d in 0..len {
        let (marg, total) = enumerate_joint(model, x, Some(d))?;
        if total > 0.0 {
            for i in 0..s {
                values[[d, i]] = marg[[d, i]] / total;
            }
        }
    }
    Ok(PosteriorTable { values })
}

/// Per-position marginals of the full joint posterior given all observations.
pub fn brute_force_joint_marginals(model: &StickyChainModel, x: &SequenceState) -> Result<Array2<f64>> {
    check_observation(model, x)?;
    let (mut marg, total) = enumerate_joint(model, x, None)?;
    if total > 0.0 {
        marg.mapv_inplace(|v| v / total);
    }
    Ok(marg)
}

/// Fraction of adjacent pairs that the chain can never produce.
pub fn error_rate(samples: &[SequenceState], model: &StickyChainModel) -> Result<f64> {
    let (errors, pairs) = error_counts(samples, model)?;
    if pairs == 0 {
        return Ok(0.0);
    }
    Ok(errors as f64 / pairs as f64)
}

/// `(illegal pairs, total pairs)` over a batch of clean sequences.
pub fn error_counts(samples: &[SequenceState], model: &StickyChainModel) -> Result<(usize, usize)> {
    let mut errors = 0;
    let mut pairs = 0;
    for x in samples {
        check_observation(model, x)?;
        if x.has_mask() {
            return Err(Error::InvalidInput("error rate needs fully unmasked samples".into()));
        }
        for w in x.tokens().windows(2) {
            pairs += 1;
            if !model.is_legal(w[0], w[1]) {
                errors += 1;
            }
        }
    }
    Ok((errors, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::forward_sample;
    use crate::rng::rng_from_seed;
    use crate::schedule::MaskingSchedule;
    use rand::Rng;

    fn state(model: &StickyChainModel, tokens: &[u32]) -> SequenceState {
        SequenceState::new(model.spec(tokens.len()).unwrap(), tokens.to_vec()).unwrap()
    }

    #[test]
    fn transition_matrix_shape() {
        let m = StickyChainModel::new(5, 0.7).unwrap();
        let a = m.transition();
        for i in 0..5 {
            assert_eq!(a.row(i).sum(), 1.0);
        }
        assert_eq!(a.iter().filter(|&&v| v == 0.0).count(), 5 * 3);
        assert!(m.is_legal(4, 0));
        assert!(!m.is_legal(0, 4));
    }

    #[test]
    fn degenerate_chains() {
        let mut rng = rng_from_seed(5);
        let stay = StickyChainModel::new(4, 1.0).unwrap();
        let x = stay.sample(20, &mut rng).unwrap();
        assert!(x.tokens().iter().all(|&v| v == x.get(0)));
        let step = StickyChainModel::new(4, 0.0).unwrap();
        let x = step.sample(20, &mut rng).unwrap();
        for d in 1..20 {
            assert_eq!(x.get(d), (x.get(d - 1) + 1) % 4);
        }
    }

    #[test]
    fn self_transition_frequency() {
        let m = StickyChainModel::standard();
        let mut rng = rng_from_seed(6);
        let x = m.sample(100_000, &mut rng).unwrap();
        let stays = x.tokens().windows(2).filter(|w| w[0] == w[1]).count();
        let frac = stays as f64 / 99_999.0;
        assert!((frac - 0.9).abs() <= 0.003, "{frac}");
    }

    #[test]
    fn all_masked_is_uniform() {
        let m = StickyChainModel::new(3, 0.6).unwrap();
        let x = SequenceState::all_masked(m.spec(7).unwrap());
        let post = leave_one_out_posterior(&m, &x).unwrap();
        assert!(post.values.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-14));
        let one = SequenceState::all_masked(m.spec(1).unwrap());
        let bf = brute_force_posterior(&m, &one).unwrap();
        assert!(bf.values.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-14));
    }

    #[test]
    fn two_position_examples() {
        let m = StickyChainModel::new(2, 0.9).unwrap();
        let mask = 2;
        for x in [state(&m, &[0, mask]), state(&m, &[0, 0])] {
            let post = leave_one_out_posterior(&m, &x).unwrap();
            assert!((post.row(1)[0] - 0.9).abs() < 1e-14);
            assert!((post.row(1)[1] - 0.1).abs() < 1e-14);
            let bf = brute_force_posterior(&m, &x).unwrap();
            assert!(post.max_abs_diff(&bf) < 1e-12);
        }
    }

    #[test]
    fn interior_markov_blanket() {
        let m = StickyChainModel::new(2, 0.7).unwrap();
        let x = state(&m, &[0, 1, 1]);
        let bf = brute_force_posterior(&m, &x).unwrap();
        // row 1 ∝ A[0][i] A[i][1] = (0.7*0.3, 0.3*0.7)
        assert!((bf.row(1)[0] - 0.5).abs() < 1e-14);
        let post = leave_one_out_posterior(&m, &x).unwrap();
        assert!(post.max_abs_diff(&bf) < 1e-14);
    }

    #[test]
    fn matches_enumeration_on_random_instances() {
        let mut rng = rng_from_seed(7);
        for _ in 0..60 {
            let s = rng.random_range(2..=4);
            let len = rng.random_range(1..=7);
            let p = rng.random_range(0.05..0.95);
            let m = StickyChainModel::new(s, p).unwrap();
            let x0 = m.sample(len, &mut rng).unwrap();
            let t = rng.random::<f64>();
            let x = forward_sample(&x0, t, MaskingSchedule::Linear, &mut rng).unwrap();
            let a = leave_one_out_posterior(&m, &x).unwrap();
            let b = brute_force_posterior(&m, &x).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-10, "{x}");
        }
    }

    #[test]
    fn joint_marginals_reproduce_rows() {
        let m = StickyChainModel::new(3, 0.8).unwrap();
        let mut rng = rng_from_seed(8);
        for _ in 0..20 {
            let x0 = m.sample(6, &mut rng).unwrap();
            let x = forward_sample(&x0, 0.5, MaskingSchedule::Linear, &mut rng).unwrap();
            let post = leave_one_out_posterior(&m, &x).unwrap();
            for d in 0..6 {
                let joint = brute_force_joint_marginals(&m, &x.masked_at(d)).unwrap();
                for i in 0..3 {
                    assert!((joint[[d, i]] - post.row(d)[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn hollow_under_local_changes() {
        let m = StickyChainModel::standard();
        let mut rng = rng_from_seed(9);
        for _ in 0..50 {
            let x0 = m.sample(12, &mut rng).unwrap();
            let x = forward_sample(&x0, 0.4, MaskingSchedule::Cosine, &mut rng).unwrap();
            let d = rng.random_range(0..12);
            let mut y = x.clone();
            y.set(d, rng.random_range(0..=4));
            let a = leave_one_out_posterior(&m, &x).unwrap();
            let b = leave_one_out_posterior(&m, &y).unwrap();
            for (u, v) in a.row(d).iter().zip(b.row(d)) {
                assert!((u - v).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn inconsistent_context_still_normalized() {
        let m = StickyChainModel::standard();
        // 0 -> 3 across one gap is impossible
        let x = state(&m, &[0, 4, 3, 4, 4]);
        let post = leave_one_out_posterior(&m, &x).unwrap();
        for d in 0..5 {
            assert!((post.row(d).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((post.row(1)[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn error_rate_examples() {
        let m = StickyChainModel::standard();
        let mut rng = rng_from_seed(10);
        let samples: Vec<_> = (0..100).map(|_| m.sample(64, &mut rng).unwrap()).collect();
        assert_eq!(error_rate(&samples, &m).unwrap(), 0.0);
        let alternating = state(&m, &[0, 2, 0, 2, 0, 2]);
        assert_eq!(error_rate(&[alternating], &m).unwrap(), 1.0);
        let one_bad = state(&m, &[0, 0, 3, 3]);
        assert!((error_rate(&[one_bad], &m).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let masked = state(&m, &[0, 4]);
        assert!(error_rate(&[masked], &m).is_err());
    }

    #[test]
    fn capacity_guard() {
        let m = StickyChainModel::new(4, 0.9).unwrap();
        let x = SequenceState::all_masked(m.spec(11).unwrap());
        assert!(matches!(brute_force_posterior(&m, &x), Err(Error::Capacity { .. })));
    }

    #[test]
    fn rejects_wrong_vocabulary() {
        let m = StickyChainModel::new(4, 0.9).unwrap();
        let x = SequenceState::new(SequenceSpec::new(3, 2).unwrap(), vec![0, 1]).unwrap();
        assert!(matches!(leave_one_out_posterior(&m, &x), Err(Error::InvalidInput(_))));
    }
}
