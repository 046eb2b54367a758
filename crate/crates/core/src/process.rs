//! The absorbing forward process, plus dense CTMC machinery over the full
//! `(S+1)^D` product space. The dense routines are exact oracles for tiny
//! problems and are not meant for hot paths.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::schedule::MaskingSchedule;
use crate::sequence::{SequenceSpec, SequenceState};

/// Largest flattened state space the dense routines accept.
pub const MAX_DENSE_STATES: usize = 4096;

/// Marginals below this are treated as unreachable.
pub const MARGINAL_GUARD: f64 = 1e-300;

/// Keeps each position with probability `alpha(t)`, otherwise masks it.
pub fn forward_sample<R: Rng + ?Sized>(
    x0: &SequenceState,
    t: f64,
    schedule: MaskingSchedule,
    rng: &mut R,
) -> Result<SequenceState> {
    if x0.has_mask() {
        return Err(Error::InvalidInput("forward_sample expects a clean sequence".into()));
    }
    let alpha = schedule.alpha(t)?;
    let mut x = x0.clone();
    let mask = x0.spec().mask();
    for d in 0..x.len() {
        if rng.random::<f64>() >= alpha {
            x.set(d, mask);
        }
    }
    Ok(x)
}

/// Single-position absorbing generator over `S + 1` symbols (mask last).
pub fn absorbing_rate_base(vocab_size: usize) -> DMatrix<f64> {
    let n = vocab_size + 1;
    let mut r = DMatrix::zeros(n, n);
    for x in 0..vocab_size {
        r[(x, vocab_size)] = 1.0;
        r[(x, x)] = -1.0;
    }
    r
}

/// A dense generator matrix over the flattened product space.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseRateMatrix {
    pub spec: SequenceSpec,
    pub entries: DMatrix<f64>,
}

impl DenseRateMatrix {
    pub fn n_states(&self) -> usize {
        self.entries.nrows()
    }

    /// Off-diagonals nonnegative and rows summing to zero within `tol`.
    pub fn check_generator(&self, tol: f64) -> Result<()> {
        let n = self.n_states();
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                let v = self.entries[(i, j)];
                if i != j && v < 0.0 {
                    return Err(Error::InvalidInput(format!("negative rate {v} at ({i}, {j})")));
                }
                sum += v;
            }
            if sum.abs() > tol {
                return Err(Error::InvalidInput(format!("row {i} sums to {sum}")));
            }
        }
        Ok(())
    }

    fn set_diagonal_from_rows(&mut self) {
        let n = self.n_states();
        for i in 0..n {
            self.entries[(i, i)] = 0.0;
            let off: f64 = self.entries.row(i).iter().sum();
            self.entries[(i, i)] = -off;
        }
    }

    /// `q^T R`, useful for stationarity checks.
    pub fn left_apply(&self, q: &[f64]) -> Vec<f64> {
        let n = self.n_states();
        (0..n).map(|j| (0..n).map(|i| q[i] * self.entries[(i, j)]).sum()).collect()
    }
}

pub fn dense_size(spec: SequenceSpec) -> Result<usize> {
    let size = (spec.n_symbols() as u128).pow(spec.len as u32);
    if size > MAX_DENSE_STATES as u128 {
        return Err(Error::Capacity { size, limit: MAX_DENSE_STATES as u128 });
    }
    Ok(size as usize)
}

/// Joint generator at unit rate: `sum_d R_b(x^d, y^d) 1{x^{\d} = y^{\d}}`.
pub fn joint_rate_base(spec: SequenceSpec) -> Result<DenseRateMatrix> {
    let n = dense_size(spec)?;
    let base = absorbing_rate_base(spec.vocab_size);
    let mut entries = DMatrix::zeros(n, n);
    for i in 0..n {
        let x = SequenceState::from_dense_index(spec, i);
        for d in 0..spec.len {
            let from = x.get(d) as usize;
            for to in 0..spec.n_symbols() {
                let rate = base[(from, to)];
                if to == from || rate == 0.0 {
                    continue;
                }
                let mut y = x.clone();
                y.set(d, to as u32);
                entries[(i, y.dense_index())] += rate;
            }
        }
    }
    let mut r = DenseRateMatrix { spec, entries };
    r.set_diagonal_from_rows();
    Ok(r)
}

/// `R_t = beta(t) * joint_rate_base`.
pub fn joint_rate_dense(spec: SequenceSpec, t: f64, schedule: MaskingSchedule) -> Result<DenseRateMatrix> {
    let beta = schedule.beta(t)?;
    let mut r = joint_rate_base(spec)?;
    r.entries *= beta;
    Ok(r)
}

/// Finite-time transition matrix `exp((int_{t0}^{t1} beta) R_base)`.
pub fn transition_probs_expm(
    rate_base: &DMatrix<f64>,
    t0: f64,
    t1: f64,
    schedule: MaskingSchedule,
) -> Result<DMatrix<f64>> {
    if rate_base.nrows() != rate_base.ncols() {
        return Err(Error::Shape(format!(
            "rate matrix is {}x{}",
            rate_base.nrows(),
            rate_base.ncols()
        )));
    }
    let scale = schedule.integrated_rate(t0, t1)?;
    if scale == 0.0 {
        return Ok(DMatrix::identity(rate_base.nrows(), rate_base.ncols()));
    }
    Ok((rate_base * scale).exp())
}

/// Exact time-`t` marginals over the `(S+1)^D` space given a clean prior
/// `q0` indexed in base `S` (first position most significant).
pub fn exact_marginals(spec: SequenceSpec, q0: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let n = dense_size(spec)?;
    let s = spec.vocab_size;
    if q0.len() != s.pow(spec.len as u32) {
        return Err(Error::Shape(format!("prior has {} entries, expected S^D", q0.len())));
    }
    let mut q = vec![0.0; n];
    for (i, slot) in q.iter_mut().enumerate() {
        let x = SequenceState::from_dense_index(spec, i);
        let masked: Vec<usize> = x.mask_positions();
        let n_masked = masked.len() as i32;
        let weight = alpha.powi(spec.len as i32 - n_masked) * (1.0 - alpha).powi(n_masked);
        if weight == 0.0 {
            continue;
        }
        // sum over completions of the masked positions
        let mut clean: Vec<usize> = x.tokens().iter().map(|&v| v as usize).collect();
        let combos = s.pow(n_masked as u32);
        let mut total = 0.0;
        for c in 0..combos {
            let mut rem = c;
            for &d in &masked {
                clean[d] = rem % s;
                rem /= s;
            }
            let idx = clean.iter().fold(0, |acc, &v| acc * s + v);
            total += q0[idx];
        }
        *slot = weight * total;
    }
    Ok(q)
}

fn check_marginals(forward: &DenseRateMatrix, marginals: &[f64]) -> Result<()> {
    if marginals.len() != forward.n_states() {
        return Err(Error::Shape(format!(
            "{} marginals for {} states",
            marginals.len(),
            forward.n_states()
        )));
    }
    if marginals.iter().any(|&q| !(q >= 0.0) || !q.is_finite()) {
        return Err(Error::InvalidInput("marginals must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Time reversal `R~(y, x) = R(x, y) q(x) / q(y)`. Rates out of or into
/// states with marginal below [`MARGINAL_GUARD`] are set to zero.
pub fn backward_rate_dense(forward: &DenseRateMatrix, marginals: &[f64]) -> Result<DenseRateMatrix> {
    check_marginals(forward, marginals)?;
    let n = forward.n_states();
    let mut entries = DMatrix::zeros(n, n);
    for x in 0..n {
        if marginals[x] < MARGINAL_GUARD {
            continue;
        }
        for y in 0..n {
            let r = forward.entries[(x, y)];
            if x == y || r == 0.0 || marginals[y] < MARGINAL_GUARD {
                continue;
            }
            entries[(y, x)] = r * marginals[x] / marginals[y];
        }
    }
    let mut out = DenseRateMatrix { spec: forward.spec, entries };
    out.set_diagonal_from_rows();
    Ok(out)
}

/// Forward-backward corrector generator `R + R~`, which keeps `q_t` stationary.
pub fn corrector_rate_dense(forward: &DenseRateMatrix, marginals: &[f64]) -> Result<DenseRateMatrix> {
    let backward = backward_rate_dense(forward, marginals)?;
    Ok(sum_generators(forward, &backward))
}

pub fn sum_generators(a: &DenseRateMatrix, b: &DenseRateMatrix) -> DenseRateMatrix {
    let mut out = DenseRateMatrix { spec: a.spec, entries: &a.entries + &b.entries };
    out.set_diagonal_from_rows();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn spec(s: usize, d: usize) -> SequenceSpec {
        SequenceSpec::new(s, d).unwrap()
    }

    #[test]
    fn base_matrix_s2() {
        let r = absorbing_rate_base(2);
        let expect = DMatrix::from_row_slice(3, 3, &[-1.0, 0.0, 1.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(r, expect);
        for s in 2..6 {
            let r = absorbing_rate_base(s);
            assert!(r.row(s).iter().all(|&v| v == 0.0));
            for i in 0..=s {
                assert_eq!(r.row(i).sum(), 0.0);
            }
        }
    }

    #[test]
    fn forward_sample_extremes() {
        let sp = spec(4, 50);
        let x0 = SequenceState::new(sp, (0..50).map(|i| (i % 4) as u32).collect()).unwrap();
        let mut rng = rng_from_seed(3);
        let same = forward_sample(&x0, 0.0, MaskingSchedule::Linear, &mut rng).unwrap();
        assert_eq!(same, x0);
        let all = forward_sample(&x0, 1.0, MaskingSchedule::Linear, &mut rng).unwrap();
        assert_eq!(all.n_masked(), 50);
        assert!(matches!(
            forward_sample(&all, 0.5, MaskingSchedule::Linear, &mut rng),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn forward_sample_binomial_fraction() {
        let sp = spec(4, 10_000);
        let x0 = SequenceState::new(sp, vec![1; 10_000]).unwrap();
        let mut rng = rng_from_seed(4);
        let x = forward_sample(&x0, 0.5, MaskingSchedule::Linear, &mut rng).unwrap();
        let frac = x.n_masked() as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.015, "{frac}");
    }

    #[test]
    fn joint_rate_structure() {
        let sched = MaskingSchedule::Linear;
        let t = 0.3;
        let beta = sched.beta(t).unwrap();
        let r1 = joint_rate_dense(spec(3, 1), t, sched).unwrap();
        assert!((r1.entries.clone() - absorbing_rate_base(3) * beta).abs().max() < 1e-15);

        let sp = spec(2, 2);
        let r = joint_rate_dense(sp, t, sched).unwrap();
        let from = SequenceState::new(sp, vec![0, 1]).unwrap().dense_index();
        let to = SequenceState::new(sp, vec![0, 2]).unwrap().dense_index();
        assert!((r.entries[(from, to)] - beta).abs() < 1e-15);
        for i in 0..r.n_states() {
            for j in 0..r.n_states() {
                let a = SequenceState::from_dense_index(sp, i);
                let b = SequenceState::from_dense_index(sp, j);
                if a.hamming(&b) >= 2 {
                    assert_eq!(r.entries[(i, j)], 0.0);
                }
            }
        }
        for (s, d) in [(2, 1), (2, 2), (3, 2), (2, 3), (3, 3), (4, 3)] {
            joint_rate_dense(spec(s, d), 0.7, MaskingSchedule::Cosine).unwrap().check_generator(1e-10).unwrap();
        }
        assert!(matches!(joint_rate_base(spec(7, 5)), Err(Error::Capacity { .. })));
    }

    #[test]
    fn expm_identity_and_survival() {
        let sched = MaskingSchedule::Cosine;
        let base = absorbing_rate_base(2);
        let p = transition_probs_expm(&base, 0.4, 0.4, sched).unwrap();
        assert_eq!(p, DMatrix::identity(3, 3));
        for &t1 in &[0.1, 0.5, 0.9, 0.99] {
            let p = transition_probs_expm(&base, 0.0, t1, sched).unwrap();
            assert!((p[(0, 2)] - (1.0 - sched.alpha(t1).unwrap())).abs() < 1e-9);
            assert!((p[(2, 2)] - 1.0).abs() < 1e-12);
            for i in 0..3 {
                assert!((p.row(i).sum() - 1.0).abs() < 1e-9);
            }
        }
        let nonsquare = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(transition_probs_expm(&nonsquare, 0.0, 0.5, sched), Err(Error::Shape(_))));
    }

    #[test]
    fn expm_agrees_with_product_of_single_site_kernels() {
        // D=2: the joint propagator factorizes into a Kronecker product
        let sched = MaskingSchedule::Linear;
        let sp = spec(2, 2);
        let joint = joint_rate_base(sp).unwrap();
        let p = transition_probs_expm(&joint.entries, 0.1, 0.6, sched).unwrap();
        let single = transition_probs_expm(&absorbing_rate_base(2), 0.1, 0.6, sched).unwrap();
        let kron = single.kronecker(&single);
        assert!((p - kron).abs().max() < 1e-10);
    }

    #[test]
    fn backward_rate_single_site() {
        let sched = MaskingSchedule::Linear;
        let sp = spec(2, 1);
        let t = 0.5;
        let beta = sched.beta(t).unwrap();
        let alpha = sched.alpha(t).unwrap();
        let q = exact_marginals(sp, &[0.5, 0.5], alpha).unwrap();
        let fwd = joint_rate_dense(sp, t, sched).unwrap();
        let bwd = backward_rate_dense(&fwd, &q).unwrap();
        assert!((bwd.entries[(2, 0)] - 0.5 * beta).abs() < 1e-14);
        // sparsity transposed
        assert_eq!(bwd.entries[(0, 2)], 0.0);
        assert_eq!(bwd.entries[(1, 0)], 0.0);
        bwd.check_generator(1e-12).unwrap();
    }

    #[test]
    fn corrector_stationary_and_reduces_to_forward() {
        let sched = MaskingSchedule::Cosine;
        let sp = spec(2, 2);
        let t = 0.5;
        let q0 = [0.4, 0.1, 0.2, 0.3];
        let q = exact_marginals(sp, &q0, sched.alpha(t).unwrap()).unwrap();
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let fwd = joint_rate_dense(sp, t, sched).unwrap();
        let bwd = backward_rate_dense(&fwd, &q).unwrap();
        // the reversal alone carries the probability flow backwards
        let fq = fwd.left_apply(&q);
        let bq = bwd.left_apply(&q);
        assert!(fq.iter().zip(&bq).all(|(a, b)| (a + b).abs() < 1e-8));
        let rc = corrector_rate_dense(&fwd, &q).unwrap();
        assert!(rc.left_apply(&q).iter().all(|v| v.abs() < 1e-8));
        assert!(rc.entries.iter().enumerate().all(|(k, &v)| k % (rc.n_states() + 1) == 0 || v >= 0.0));
        let zero = DenseRateMatrix { spec: sp, entries: DMatrix::zeros(9, 9) };
        assert_eq!(sum_generators(&fwd, &zero), fwd);
    }

    #[test]
    fn zero_marginal_guard() {
        let sched = MaskingSchedule::Linear;
        let sp = spec(2, 1);
        let q = exact_marginals(sp, &[1.0, 0.0], 0.5).unwrap();
        let fwd = joint_rate_dense(sp, 0.5, sched).unwrap();
        let bwd = backward_rate_dense(&fwd, &q).unwrap();
        assert_eq!(bwd.entries[(2, 1)], 0.0);
        assert!(bwd.entries[(2, 0)] > 0.0);
        assert!(backward_rate_dense(&fwd, &[0.5, 0.5]).is_err());
    }
}
