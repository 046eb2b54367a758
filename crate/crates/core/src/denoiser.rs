//! Denoisers map a (partially masked) sequence to a `D x S` matrix whose
//! row `d` is a distribution over the clean token at `d`. Hollow denoisers
//! guarantee that row `d` does not depend on the input at `d`, so one
//! evaluation yields `p(x^d | M^d(x))` for every position at once.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::hmm::{leave_one_out_posterior, StickyChainModel};
use crate::sequence::{SequenceSpec, SequenceState, Token};

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub probs: Array2<f64>,
}

impl DenoiserOutput {
    pub fn new(probs: Array2<f64>) -> Self {
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.ncols()
    }

    pub fn row(&self, d: usize) -> &[f64] {
        let s = self.probs.ncols();
        &self.probs.as_slice().expect("standard layout")[d * s..(d + 1) * s]
    }

    pub fn prob(&self, d: usize, token: Token) -> f64 {
        self.probs[[d, token as usize]]
    }

    /// Most likely token at `d`; the lowest index wins ties.
    pub fn argmax(&self, d: usize) -> Token {
        let mut best = 0;
        for (i, &p) in self.row(d).iter().enumerate() {
            if p > self.row(d)[best] {
                best = i;
            }
        }
        best as Token
    }

    /// Rows nonnegative and summing to one within `tol`.
    pub fn check_rows(&self, tol: f64) -> Result<()> {
        for d in 0..self.len() {
            let row = self.row(d);
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::Contract(format!("row {d} has a negative or NaN entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::Contract(format!("row {d} sums to {sum}")));
            }
        }
        Ok(())
    }
}

pub trait Denoiser: Send + Sync {
    /// Row `d` approximates `p(x_0^d = . | M^d(x))`. `t` is accepted for
    /// interface compatibility; the absorbing posterior does not depend on it.
    fn evaluate(&self, x: &SequenceState, t: f64) -> Result<DenoiserOutput>;

    /// Whether row `d` is guaranteed independent of `x^d`.
    fn is_hollow(&self) -> bool {
        true
    }
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn evaluate(&self, x: &SequenceState, t: f64) -> Result<DenoiserOutput> {
        (**self).evaluate(x, t)
    }

    fn is_hollow(&self) -> bool {
        (**self).is_hollow()
    }
}

impl<T: Denoiser + ?Sized> Denoiser for Box<T> {
    fn evaluate(&self, x: &SequenceState, t: f64) -> Result<DenoiserOutput> {
        (**self).evaluate(x, t)
    }

    fn is_hollow(&self) -> bool {
        (**self).is_hollow()
    }
}

/// The exact leave-one-out posterior of a sticky chain.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    model: StickyChainModel,
}

impl OracleDenoiser {
    pub fn new(model: StickyChainModel) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &StickyChainModel {
        &self.model
    }
}

impl Denoiser for OracleDenoiser {
    fn evaluate(&self, x: &SequenceState, _t: f64) -> Result<DenoiserOutput> {
        Ok(DenoiserOutput::new(leave_one_out_posterior(&self.model, x)?.values))
    }
}

/// A lookup table indexed by `(d, M^d(x))`, hollow by construction. Meant
/// for tiny problems where the table over `(S+1)^D` contexts fits in memory.
#[derive(Debug, Clone)]
pub struct TabularDenoiser {
    spec: SequenceSpec,
    // [position][context index] -> row of length S
    table: Vec<Vec<Vec<f64>>>,
}

impl TabularDenoiser {
    pub const MAX_CONTEXTS: usize = 1 << 16;

    fn n_contexts(spec: SequenceSpec) -> Result<usize> {
        let n = (spec.n_symbols() as u128).pow(spec.len as u32);
        if n > Self::MAX_CONTEXTS as u128 {
            return Err(Error::Capacity { size: n, limit: Self::MAX_CONTEXTS as u128 });
        }
        Ok(n as usize)
    }

    /// Builds the table from `f(d, context)`, where `context` already has
    /// position `d` masked. Rows are normalized.
    pub fn from_fn<F>(spec: SequenceSpec, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &SequenceState) -> Vec<f64>,
    {
        let n = Self::n_contexts(spec)?;
        let mut table = vec![vec![Vec::new(); n]; spec.len];
        for (idx, _) in (0..n).enumerate() {
            let ctx = SequenceState::from_dense_index(spec, idx);
            for (d, rows) in table.iter_mut().enumerate() {
                if !ctx.is_masked(d) {
                    continue;
                }
                let mut row = f(d, &ctx);
                if row.len() != spec.vocab_size {
                    return Err(Error::Shape(format!("row of length {} for S = {}", row.len(), spec.vocab_size)));
                }
                let total: f64 = row.iter().sum();
                if !(total > 0.0) {
                    return Err(Error::InvalidInput("table row has no mass".into()));
                }
                row.iter_mut().for_each(|p| *p /= total);
                rows[idx] = row;
            }
        }
        Ok(Self { spec, table })
    }

    pub fn uniform(spec: SequenceSpec) -> Result<Self> {
        Self::from_fn(spec, |_, _| vec![1.0; spec.vocab_size])
    }

    /// Rows are softmax of standard normal logits scaled by `spread`.
    pub fn random(spec: SequenceSpec, seed: u64, spread: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_fn(spec, |_, _| {
            (0..spec.vocab_size)
                .map(|_| (spread * rng.sample::<f64, _>(StandardNormal)).exp())
                .collect()
        })
    }

    /// Tabulates another denoiser by querying it on every masked context.
    pub fn tabulate<D: Denoiser + ?Sized>(spec: SequenceSpec, inner: &D) -> Result<Self> {
        let mut failure = None;
        let out = Self::from_fn(spec, |d, ctx| match inner.evaluate(ctx, 0.5) {
            Ok(o) => o.row(d).to_vec(),
            Err(e) => {
                failure.get_or_insert(e);
                vec![1.0; spec.vocab_size]
            }
        })?;
        match failure {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    pub fn spec(&self) -> SequenceSpec {
        self.spec
    }
}

impl Denoiser for TabularDenoiser {
    fn evaluate(&self, x: &SequenceState, _t: f64) -> Result<DenoiserOutput> {
        if x.spec() != self.spec {
            return Err(Error::Shape(format!("table built for {:?}, got {:?}", self.spec, x.spec())));
        }
        let s = self.spec.vocab_size;
        let mut probs = Array2::zeros((x.len(), s));
        for d in 0..x.len() {
            let ctx = x.masked_at(d).dense_index();
            for (i, &p) in self.table[d][ctx].iter().enumerate() {
                probs[[d, i]] = p;
            }
        }
        Ok(DenoiserOutput::new(probs))
    }
}
