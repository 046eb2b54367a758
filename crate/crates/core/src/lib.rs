//! Masked (absorbing-state) discrete diffusion: schedules, exact dense CTMC
//! oracles, a sticky Markov-chain task with an exact denoising posterior,
//! a hollow transformer denoiser, ELBO estimators, and predictor-corrector
//! samplers including the informed Gibbs corrector.

// `!(x >= 0.0)` is used on purpose so NaN lands in the error branch
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod denoiser;
pub mod error;
pub mod hmm;
pub mod hollow;
pub mod losses;
pub mod process;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod sequence;
pub mod validate;

pub use denoiser::{Denoiser, DenoiserOutput, OracleDenoiser, TabularDenoiser};
pub use error::{Error, Result};
pub use hmm::{PosteriorTable, StickyChainModel};
pub use hollow::{HollowConfig, HollowNet};
pub use samplers::{CorrectorKind, GenerationReport, PredictorKind, SamplerConfig};
pub use schedule::MaskingSchedule;
pub use sequence::{SequenceSpec, SequenceState, Token};

/// Probability floor applied inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

pub(crate) fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}
