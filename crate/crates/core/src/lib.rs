//! Online bias/noise/alignment diagnostics for scalar error streams, and three
//! learners driven by them:
//!
//! * [`hsao`]: an Adam-style supervised optimizer whose step size is gated by
//!   the bias and noise ratios and whose gradient is corrected along the
//!   momentum direction when updates keep aligning.
//! * [`hedrl`]: an actor-critic whose critic step is gated by TD-error noise,
//!   whose policy step is gated by TD-error bias, and whose entropy weight
//!   follows both.
//! * [`mllp`]: a coordinate-wise learned optimizer conditioned on the same
//!   diagnostics and meta-trained with antithetic evolution strategies.
//!
//! [`tasks`] and [`envs`] provide the synthetic nonstationary problems, and
//! [`net`] the small dense networks with closed-form gradients used throughout.
//!
//! The optimizer is called HSAO in both of its expansions found in the
//! literature ("human-inspired supervised adaptive optimizer" and "hybrid
//! sharpness-aware optimizer"); only the acronym is used here.

pub mod diag;
pub mod envs;
mod error;
pub mod hedrl;
pub mod hsao;
pub mod mllp;
pub mod net;
pub mod rng;
pub mod tasks;
pub mod trace;

pub use diag::{DiagnosticConfig, DiagnosticSnapshot, DiagnosticState};
pub use error::{Error, Result};
pub use trace::{Ablation, TraceRecord};

/// Euclidean inner product. Panics in debug builds on length mismatch.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
