//! Adapting frozen univariate forecasters to multivariate panels through a
//! pair of learned, structurally symmetric surrogate series.
//!
//! A shared fusion module `f` mixes channels at each timestep; the positive
//! and negative surrogates `f(X) + w_α ⊙ X` and `f(X) - w_β ⊙ X` are each fed
//! through the frozen forecaster channel by channel, and the original-space
//! forecast is recovered in closed form as `(Ŝ_α - Ŝ_β) / (w_α + w_β)`.

pub mod analysis;
pub mod data;
pub mod error;
pub mod forecaster;
pub mod fusion;
pub mod numerics;
pub mod objective;
pub mod pipeline;
pub mod surrogate;
pub mod trainer;

pub use error::{Error, Result};
