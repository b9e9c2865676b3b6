//! Two-reader magnetic recording read-channel laboratory.
//!
//! The crate covers the whole chain from written bits to detector soft output:
//!
//! - [`chansim`]: two-reader readback synthesis (erf transition response,
//!   transition jitter, inter-track interference, AWGN), normalization,
//!   sliding-window datasets and the sector archive format.
//! - [`grad`]: a small reverse-mode scalar tape with finite-difference checks.
//! - [`equalizer`]: linear and MLP equalizers plus the partial-response target.
//! - [`detector`]: trellis construction, hard Viterbi, exact max-log soft
//!   output and its subgradient backpropagation.
//! - [`training`]: MSE and cross-entropy adaptation with Adam, metrics.
//! - [`experiment`]: configuration, presets and result comparison.

pub mod chansim;
pub mod detector;
pub mod equalizer;
mod error;
pub mod experiment;
pub mod grad;
pub mod training;

pub use error::{Error, Result};

/// Version string recorded in experiment summaries.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
