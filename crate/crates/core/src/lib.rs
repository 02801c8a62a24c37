//! Unsupervised multichannel speech separation.
//!
//! A pseudo-clean signal generator fits a time-varying spatial covariance
//! model (speech, residual reverberation and noise components) to WPE
//! dereverberated mixtures by EM and emits Gaussian posteriors for each
//! source. A compact mask network is then trained against those posteriors
//! with a permutation-invariant Gaussian KL divergence, so no clean
//! references are needed anywhere in the pipeline.
//!
//! ```text
//! mixture -> wpe -> lgm (EM + permutation) -> posterior p ----+
//!                \-> features -> mask net -> SCMs -> posterior q -> PIT-KLD
//! ```

pub mod error;
pub mod lgm;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod linalg;
pub mod pipeline;
pub mod signal;
pub mod sim;
pub mod train;
pub mod wpe;

pub use error::{Error, Result};
