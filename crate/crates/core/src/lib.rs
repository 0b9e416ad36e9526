//! Quantized variational attention for sentence generation.
//!
//! Encoder states are snapped to a learned codebook, the decoder attends over
//! the resulting code sequence, and a causal convolutional prior over code
//! indices is trained afterwards so new code sequences (and sentences) can be
//! sampled. A Gaussian-attention variant trained jointly with its prior is
//! included for comparison.

pub mod attention;
pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod harness;
pub mod model;
pub mod prior;
pub mod quantizer;
pub mod variational;

pub use error::{DvamError, Result};
pub use exec::Exec;
