//! QoS-Nets: runtime-adjustable approximate-multiplier inference for small
//! quantized neural networks.
//!
//! The toolkit selects a fixed-size subset of approximate multipliers from a
//! candidate library, assigns them to network layers across several runtime
//! operating points by clustering per-layer preference vectors, and recovers
//! task accuracy with parameter-efficient fine-tuning on top of shared
//! weights. Everything runs on a self-contained simulated 8-bit quantized
//! network; see the guide in `book/` for the concepts chapter by chapter.

pub mod am;
pub mod error;
pub mod qnn;
pub mod sensitivity;

pub use error::{Error, Result};
