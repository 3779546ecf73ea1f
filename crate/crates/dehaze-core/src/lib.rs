//! Semi-supervised single-image dehazing: haze synthesis, a disentangled
//! coarse-to-fine network, and a mean-teacher training loop, all on CPU.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod physics;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training precision used by the CLI.
pub type TrainFloat = f32;
/// Precision used for gradient checking and metric math.
pub type CheckFloat = f64;
