//! Normalizing-flow engine with a latent-space solver for linear inverse
//! problems: tensors and reverse-mode differentiation, invertible layers,
//! a multi-scale flow model, maximum-likelihood training, and solvers for
//! denoising, deblurring, inpainting and colorization.

pub mod checkpoint;
pub mod error;
pub mod linalg;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod params;
pub mod solver;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{FlowError, Result};
pub use tensor::{Dtype, Scalar, Tensor};
