//! Bayesian tensor-train factorization and completion of noisy, partially
//! observed tensors, with automatic rank determination via mean-field
//! variational inference over a product-Gamma precision prior.

pub mod augment;
pub mod engine;
pub mod harness;
pub mod image;
pub mod init;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod tensor;

pub use engine::{fit, reconstruct, FitOptions, FitReport};
pub use model::{ModelState, PriorValues};
pub use tensor::{DenseTensor, MaskTensor, TTCores};
