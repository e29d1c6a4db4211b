//! Gradient-difference data reconstruction against federated unlearning.
//!
//! The crate trains small image classifiers with FedAvg, simulates unlearning,
//! captures the gradient before and after unlearning, and reconstructs the
//! remaining and forgotten training images by gradient matching.

pub mod attack;
pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod experiment;
pub mod fedsim;
pub mod gradcheck;
pub mod gradients;
pub mod kernels;
pub mod layout;
pub mod metrics;
pub mod models;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
pub use layout::{FlatGradient, Layout};
pub use models::{build_model, Arch, ArchSpec, Model};
pub use tensor::Tensor;
