//! Desk-scale simulator for federated segmentation with frequency-domain
//! style recalibration and dual-level prototype alignment.

pub mod autodiff;
pub mod federation;
pub mod fft;
pub mod fsr;
pub mod gradient_suite;
pub mod losses;
pub mod prototypes;
pub mod rng;
pub mod segnet;
pub mod server;
pub mod synthdata;
pub mod tensor;

pub use tensor::{LabelMap, Tensor, TensorError};
