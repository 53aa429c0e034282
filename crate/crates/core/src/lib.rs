//! Remote photoplethysmography from face video: differentiable operators,
//! a searched 3D-convolutional backbone, training objectives and tooling.

pub mod augment;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod dataset;
pub mod exec;
pub mod harness;
pub mod kernels;
pub mod layers;
pub mod nas;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod signal;
pub mod synth;
pub mod tdc;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::Tensor;
