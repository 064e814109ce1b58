//! Two-scale denoising network with a multi-branch training topology and a
//! fused single-conv deployment topology.

pub mod augment;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reparam;
pub mod spectral;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{build_model, FastShadeConfig, FastShadeModel, Topology};
pub use tensor::{Shape, Tensor};
