//! Minimal differentiable numeric core: row-major 2-D tensors, a reverse-mode
//! graph over a fixed operation set, transformer-layer building blocks, and
//! finite-difference gradient checking.
//!
//! Training runs in `f32`; gradient checks instantiate the same generic code
//! in `f64`, where central differences are reliable.

pub mod check;
pub mod graph;
pub mod layers;
pub mod params;
pub mod real;
pub mod tensor;

pub use check::{check_gradients, GradCheckReport};
pub use graph::{Graph, Var};
pub use layers::{init_encoder_layer, EncoderConfig, EncoderLayerVars};
pub use params::ParamStore;
pub use real::Real;
pub use tensor::Tensor2D;
