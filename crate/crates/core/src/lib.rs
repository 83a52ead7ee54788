//! Feed-forward Gaussian-splat reconstruction with multimodal style
//! conditioning through zero-initialized additive injection.
//!
//! The crate is organised bottom-up:
//!
//! * [`types`]: Gaussians, scenes, cameras and images.
//! * [`render`]: differentiable splat rasterizer with analytic gradients.
//! * [`backbone`]: toy-scale feature extractor, aggregator and heads.
//! * [`style`]: style embeddings and the zero-initialized style injector.
//! * [`model`]: the dual-branch (frozen geometry / tuned appearance) model.
//! * [`losses`]: content, style-statistics, directional and patch losses.
//! * [`train`]: data generation, geometry pretraining and style training.
//! * [`eval`]: depth-warp multi-view consistency metrics.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod losses;
pub mod model;
pub mod nn;
pub mod render;
pub mod sh;
pub mod style;
pub mod tensor;
pub mod train;
pub mod types;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use types::{CameraModel, GaussianPrimitive, GaussianScene, ImageTensor};
