//! Blind single-image super-resolution with a deep alternating network.
//!
//! The toolkit covers the whole workflow: synthesizing degraded images,
//! blur-kernel families and their PCA reduction, the unfolded
//! Estimator/Restorer network with its dual-path conditional blocks,
//! end-to-end training, and PSNR/SSIM evaluation harnesses.

pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod imaging;
pub mod kernels;
pub mod network;
mod ops;
pub mod param;
pub mod tensor;
pub mod training;

pub use error::{DanError, Result};
pub use graph::{Graph, Var};
pub use imaging::{ColorSpace, ImagePlane, NoiseSpec};
pub use kernels::{BlurKernel, PcaBasis, ReducedKernel};
pub use param::{ParamId, ParamStore};
pub use tensor::Tensor;
