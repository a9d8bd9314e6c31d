//! Hybrid depth-from-defocus and stereo disparity estimation.
//!
//! The crate bundles four layers that build on each other:
//!
//! * [`tensor`]: a small reverse-mode autodiff engine (conv, transposed conv,
//!   pooling, batch norm, PReLU, MAE, L2) with f32 training and f64 checking.
//! * [`nn`], [`hourglass`], [`fusion`]: the stacked-hourglass DfD and stereo
//!   networks and the interconnected fusion network built from them.
//! * [`optics`], [`datagen`]: layered-scene rendering (pinhole views,
//!   occlusion-aware defocus, light fields, refocusing, Poisson noise) and the
//!   procedural dataset factory with patching and flip augmentation.
//! * [`train`], [`eval`], [`checkpoint`]: Adam training loop, the bad-pixel /
//!   MAE metric suite and the binary checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod hourglass;
pub mod image;
pub mod model;
pub mod nn;
pub mod optics;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use eval::MetricReport;
pub use fusion::FusionVariant;
pub use hourglass::{HgConfig, NetworkOutput};
pub use image::Image;
pub use model::{InputBatch, Model, ModelConfig, ModelKind};
pub use tensor::{Graph, ParamStore, Scalar, Tensor, Var};
pub use train::{TrainConfig, Trainer};
