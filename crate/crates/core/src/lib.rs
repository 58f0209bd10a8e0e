//! Spatial knitting attention adapters for a frozen toy latent-diffusion UNet.

pub mod adapter;
pub mod archive;
pub mod attention;
pub mod bench;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod golden;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod imaging;
pub mod kernels;
pub mod metrics;
pub mod motion;
pub mod params;
pub mod pose;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod video;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use params::{Ctx, ParamStore, Trainable};
pub use tensor::Tensor;
