//! Local-enhanced vision Mamba (LEVM) with state sharing for multispectral
//! image fusion, built on a small reverse-mode tensor engine.
//!
//! Layout conventions: feature maps are channel-last `[B, H, W, D]` and scan
//! sequences are `[B, K, L, D]` with `K = 4` scan directions. Files on disk
//! store images band-first (`[S, H, W]`).

pub mod autograd;
pub mod bench;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod ops;
pub mod parallel;
pub mod params;
pub mod selftest;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use autograd::{backward, Gradients, Var};
pub use error::{Error, Result};
pub use gradcheck::finite_diff_check;
pub use tensor::Tensor;
