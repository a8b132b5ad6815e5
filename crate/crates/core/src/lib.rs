//! Capsule networks on a small reverse-mode autograd engine.
//!
//! Implements the baseline CapsNet, DCNet (a densely connected convolutional
//! trunk feeding the primary capsules), its ablation variants, and the
//! three-level DCNet++ with four routing heads.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod capsule;
pub mod conv;
pub mod data;
pub mod decoder;
pub mod dense;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
