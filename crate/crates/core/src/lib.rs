//! Core of a from-scratch TransFER implementation.
//!
//! TransFER learns relation-aware local representations for facial expression
//! recognition: a stem CNN feeds several LANet attention branches whose maps are
//! regularized by Multi-Attention Dropping (MAD), and the re-weighted features are
//! projected to a token sequence for a Transformer encoder whose heads are
//! regularized by Multi-head Self-Attention Dropping (MSAD).
//!
//! The crate only needs `alloc`. Everything touching the filesystem, the command
//! line or threads lives in the `transfer` companion crate. Enable the `std`
//! feature (on by default) for runtime SIMD detection in the matrix kernels.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod augment;
pub mod config;
pub mod data;
pub mod encoder;
mod error;
pub mod graph;
mod kernels;
pub mod layers;
pub mod local_cnns;
pub mod model;
pub mod optim;
pub mod params;
pub mod regularizers;
pub mod rng;
pub mod stem;
pub mod tensor;
pub mod train;
pub mod visualize;

pub use config::{RegularizerKind, TrainConfig};
pub use error::{Error, Result};
pub use graph::{Activation, Graph, Var};
pub use model::TransFer;
pub use regularizers::{DropDecision, Mode};
pub use tensor::Tensor;
