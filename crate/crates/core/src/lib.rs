//! Neural-process meta-learning laboratory.
//!
//! The crate provides a small reverse-mode tensor engine, the CNP/NP/ANP
//! model family, the flexible Set-Transformer encoder with a layer-normalized
//! linear decoder (FELD), and the two-stage heterogeneity pipeline: a
//! pre-task with dimension-wise pooling and auto-encoding, agglomerative
//! clustering of task latents, per-cluster retraining and routed inference.

pub mod artifacts;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod decoders;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod taskgen;
pub mod tensor;
pub mod variational;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Graph, ParamStore, Tensor, Var};
