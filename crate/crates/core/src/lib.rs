//! Residual networks as ensembles of paths: a small dense residual network
//! with tape-based gradients, exact path statistics, lesion and reordering
//! experiments, per-path gradient measurement and path-restricted training.

pub mod checkpoint;
pub mod data;
pub mod desk;
pub mod error;
pub mod gradflow;
pub mod lesion;
pub mod numerics;
pub mod paths;
pub mod resnet;
pub mod rng;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
