//! The reference setup: a 24-block, width-32 residual net on the spiral
//! task, its 14-layer feedforward counterpart, and the training recipe the
//! experiment checks and CLI defaults use.

use crate::error::Result;
use crate::resnet::{Architecture, FeedforwardNet, ResidualNet};
use crate::rng::stream_rng;
use crate::training::TrainConfig;

pub const BLOCKS: usize = 24;
pub const WIDTH: usize = 32;
pub const FEEDFORWARD_LAYERS: usize = 14;
pub const EPOCHS: usize = 100;
pub const BATCH_SIZE: usize = 128;
/// Initial learning rate. 0.1 makes the 24-block net diverge on spirals.
pub const LR: f64 = 0.02;
/// Gradient-mass coverage used to pick the effective band.
pub const BAND_COVERAGE: f64 = 0.9;

/// Stream of the run seed that initializes weights. Training uses streams
/// 0 and 1.
pub const INIT_STREAM: u64 = 2;

pub fn architecture(input_dim: usize, classes: usize) -> Architecture {
    Architecture::uniform(input_dim, classes, BLOCKS, WIDTH)
}

/// The standard schedule with the reference epochs, batch size and lr.
pub fn train_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::standard(EPOCHS, BATCH_SIZE, seed);
    cfg.lr = LR;
    cfg
}

pub fn residual_net(arch: &Architecture, seed: u64) -> Result<ResidualNet> {
    ResidualNet::new(arch, &mut stream_rng(seed, INIT_STREAM))
}

pub fn feedforward_net(input_dim: usize, classes: usize, seed: u64) -> Result<FeedforwardNet> {
    FeedforwardNet::new(input_dim, classes, FEEDFORWARD_LAYERS, WIDTH, &mut stream_rng(seed, INIT_STREAM))
}
