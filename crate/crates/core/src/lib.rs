//! Masked-contrastive image–report pretraining with correlation weighting,
//! sized to train on a laptop against a synthetic corpus with exact
//! localization ground truth.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod encoders;
pub mod evaluate;
pub mod gradsuite;
pub mod error;
pub mod inference;
pub mod numerics;
pub mod objectives;
pub mod patching;
pub mod pgm;
pub mod train;

pub use error::{Error, Result};
