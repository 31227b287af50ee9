//! Co-training of acoustic latent codes: an LSTM that predicts future codes
//! and a codebook that confirms them from the frames actually observed.

pub mod error;
pub mod eval;
pub mod features;
pub mod kmeans;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
