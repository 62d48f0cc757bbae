//! Distractor generation toolkit: corpus preparation, a hierarchical
//! attention encoder-decoder with static and dynamic attention, SGD
//! training, diverse beam decoding, and BLEU/ROUGE evaluation.

pub mod attention;
pub mod autodiff;
pub mod beam;
pub mod cli;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod params;
pub mod training;

pub use error::{DgError, Result};
