//! Prefix-tuned unsupervised text style transfer on a frozen miniature
//! causal language model.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod ctx;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod prefix;
pub mod pretrain;
pub mod synth;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
