//! Web-page saliency prediction.
//!
//! The model combines three parts: a learned position prior (a variational
//! autoencoder over saliency maps plus a prior-generating CNN), an
//! element-aware feature network (a base branch, class-activation regions and
//! a multi-scale text detector) and a fusion network trained against ground
//! truth built from eye fixations.

pub mod cli;
pub mod config;
pub mod efnet;
pub mod error;
pub mod imageops;
pub mod nn;
pub mod pipeline;
pub mod pnet;
pub mod ppl;
pub mod saldata;
pub mod salmetrics;
pub mod seed;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use ndgrad;
