//! Unsupervised domain adaptation with cross-grafted representation stacks
//! and adversarial label alignment.
//!
//! Two VAEs (one per domain, sharing their high-level encoder layers) learn
//! per-domain codecs. Their decoders are split into high- and low-level stacks
//! and cross-grafted, so a latent code from either domain can be rendered as an
//! *association* image. Residual generators and per-channel discriminators then
//! pull the target's associations onto the source's, and the discriminators'
//! class heads, trained on source associations only, classify the target.
//!
//! Module map:
//! - [`datasets`]: benchmark ingestion, MNIST-M / Fashion-M / M-Digits synthesis, caching
//! - [`networks`]: the VAE pair, grafting, generators and discriminators
//! - [`losses`]: VAE, adversarial, content-constancy and task losses
//! - [`training`]: configuration, schedule and the three-phase alternating optimizer
//! - [`evaluation`]: accuracy, baselines, split sweeps, transfer, image/feature export
//! - [`persistence`]: the checkpoint container
//! - [`cli`]: the `cgrs` command line

pub mod cli;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod persistence;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
pub use networks::{Channel, Domain, StackSplit};
pub use training::config::ExperimentConfig;

/// Side length of every image the models consume.
pub const IMAGE_SIZE: usize = 28;
/// Channels of every image the models consume.
pub const MODEL_CHANNELS: usize = 3;
/// Number of classes in every benchmark.
pub const NUM_CLASSES: usize = 10;
