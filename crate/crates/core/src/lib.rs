//! Continual weakly-supervised anomaly detection over pre-extracted video
//! features. Domains arrive one at a time; per-class replay generators
//! regenerate past feature distributions so an ensemble of two-headed
//! discriminators can keep scoring old domains it no longer sees.
//!
//! Module map:
//! - [`diffcore`]: tensors, reverse-mode tape, Adam.
//! - [`datagen`]: synthetic domain streams and the on-disk feature format.
//! - [`dual_generator`]: class-conditional VAE pair with a shared latent
//!   block, plus frozen snapshots used for replay.
//! - [`multi_discriminator`]: scoring/adversarial heads and every
//!   discriminator-side loss.
//! - [`continual_trainer`]: the sequential training protocol and the
//!   baseline regimes.
//! - [`inference_eval`]: ensemble scoring, ROC AUC, forgetting metrics.
//! - [`checkpoint`]: binary snapshot/restore of a full training state.

pub mod checkpoint;
pub mod continual_trainer;
pub mod datagen;
pub mod diffcore;
pub mod dual_generator;
pub mod inference_eval;
pub mod multi_discriminator;

pub use continual_trainer::{Regime, RunResult, TrainConfig};
pub use datagen::{Bag, DomainDataset, FeatureInstance, SyntheticStreamConfig};
pub use diffcore::{AdamState, GradSet, ParamSet, Tape, Tensor2};
pub use dual_generator::{ClassTag, FrozenReplayer, GeneratorConfig};
pub use inference_eval::{AucMatrix, ForgettingSummary};
pub use multi_discriminator::DiscriminatorConfig;
