//! Dual-branch ViT contrastive clustering.
//!
//! Two augmented views of each image are encoded by a stack of
//! fusing-augmenting blocks: a shared-weight ViT block per branch, a token
//! concatenation of the two branches, a ViT block over the doubled sequence,
//! and a split back into branches. Instance- and cluster-level contrastive
//! heads train the encoder end to end; an optional CLIP embedding is inserted
//! as a second summary token.
//!
//! Modules, bottom-up:
//!
//! - [`diffcore`]: tensors and tape-based reverse-mode gradients
//! - [`pipeline`]: images, augmentation, masking, conv stem, datasets
//! - [`encoder`]: ViT blocks and the fusion stack
//! - [`clipfeat`]: CLIP feature tables and anchor-token insertion
//! - [`heads`]: projection heads and contrastive losses
//! - [`metrics`]: ACC (optimal matching), NMI, ARI
//! - [`runner`]: model assembly, training, evaluation, checkpoints, cost model

pub mod clipfeat;
pub mod diffcore;
pub mod encoder;
mod error;
pub mod heads;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
