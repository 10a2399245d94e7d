//! ViT blocks and the fusing-augmenting stack.
//!
//! Each fusing block runs one shared-weight ViT block on both views,
//! concatenates the two token sequences, runs a second ViT block over the
//! `2T` tokens, and splits the result back into the two branches.

mod block;
mod stack;

pub use block::{cat_tokens, split_tokens, vit_block_forward, BlockParams};
pub use stack::{extract_summary, mfavbs_forward, AttentionKind, AttentionMap, EncoderOutput, EncoderParams};
pub(crate) use block::{linear, linear_params};
