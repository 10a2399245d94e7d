//! CLIP feature tables and anchor-token insertion.
//!
//! A [`FeatureTable`] maps dataset item ids to fixed 512-dim image
//! embeddings. The embedding of each image is inserted as a second summary
//! token right after CLS.

mod table;

pub use table::{read_table, synthetic_features, write_table, FeatureTable, CLIP_DIM};

use rand::Rng;

use crate::diffcore::{Bindings, Float, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::pipeline::TokenSequence;

/// Learnable `512 → E` map applied to CLIP features when `E ≠ 512`.
pub fn init_projection<F: Float>(embed: usize, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Option<ParamId> {
    // unit-variance entries for unit-norm inputs, comparable to stem tokens
    (embed != CLIP_DIM).then(|| store.add("clip.proj.weight", Tensor::trunc_normal([CLIP_DIM, embed], 1.0, rng)))
}

/// Inserts `c0 [B, 512]` (projected to E when a projection is given) after
/// CLS: `[CLS, patches...] -> [CLS, anchor, patches...]`.
pub fn insert_clip_token<F: Float>(
    tape: &mut Tape<F>,
    bind: &Bindings,
    tokens: TokenSequence,
    c0: Var,
    projection: Option<ParamId>,
) -> Result<TokenSequence> {
    let cs = tape.shape(c0).to_vec();
    if cs.len() != 2 || cs[1] != CLIP_DIM || cs[0] != tokens.batch {
        return Err(Error::Shape(format!(
            "CLIP features must be [{}, {CLIP_DIM}], got {cs:?}",
            tokens.batch
        )));
    }
    let anchor = match projection {
        Some(w) => tape.matmul(c0, bind[w])?,
        None if tokens.embed == CLIP_DIM => c0,
        None => {
            return Err(Error::Shape(format!(
                "E={} differs from {CLIP_DIM} and no projection was given",
                tokens.embed
            )))
        }
    };
    let anchor = tape.reshape(anchor, &[tokens.batch, 1, tokens.embed])?;
    let cls = tape.slice(tokens.var, 1, 0, 1)?;
    let patches = tape.slice(tokens.var, 1, 1, tokens.tokens - 1)?;
    let var = tape.concat(&[cls, anchor, patches], 1)?;
    Ok(TokenSequence {
        var,
        tokens: tokens.tokens + 1,
        ..tokens
    })
}
