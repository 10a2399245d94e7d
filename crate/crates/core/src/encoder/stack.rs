use rand::Rng;

use super::block::{cat_tokens, layer_norm, layer_norm_params, split_tokens, vit_block_forward, BlockParams};
use crate::diffcore::{Bindings, Float, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::pipeline::TokenSequence;

/// The 2N blocks of the fusion stack plus the shared final LayerNorm.
///
/// `branch[i]` is layer `2i` (0-based) and runs on each view separately with
/// one parameter set; `fused[i]` is layer `2i + 1` and runs on the
/// concatenated `2T` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub branch: Vec<BlockParams>,
    pub fused: Vec<BlockParams>,
    pub final_ln: (ParamId, ParamId),
}

impl EncoderParams {
    pub fn init<F: Float>(
        embed: usize,
        heads: usize,
        depth: usize,
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut branch = Vec::with_capacity(depth);
        let mut fused = Vec::with_capacity(depth);
        for i in 0..depth {
            branch.push(BlockParams::init(&format!("encoder.branch{i}"), embed, heads, store, rng)?);
            fused.push(BlockParams::init(&format!("encoder.fused{i}"), embed, heads, store, rng)?);
        }
        Ok(EncoderParams {
            branch,
            fused,
            final_ln: layer_norm_params(store, "encoder.final_ln", embed),
        })
    }

    /// Number of fusing blocks N.
    pub fn depth(&self) -> usize {
        self.branch.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    BranchA,
    BranchB,
    Fused,
}

/// Attention weights of one block pass, `[B, h, T', T']`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<F> {
    /// 0-based block index in `0..2N`.
    pub layer: usize,
    pub kind: AttentionKind,
    pub weights: Tensor<F>,
}

impl<F: Float> AttentionMap<F> {
    fn from_tape(tape: &Tape<F>, var: Var, layer: usize, kind: AttentionKind, batch: usize, heads: usize) -> Result<Self> {
        let t = tape.shape(var)[1];
        let weights = Tensor::new([batch, heads, t, t], tape.value(var).to_vec())?;
        Ok(AttentionMap { layer, kind, weights })
    }

    pub fn heads(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Head-averaged `T' × T'` map of one sample, row-major.
    pub fn head_mean(&self, sample: usize) -> Vec<f64> {
        let (h, t) = (self.heads(), self.tokens());
        let mut out = vec![0.0; t * t];
        let base = sample * h * t * t;
        for head in 0..h {
            let block = &self.weights.data()[base + head * t * t..base + (head + 1) * t * t];
            out.iter_mut().zip(block).for_each(|(o, &w)| *o += w.as_f64() / h as f64);
        }
        out
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        let t = self.tokens();
        self.weights
            .data()
            .chunks(t)
            .map(|r| (r.iter().map(|w| w.as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Output of the fusion stack.
#[derive(Clone, Debug)]
pub struct EncoderOutput<F> {
    /// Final-normalized token sequences of both branches.
    pub tokens_a: TokenSequence,
    pub tokens_b: TokenSequence,
    /// Summary features `[B, E]`.
    pub h_a: Var,
    pub h_b: Var,
    pub attention: Vec<AttentionMap<F>>,
}

/// Runs N fusing blocks (shared branch block on each view, concat, fused
/// block, split), then the final LayerNorm, then summary extraction.
pub fn mfavbs_forward<F: Float>(
    tape: &mut Tape<F>,
    bind: &Bindings,
    p: &EncoderParams,
    y_a: TokenSequence,
    y_b: TokenSequence,
    clip_fusion: bool,
    collect_attn: bool,
) -> Result<EncoderOutput<F>> {
    if y_a.shape() != y_b.shape() {
        return Err(Error::Shape(format!(
            "branch inputs differ: {:?} vs {:?}",
            y_a.shape(),
            y_b.shape()
        )));
    }
    let (mut a, mut b) = (y_a, y_b);
    let mut attention = Vec::new();
    for (i, (branch, fused)) in p.branch.iter().zip(&p.fused).enumerate() {
        let layer = 2 * i;
        let at = |e: Error, l: usize| e.context(format!("encoder layer {l}"));
        let (a1, attn_a) = vit_block_forward(tape, bind, branch, a).map_err(|e| at(e, layer))?;
        let (b1, attn_b) = vit_block_forward(tape, bind, branch, b).map_err(|e| at(e, layer))?;
        let joined = cat_tokens(tape, a1, b1)?;
        let (out, attn_f) = vit_block_forward(tape, bind, fused, joined).map_err(|e| at(e, layer + 1))?;
        (a, b) = split_tokens(tape, out)?;
        if collect_attn {
            let (batch, heads) = (y_a.batch, branch.heads);
            attention.push(AttentionMap::from_tape(tape, attn_a, layer, AttentionKind::BranchA, batch, heads)?);
            attention.push(AttentionMap::from_tape(tape, attn_b, layer, AttentionKind::BranchB, batch, heads)?);
            attention.push(AttentionMap::from_tape(tape, attn_f, layer + 1, AttentionKind::Fused, batch, fused.heads)?);
        }
    }
    let na = layer_norm(tape, bind, a.var, p.final_ln)?;
    let nb = layer_norm(tape, bind, b.var, p.final_ln)?;
    let (tokens_a, tokens_b) = (TokenSequence { var: na, ..a }, TokenSequence { var: nb, ..b });
    Ok(EncoderOutput {
        tokens_a,
        tokens_b,
        h_a: extract_summary(tape, tokens_a, clip_fusion)?,
        h_b: extract_summary(tape, tokens_b, clip_fusion)?,
        attention,
    })
}

/// Summary token `[B, E]`: the CLS token (index 0), or the CLIP anchor
/// (index 1) when CLIP fusion is on.
pub fn extract_summary<F: Float>(tape: &mut Tape<F>, tokens: TokenSequence, clip_fusion: bool) -> Result<Var> {
    let index = usize::from(clip_fusion);
    if tokens.tokens <= index {
        return Err(Error::Shape(format!(
            "summary token {index} requested from a sequence of {} tokens",
            tokens.tokens
        )));
    }
    let row = tape.slice(tokens.var, 1, index, 1)?;
    tape.reshape(row, &[tokens.batch, tokens.embed])
}
