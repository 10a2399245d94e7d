use rand::Rng;

use crate::diffcore::{Bindings, Float, ParamId, ParamStore, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::pipeline::TokenSequence;

/// Weights of one pre-norm ViT block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub embed: usize,
    pub heads: usize,
    pub ln1: (ParamId, ParamId),
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
    pub o: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub mlp_in: (ParamId, ParamId),
    pub mlp_out: (ParamId, ParamId),
}

pub(crate) fn layer_norm_params<F: Float>(store: &mut ParamStore<F>, prefix: &str, embed: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{prefix}.gamma"), Tensor::full([embed], F::one())),
        store.add(format!("{prefix}.beta"), Tensor::zeros([embed])),
    )
}

pub(crate) fn linear_params<F: Float>(
    store: &mut ParamStore<F>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> (ParamId, ParamId) {
    (
        store.add(format!("{prefix}.weight"), Tensor::trunc_normal([fan_in, fan_out], 0.02, rng)),
        store.add(format!("{prefix}.bias"), Tensor::zeros([fan_out])),
    )
}

impl BlockParams {
    /// Truncated-normal (std 0.02) weights, zero biases, unit LayerNorm gains.
    pub fn init<F: Float>(
        prefix: &str,
        embed: usize,
        heads: usize,
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || embed % heads != 0 {
            return Err(Error::Shape(format!("E={embed} is not divisible by h={heads}")));
        }
        let e = embed;
        Ok(BlockParams {
            embed,
            heads,
            ln1: layer_norm_params(store, &format!("{prefix}.ln1"), e),
            q: linear_params(store, &format!("{prefix}.attn.q"), e, e, rng),
            k: linear_params(store, &format!("{prefix}.attn.k"), e, e, rng),
            v: linear_params(store, &format!("{prefix}.attn.v"), e, e, rng),
            o: linear_params(store, &format!("{prefix}.attn.o"), e, e, rng),
            ln2: layer_norm_params(store, &format!("{prefix}.ln2"), e),
            mlp_in: linear_params(store, &format!("{prefix}.mlp.fc1"), e, 4 * e, rng),
            mlp_out: linear_params(store, &format!("{prefix}.mlp.fc2"), 4 * e, e, rng),
        })
    }

    /// Every parameter id of the block.
    pub fn ids(&self) -> Vec<ParamId> {
        [self.ln1, self.q, self.k, self.v, self.o, self.ln2, self.mlp_in, self.mlp_out]
            .into_iter()
            .flat_map(|(a, b)| [a, b])
            .collect()
    }
}

pub(crate) fn linear<F: Float>(tape: &mut Tape<F>, bind: &Bindings, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
    let y = tape.matmul(x, bind[p.0])?;
    tape.add(y, bind[p.1])
}

pub(crate) fn layer_norm<F: Float>(tape: &mut Tape<F>, bind: &Bindings, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
    tape.layer_norm(x, bind[p.0], bind[p.1], LAYER_NORM_EPS)
}

/// `[B, T, E] -> [B·h, T, E/h]`
fn split_heads<F: Float>(tape: &mut Tape<F>, x: Var, [b, t, e]: [usize; 3], h: usize) -> Result<Var> {
    let x = tape.reshape(x, &[b, t, h, e / h])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * h, t, e / h])
}

fn merge_heads<F: Float>(tape: &mut Tape<F>, x: Var, [b, t, e]: [usize; 3], h: usize) -> Result<Var> {
    let x = tape.reshape(x, &[b, h, t, e / h])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b, t, e])
}

/// Pre-norm ViT block: `x + MHSA(LN x)`, then `+ MLP(LN ·)`.
///
/// Returns the output tokens and the attention weights `[B·h, T, T]`.
pub fn vit_block_forward<F: Float>(
    tape: &mut Tape<F>,
    bind: &Bindings,
    p: &BlockParams,
    x: TokenSequence,
) -> Result<(TokenSequence, Var)> {
    if x.embed != p.embed {
        return Err(Error::Shape(format!("block expects E={}, tokens have E={}", p.embed, x.embed)));
    }
    let shape = x.shape();
    let h = p.heads;
    let n = layer_norm(tape, bind, x.var, p.ln1)?;
    let q = linear(tape, bind, n, p.q)?;
    let k = linear(tape, bind, n, p.k)?;
    let v = linear(tape, bind, n, p.v)?;
    let (q, k, v) = (
        split_heads(tape, q, shape, h)?,
        split_heads(tape, k, shape, h)?,
        split_heads(tape, v, shape, h)?,
    );
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / ((p.embed / h) as f64).sqrt())?;
    let attn = tape.softmax(scores)?;
    let mixed = tape.batch_matmul(attn, v, false)?;
    let mixed = merge_heads(tape, mixed, shape, h)?;
    let mixed = linear(tape, bind, mixed, p.o)?;
    let x1 = tape.add(x.var, mixed)?;

    let n = layer_norm(tape, bind, x1, p.ln2)?;
    let hidden = linear(tape, bind, n, p.mlp_in)?;
    let hidden = tape.gelu(hidden)?;
    let out = linear(tape, bind, hidden, p.mlp_out)?;
    let out = tape.add(x1, out)?;
    Ok((TokenSequence { var: out, ..x }, attn))
}

/// Concatenates two sequences along the token axis: `[B,T,E] + [B,T,E] -> [B,2T,E]`.
pub fn cat_tokens<F: Float>(tape: &mut Tape<F>, a: TokenSequence, b: TokenSequence) -> Result<TokenSequence> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "cat_tokens needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let var = tape.concat(&[a.var, b.var], 1)?;
    Ok(TokenSequence {
        var,
        tokens: 2 * a.tokens,
        ..a
    })
}

/// Inverse of [`cat_tokens`]: first and second halves of the token axis.
pub fn split_tokens<F: Float>(tape: &mut Tape<F>, y: TokenSequence) -> Result<(TokenSequence, TokenSequence)> {
    if y.tokens % 2 != 0 {
        return Err(Error::Shape(format!("split_tokens needs an even token count, got {}", y.tokens)));
    }
    let t = y.tokens / 2;
    let a = tape.slice(y.var, 1, 0, t)?;
    let b = tape.slice(y.var, 1, t, t)?;
    let half = TokenSequence { tokens: t, ..y };
    Ok((TokenSequence { var: a, ..half }, TokenSequence { var: b, ..half }))
}
