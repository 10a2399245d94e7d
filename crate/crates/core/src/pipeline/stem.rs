use rand::Rng;

use crate::diffcore::{Bindings, Float, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Batch of token embeddings `[B, T, E]` recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub var: Var,
    pub batch: usize,
    pub tokens: usize,
    pub embed: usize,
}

impl TokenSequence {
    pub fn from_var<F: Float>(tape: &Tape<F>, var: Var) -> Result<Self> {
        match *tape.shape(var) {
            [batch, tokens, embed] => Ok(TokenSequence {
                var,
                batch,
                tokens,
                embed,
            }),
            ref s => Err(Error::Shape(format!("token sequence must be [B, T, E], got {s:?}"))),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.tokens, self.embed]
    }
}

/// Conv stem geometry: `convs` stride-2 3×3 convolutions then a 1×1 projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemConfig {
    pub side: usize,
    pub convs: usize,
    pub embed: usize,
}

impl StemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.convs == 0 || self.embed == 0 {
            return Err(Error::Shape("stem needs at least one conv and E > 0".into()));
        }
        let stride = 1usize << self.convs;
        if self.side == 0 || self.side % stride != 0 {
            return Err(Error::Shape(format!(
                "image side {} is not divisible by the stem stride {stride}",
                self.side
            )));
        }
        Ok(())
    }

    /// Output channels of each strided conv: 16, 32, ... capped at E.
    pub fn channels(&self) -> Vec<usize> {
        (0..self.convs).map(|i| (16usize << i).min(self.embed)).collect()
    }

    pub fn grid(&self) -> usize {
        self.side >> self.convs
    }

    /// Patch token count P.
    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StemParams {
    pub config: StemConfig,
    pub convs: Vec<(ParamId, ParamId)>,
    pub proj: (ParamId, ParamId),
    pub cls: ParamId,
}

impl StemParams {
    /// He-normal conv weights, zero biases, truncated-normal CLS token.
    pub fn init<F: Float>(config: StemConfig, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (i, out_ch) in config.channels().into_iter().enumerate() {
            let std = (2.0 / (in_ch * 9) as f64).sqrt();
            let w = store.add(format!("stem.conv{i}.weight"), Tensor::trunc_normal([out_ch, in_ch, 3, 3], std, rng));
            let b = store.add(format!("stem.conv{i}.bias"), Tensor::zeros([out_ch]));
            convs.push((w, b));
            in_ch = out_ch;
        }
        let std = (1.0 / in_ch as f64).sqrt();
        let pw = store.add("stem.proj.weight", Tensor::trunc_normal([config.embed, in_ch, 1, 1], std, rng));
        let pb = store.add("stem.proj.bias", Tensor::zeros([config.embed]));
        let cls = store.add("stem.cls", Tensor::trunc_normal([1, config.embed], 0.02, rng));
        Ok(StemParams {
            config,
            convs,
            proj: (pw, pb),
            cls,
        })
    }
}

/// Converts `[B, 3, S, S]` images into `[B, P + 1, E]` tokens, CLS first.
pub fn conv_stem<F: Float>(tape: &mut Tape<F>, bind: &Bindings, params: &StemParams, images: Var) -> Result<TokenSequence> {
    let cfg = params.config;
    let shape = tape.shape(images).to_vec();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != shape[3] {
        return Err(Error::Shape(format!("stem expects square [B, 3, S, S] images, got {shape:?}")));
    }
    if shape[2] != cfg.side {
        return Err(Error::Shape(format!(
            "stem configured for side {}, got {}",
            cfg.side, shape[2]
        )));
    }
    let batch = shape[0];
    let mut x = images;
    for &(w, b) in &params.convs {
        x = tape.conv2d(x, bind[w], bind[b], 2, 1)?;
        x = tape.relu(x)?;
    }
    x = tape.conv2d(x, bind[params.proj.0], bind[params.proj.1], 1, 0)?;
    let p = cfg.patches();
    x = tape.reshape(x, &[batch, cfg.embed, p])?;
    let patches = tape.permute(x, &[0, 2, 1])?;
    let cls = tape.broadcast_to(bind[params.cls], &[batch, 1, cfg.embed])?;
    let tokens = tape.concat(&[cls, patches], 1)?;
    TokenSequence::from_var(tape, tokens)
}

/// Adds rows `0..T` of the positional table to every sequence in the batch.
pub fn add_positional<F: Float>(tape: &mut Tape<F>, table: Var, tokens: TokenSequence) -> Result<TokenSequence> {
    let ts = tape.shape(table).to_vec();
    if ts.len() != 2 || ts[1] != tokens.embed {
        return Err(Error::Shape(format!("positional table {ts:?} does not match E={}", tokens.embed)));
    }
    if ts[0] < tokens.tokens {
        return Err(Error::Shape(format!(
            "positional table has {} rows, sequence needs {}",
            ts[0], tokens.tokens
        )));
    }
    let rows = if ts[0] == tokens.tokens {
        table
    } else {
        tape.slice(table, 0, 0, tokens.tokens)?
    };
    let out = tape.add(tokens.var, rows)?;
    TokenSequence::from_var(tape, out)
}
