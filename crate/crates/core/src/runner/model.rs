use rand::Rng;

use super::config::TrainConfig;
use crate::clipfeat::{init_projection, insert_clip_token};
use crate::diffcore::{Bindings, Float, ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoder::{mfavbs_forward, EncoderOutput, EncoderParams};
use crate::error::{Error, Result};
use crate::heads::{total_loss, HeadParams, LossTerms};
use crate::pipeline::{add_positional, conv_stem, StemParams, TokenSequence};
use crate::rng::SeedStream;

/// Every learnable weight of the network and the ids that address them.
#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: TrainConfig,
    pub store: ParamStore<F>,
    pub stem: StemParams,
    pub positional: ParamId,
    pub clip_projection: Option<ParamId>,
    pub encoder: EncoderParams,
    pub heads: HeadParams,
}

/// Forward pass of one batch: encoder outputs and, when requested, losses.
pub struct Forward<F> {
    pub encoded: EncoderOutput<F>,
    pub loss: Option<LossTerms>,
}

impl<F: Float> Model<F> {
    /// Fresh weights drawn from the config seed.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        let mut rng = SeedStream::new(config.seed).tagged("init").rng();
        Model::init_with(config, &mut rng)
    }

    pub fn init_with(config: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let stem = StemParams::init(config.stem(), &mut store, rng)?;
        let positional = store.add(
            "positional",
            Tensor::trunc_normal([config.tokens(), config.embed], 0.02, rng),
        );
        let clip_projection = if config.clip_fusion {
            init_projection(config.embed, &mut store, rng)
        } else {
            None
        };
        let encoder = EncoderParams::init(config.embed, config.heads, config.depth, &mut store, rng)?;
        let heads = HeadParams::init(config.embed, config.proj_dim, config.clusters, &mut store, rng)?;
        Ok(Model {
            config: config.clone(),
            store,
            stem,
            positional,
            clip_projection,
            encoder,
            heads,
        })
    }

    /// Same architecture with weights converted to another precision.
    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            positional: self.positional,
            clip_projection: self.clip_projection,
            encoder: self.encoder.clone(),
            heads: self.heads.clone(),
        }
    }

    /// Replaces every weight with the tensor of the same name.
    pub fn load_weights(&mut self, named: &[(String, Tensor<F>)]) -> Result<()> {
        if named.len() != self.store.len() {
            return Err(Error::Integrity(format!(
                "expected {} parameters, found {}",
                self.store.len(),
                named.len()
            )));
        }
        for (name, tensor) in named {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| Error::Integrity(format!("unexpected parameter {name:?}")))?;
            let slot = self.store.get_mut(id);
            if slot.shape() != tensor.shape() {
                return Err(Error::Integrity(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(tensor.data());
        }
        Ok(())
    }

    /// Stem, CLIP anchor, and positional table for one view.
    pub fn embed(&self, tape: &mut Tape<F>, bind: &Bindings, images: Var, clip: Option<Var>) -> Result<TokenSequence> {
        let mut tokens = conv_stem(tape, bind, &self.stem, images)?;
        if self.config.clip_fusion {
            let c0 = clip.ok_or_else(|| Error::Input("CLIP fusion is on but no features were given".into()))?;
            tokens = insert_clip_token(tape, bind, tokens, c0, self.clip_projection)?;
        }
        add_positional(tape, bind[self.positional], tokens)
    }

    /// Runs both views through the network. `images_*` are `[B, 3, S, S]`
    /// tape variables; `clip` is `[B, 512]` when fusion is on.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        bind: &Bindings,
        images_a: Var,
        images_b: Var,
        clip: Option<Var>,
        with_loss: bool,
        collect_attn: bool,
    ) -> Result<Forward<F>> {
        let ya = self.embed(tape, bind, images_a, clip)?;
        let yb = self.embed(tape, bind, images_b, clip)?;
        let encoded = mfavbs_forward(
            tape,
            bind,
            &self.encoder,
            ya,
            yb,
            self.config.clip_fusion,
            collect_attn,
        )?;
        let loss = if with_loss {
            Some(total_loss(
                tape,
                bind,
                &self.heads,
                encoded.h_a,
                encoded.h_b,
                &self.config.loss(),
            )?)
        } else {
            None
        };
        Ok(Forward { encoded, loss })
    }

    /// Cluster probabilities `[B, k]` from branch a.
    pub fn cluster_probs(&self, tape: &mut Tape<F>, bind: &Bindings, encoded: &EncoderOutput<F>) -> Result<Var> {
        crate::heads::cluster_assignment(tape, bind, &self.heads, encoded.h_a)
    }
}
