//! Projection heads and the instance/cluster contrastive losses.

mod loss;

pub use loss::{
    cluster_loss, cosine_sim, instance_loss, penalty, predict_clusters, total_loss, CosineSim, LossConfig,
    LossReport, LossTerms, PairLoss,
};

use rand::Rng;

use crate::diffcore::{Bindings, Float, ParamId, ParamStore, Tape, Var};
use crate::encoder::{linear, linear_params};
use crate::error::{Error, Result};

/// Instance head `E → E → d_I` (ReLU) and cluster head `E → E → k` (ReLU, softmax).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub instance: [(ParamId, ParamId); 2],
    pub cluster: [(ParamId, ParamId); 2],
    pub proj_dim: usize,
    pub clusters: usize,
}

impl HeadParams {
    pub fn init<F: Float>(
        embed: usize,
        proj_dim: usize,
        clusters: usize,
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if proj_dim < 2 || clusters < 2 {
            return Err(Error::Shape(format!(
                "heads need d_I >= 2 and k >= 2, got d_I={proj_dim}, k={clusters}"
            )));
        }
        Ok(HeadParams {
            instance: [
                linear_params(store, "heads.instance.fc1", embed, embed, rng),
                linear_params(store, "heads.instance.fc2", embed, proj_dim, rng),
            ],
            cluster: [
                linear_params(store, "heads.cluster.fc1", embed, embed, rng),
                linear_params(store, "heads.cluster.fc2", embed, clusters, rng),
            ],
            proj_dim,
            clusters,
        })
    }
}

fn mlp<F: Float>(tape: &mut Tape<F>, bind: &Bindings, x: Var, layers: &[(ParamId, ParamId); 2]) -> Result<Var> {
    let h = linear(tape, bind, x, layers[0])?;
    let h = tape.relu(h)?;
    linear(tape, bind, h, layers[1])
}

/// Instance embeddings `z = P_I(h)`, `[B, d_I]`.
pub fn instance_projection<F: Float>(tape: &mut Tape<F>, bind: &Bindings, p: &HeadParams, h: Var) -> Result<Var> {
    mlp(tape, bind, h, &p.instance)
}

/// Cluster probabilities `softmax(P_C(h))`, `[B, k]`.
pub fn cluster_assignment<F: Float>(tape: &mut Tape<F>, bind: &Bindings, p: &HeadParams, h: Var) -> Result<Var> {
    let logits = mlp(tape, bind, h, &p.cluster)?;
    tape.softmax(logits)
}
