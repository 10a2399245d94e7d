use crate::diffcore::{Bindings, Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::{cluster_assignment, instance_projection, HeadParams};

const COSINE_EPS: f64 = 1e-12;
const ENTROPY_EPS: f64 = 1e-12;

/// Cosine similarity, with a flag set when either vector has zero norm
/// (the value is then 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSim {
    pub value: f64,
    pub zero_norm: bool,
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> CosineSim {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu < COSINE_EPS || nv < COSINE_EPS {
        return CosineSim {
            value: 0.0,
            zero_norm: true,
        };
    }
    CosineSim {
        value: (dot / (nu * nv)).clamp(-1.0, 1.0),
        zero_norm: false,
    }
}

/// Loss settings. `strict_negatives` drops the positive pair from every InfoNCE
/// denominator (negatives only); `rowwise_clusters` contrasts cluster
/// probability rows (samples) instead of cluster columns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub tau_instance: f64,
    pub tau_cluster: f64,
    pub penalty_weight: f64,
    pub strict_negatives: bool,
    pub rowwise_clusters: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_instance: 0.5,
            tau_cluster: 1.0,
            penalty_weight: 1.0,
            strict_negatives: false,
            rowwise_clusters: false,
        }
    }
}

/// The two symmetric halves of a paired InfoNCE loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairLoss {
    pub a: Var,
    pub b: Var,
}

/// InfoNCE over the `2n × 2n` cosine matrix of `[x_a; x_b]` (rows are the
/// items). Row `i` of view a is positive with row `i` of view b; the other
/// `2n − 2` rows are negatives.
fn paired_info_nce<F: Float>(tape: &mut Tape<F>, xa: Var, xb: Var, tau: f64, strict: bool) -> Result<PairLoss> {
    let (sa, sb) = (tape.shape(xa).to_vec(), tape.shape(xb).to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(Error::Shape(format!("paired InfoNCE needs equal [n, d] inputs, got {sa:?} and {sb:?}")));
    }
    let (n, d) = (sa[0], sa[1]);
    if n < 2 {
        return Err(Error::Contract(format!("InfoNCE needs at least 2 items for negatives, got {n}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    let m = 2 * n;
    let z = tape.concat(&[xa, xb], 0)?;
    let z = tape.normalize_rows(z, COSINE_EPS)?;
    let z = tape.reshape(z, &[1, m, d])?;
    let sim = tape.batch_matmul(z, z, true)?;
    let sim = tape.reshape(sim, &[m, m])?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let positive: Vec<usize> = (0..m).map(|i| (i + n) % m).collect();
    let mask = (0..m * m)
        .map(|e| {
            let (i, j) = (e / m, e % m);
            j != i && !(strict && j == positive[i])
        })
        .collect();
    let lse = tape.masked_logsumexp(logits, mask)?;
    let pos = tape.gather(logits, positive)?;
    let per_row = tape.sub(lse, pos)?;
    let half = |tape: &mut Tape<F>, start: usize| -> Result<Var> {
        let rows = tape.slice(per_row, 0, start, n)?;
        tape.mean_all(rows)
    };
    Ok(PairLoss {
        a: half(tape, 0)?,
        b: half(tape, n)?,
    })
}

/// Instance-level loss on projections `[B, d_I]`; `a` anchors on view a,
/// `b` on view b, each averaged over B.
pub fn instance_loss<F: Float>(tape: &mut Tape<F>, za: Var, zb: Var, cfg: &LossConfig) -> Result<PairLoss> {
    paired_info_nce(tape, za, zb, cfg.tau_instance, cfg.strict_negatives)
}

fn check_stochastic<F: Float>(tape: &Tape<F>, c: Var) -> Result<()> {
    let shape = tape.shape(c);
    if shape.len() != 2 {
        return Err(Error::Shape(format!("cluster assignments must be [B, k], got {shape:?}")));
    }
    let k = shape[1];
    for (i, row) in tape.value(c).chunks(k).enumerate() {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > 1e-4 || row.iter().any(|v| v.as_f64() < 0.0) {
            return Err(Error::Contract(format!("cluster row {i} is not a distribution (sum {s})")));
        }
    }
    Ok(())
}

/// Cluster-level contrast on assignments `[B, k]`. Columns (one B-vector per
/// cluster) are contrasted across views and averaged over k; with
/// `rowwise_clusters` the probability rows are contrasted instead.
pub fn cluster_loss<F: Float>(tape: &mut Tape<F>, ca: Var, cb: Var, cfg: &LossConfig) -> Result<PairLoss> {
    check_stochastic(tape, ca)?;
    check_stochastic(tape, cb)?;
    let k = tape.shape(ca)[1];
    if k < 2 {
        return Err(Error::Contract("cluster contrast needs k >= 2".into()));
    }
    if cfg.rowwise_clusters {
        return paired_info_nce(tape, ca, cb, cfg.tau_cluster, cfg.strict_negatives);
    }
    let ta = tape.permute(ca, &[1, 0])?;
    let tb = tape.permute(cb, &[1, 0])?;
    paired_info_nce(tape, ta, tb, cfg.tau_cluster, cfg.strict_negatives)
}

/// Balance penalty `log k − H(p̄)` for one view, where `p̄` is the mean
/// assignment over the batch.
pub fn penalty<F: Float>(tape: &mut Tape<F>, c: Var) -> Result<Var> {
    let shape = tape.shape(c).to_vec();
    let (b, k) = (shape[0], shape[1]);
    let sums = tape.sum_rows(c)?;
    let mean = tape.scale(sums, 1.0 / b as f64)?;
    let eps = tape.constant(Tensor::full([k], F::of(ENTROPY_EPS)));
    let shifted = tape.add(mean, eps)?;
    let log = tape.log(shifted)?;
    let plogp = tape.mul(mean, log)?;
    let neg_entropy = tape.sum_all(plogp)?;
    let log_k = tape.constant(Tensor::full([1], F::of((k as f64).ln())));
    tape.add(neg_entropy, log_k)
}

/// All loss terms of one batch, recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub instance: PairLoss,
    pub cluster: PairLoss,
    /// Summed over both views, before weighting.
    pub penalty: Var,
    pub total: Var,
    pub probs_a: Var,
    pub probs_b: Var,
}

/// Heads plus `L = L_I^a + L_I^b + L_C^a + L_C^b + w · (F_a + F_b)`.
pub fn total_loss<F: Float>(
    tape: &mut Tape<F>,
    bind: &Bindings,
    heads: &HeadParams,
    h_a: Var,
    h_b: Var,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let za = instance_projection(tape, bind, heads, h_a)?;
    let zb = instance_projection(tape, bind, heads, h_b)?;
    let probs_a = cluster_assignment(tape, bind, heads, h_a)?;
    let probs_b = cluster_assignment(tape, bind, heads, h_b)?;
    let instance = instance_loss(tape, za, zb, cfg)?;
    let cluster = cluster_loss(tape, probs_a, probs_b, cfg)?;
    let pa = penalty(tape, probs_a)?;
    let pb = penalty(tape, probs_b)?;
    let pen = tape.add(pa, pb)?;
    let mut total = tape.add(instance.a, instance.b)?;
    total = tape.add(total, cluster.a)?;
    total = tape.add(total, cluster.b)?;
    let weighted = tape.scale(pen, cfg.penalty_weight)?;
    total = tape.add(total, weighted)?;
    Ok(LossTerms {
        instance,
        cluster,
        penalty: pen,
        total,
        probs_a,
        probs_b,
    })
}

/// Scalar values of every loss component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub instance_a: f64,
    pub instance_b: f64,
    pub cluster_a: f64,
    pub cluster_b: f64,
    pub penalty: f64,
    pub total: f64,
    pub tau_instance: f64,
    pub tau_cluster: f64,
}

impl LossReport {
    pub fn from_tape<F: Float>(tape: &Tape<F>, terms: &LossTerms, cfg: &LossConfig) -> Self {
        let s = |v: Var| tape.scalar(v).as_f64();
        LossReport {
            instance_a: s(terms.instance.a),
            instance_b: s(terms.instance.b),
            cluster_a: s(terms.cluster.a),
            cluster_b: s(terms.cluster.b),
            penalty: s(terms.penalty),
            total: s(terms.total),
            tau_instance: cfg.tau_instance,
            tau_cluster: cfg.tau_cluster,
        }
    }

    /// Sum of the components with the given penalty weight.
    pub fn recompose(&self, penalty_weight: f64) -> f64 {
        self.instance_a + self.instance_b + self.cluster_a + self.cluster_b + penalty_weight * self.penalty
    }
}

/// Row-wise argmax of `[B, k]` probabilities; ties go to the lowest index.
pub fn predict_clusters<F: Float>(probs: &[F], k: usize) -> Vec<usize> {
    probs
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, F::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
