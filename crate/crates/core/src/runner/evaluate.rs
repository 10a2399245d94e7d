use super::checkpoint::Checkpoint;
use super::model::Model;
use super::train::prepared_dataset;
use crate::clipfeat::FeatureTable;
use crate::diffcore::{Float, Tape};
use crate::error::{Error, Result};
use crate::heads::predict_clusters;
use crate::metrics::MetricsReport;
use crate::pipeline::{augment::resize, images_to_tensor, Dataset};

const EVAL_CHUNK: usize = 64;

/// Cluster probabilities `[n, k]` (row-major) from one resize-only view per
/// image, fed to both branches. Masking from the config is applied first.
pub fn cluster_probabilities<F: Float>(
    model: &Model<F>,
    dataset: &Dataset,
    features: Option<&FeatureTable>,
) -> Result<Vec<F>> {
    let cfg = &model.config;
    if cfg.clip_fusion {
        let table = features.ok_or_else(|| Error::Input("CLIP fusion is on but no feature table was given".into()))?;
        table.check_covers(dataset.items.iter().map(|i| i.id.as_str()))?;
    }
    let data = prepared_dataset(cfg, dataset);
    let mut probs = Vec::with_capacity(data.len() * cfg.clusters);
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_CHUNK) {
        let views: Vec<_> = idx.iter().map(|&i| resize(&data.items[i].image, cfg.side)).collect();
        let mut tape = Tape::<F>::new();
        let bind = model.store.bind(&mut tape);
        let images = tape.constant(images_to_tensor(&views.iter().collect::<Vec<_>>())?);
        let clip = match features.filter(|_| cfg.clip_fusion) {
            Some(t) => {
                let ids: Vec<&str> = idx.iter().map(|&i| data.items[i].id.as_str()).collect();
                Some(tape.constant(t.gather(&ids)?))
            }
            None => None,
        };
        let fwd = model.forward(&mut tape, &bind, images, images, clip, false, false)?;
        let p = model.cluster_probs(&mut tape, &bind, &fwd.encoded)?;
        probs.extend_from_slice(tape.value(p));
    }
    Ok(probs)
}

pub fn predict<F: Float>(model: &Model<F>, dataset: &Dataset, features: Option<&FeatureTable>) -> Result<Vec<usize>> {
    let probs = cluster_probabilities(model, dataset, features)?;
    Ok(predict_clusters(&probs, model.config.clusters))
}

/// ACC, NMI, and ARI of the model's cluster assignments against the labels.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, features: Option<&FeatureTable>) -> Result<MetricsReport> {
    let truth = dataset.labels()?;
    let pred = predict(&checkpoint.model, dataset, features)?;
    MetricsReport::compute(&pred, &truth)
}
