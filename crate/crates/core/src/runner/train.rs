use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{ClipSource, TrainConfig};
use super::model::Model;
use crate::clipfeat::{read_table, synthetic_features, FeatureTable, CLIP_DIM};
use crate::diffcore::{Float, Tape, Tensor};
use crate::error::{Error, Result};
use crate::heads::LossReport;
use crate::pipeline::{augment_pair, images_to_tensor, mask_region, Dataset, ImageRgb};
use crate::rng::SeedStream;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub instance_a: f64,
    pub instance_b: f64,
    pub cluster_a: f64,
    pub cluster_b: f64,
    pub penalty: f64,
    pub total: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log records always serialize")
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest mean total loss.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> String {
        self.log.iter().map(|l| l.to_json() + "\n").collect()
    }
}

/// Loads or synthesizes the CLIP features a config asks for, checking that
/// every dataset id is covered. Returns `None` when fusion is off.
pub fn resolve_features(config: &TrainConfig, dataset: &Dataset) -> Result<Option<FeatureTable>> {
    if !config.clip_fusion {
        return Ok(None);
    }
    let table = match &config.clip_source {
        ClipSource::Synthetic { class_sep, sigma } => {
            let labels = dataset.labels().map_err(|e| e.context("synthetic CLIP features need labels"))?;
            synthetic_features(&dataset.ids(), &labels, CLIP_DIM, *class_sep, *sigma, config.seed)?
        }
        ClipSource::File(path) => read_table(path, config.clip_normalize)?,
    };
    if table.dim() != CLIP_DIM {
        return Err(Error::Shape(format!("CLIP table has dim {}, expected {CLIP_DIM}", table.dim())));
    }
    table.check_covers(dataset.items.iter().map(|i| i.id.as_str()))?;
    Ok(Some(table))
}

/// Blackens a random share of every image, drawn uniformly from `range`.
/// Depends only on `seed` and each item's position.
pub fn apply_mask(dataset: &Dataset, range: (f64, f64), seed: u64) -> Dataset {
    let stream = SeedStream::new(seed).tagged("mask");
    dataset.map_images(|i, image| {
        let mut rng = stream.derive(i as u64).rng();
        let fraction = if range.1 > range.0 {
            rng.random_range(range.0..=range.1)
        } else {
            range.0
        };
        mask_region(image, fraction, &mut rng)
    })
}

/// The dataset as the model sees it: masked when the config says so.
pub fn prepared_dataset(config: &TrainConfig, dataset: &Dataset) -> Dataset {
    match config.mask {
        Some(range) => apply_mask(dataset, range, config.seed),
        None => dataset.clone(),
    }
}

fn clip_batch<F: Float>(features: Option<&FeatureTable>, dataset: &Dataset, idx: &[usize]) -> Result<Option<Tensor<F>>> {
    features
        .map(|t| {
            let ids: Vec<&str> = idx.iter().map(|&i| dataset.items[i].id.as_str()).collect();
            t.gather(&ids)
        })
        .transpose()
}

/// Optimizes the model with the two-view contrastive objective and keeps
/// the weights of the best epoch. `on_epoch` sees every log line as it is
/// produced.
pub fn train_with(
    config: &TrainConfig,
    dataset: &Dataset,
    features: Option<&FeatureTable>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.len() < 2 {
        return Err(Error::Input("training needs at least 2 images".into()));
    }
    if config.clip_fusion {
        let table = features.ok_or_else(|| Error::Input("CLIP fusion is on but no feature table was given".into()))?;
        table.check_covers(dataset.items.iter().map(|i| i.id.as_str()))?;
    }
    let data = prepared_dataset(config, dataset);
    let aug = config.augmentation();
    let root = SeedStream::new(config.seed);

    let mut state = Checkpoint::new(Model::<f32>::init(config)?);
    let mut best = state.clone();
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut root.tagged("shuffle").derive(epoch as u64).rng());
        let augment_stream = root.tagged("augment").derive(epoch as u64);

        let mut sums = [0.0f64; 6];
        let mut batches = 0usize;
        for (step, idx) in order.chunks(config.batch).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let report = train_step(&mut state, &data, idx, features, &aug, augment_stream)
                .map_err(|e| e.context(format!("epoch {epoch}, step {step}")))?;
            for (s, v) in sums.iter_mut().zip([
                report.instance_a,
                report.instance_b,
                report.cluster_a,
                report.cluster_b,
                report.penalty,
                report.total,
            ]) {
                *s += v;
            }
            batches += 1;
        }
        let mean = sums.map(|s| s / batches as f64);
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric { op: "epoch loss" }.context(format!("epoch {epoch}")));
        }
        let entry = EpochLog {
            epoch,
            instance_a: mean[0],
            instance_b: mean[1],
            cluster_a: mean[2],
            cluster_b: mean[3],
            penalty: mean[4],
            total: mean[5],
            seconds: if config.log_timing {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        on_epoch(&entry);
        log.push(entry);

        state.epoch = epoch as u32;
        if mean[5] < state.best_loss {
            state.best_loss = mean[5];
            best = state.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                stopped_early = epoch < config.epochs;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        log,
        stopped_early,
    })
}

pub fn train(config: &TrainConfig, dataset: &Dataset, features: Option<&FeatureTable>) -> Result<TrainOutcome> {
    train_with(config, dataset, features, |_| {})
}

fn refs(v: &[ImageRgb]) -> Vec<&ImageRgb> {
    v.iter().collect()
}

fn train_step(
    state: &mut Checkpoint,
    data: &Dataset,
    idx: &[usize],
    features: Option<&FeatureTable>,
    aug: &crate::pipeline::AugmentationConfig,
    stream: SeedStream,
) -> Result<LossReport> {
    let mut views_a = Vec::with_capacity(idx.len());
    let mut views_b = Vec::with_capacity(idx.len());
    for &i in idx {
        let (a, b) = augment_pair(&data.items[i].image, aug, stream.derive(i as u64))?;
        views_a.push(a);
        views_b.push(b);
    }
    let model = &state.model;
    let mut tape = Tape::<f32>::new();
    let bind = model.store.bind(&mut tape);
    let ia = tape.constant(images_to_tensor(&refs(&views_a))?);
    let ib = tape.constant(images_to_tensor(&refs(&views_b))?);
    let clip = clip_batch::<f32>(features, data, idx)?.map(|t| tape.constant(t));
    let fwd = model.forward(&mut tape, &bind, ia, ib, clip, true, false)?;
    let terms = fwd.loss.expect("loss requested");
    let report = LossReport::from_tape(&tape, &terms, &model.config.loss());
    let grads = tape.backward(terms.total)?;
    let store = &mut state.model.store;
    store.zero_grad();
    store.accumulate_grads(&bind, &grads);
    state.adam.update(store);
    Ok(report)
}
