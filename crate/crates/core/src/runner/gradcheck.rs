use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::TrainConfig;
use super::model::Model;
use crate::clipfeat::{synthetic_features, CLIP_DIM};
use crate::diffcore::{check_gradients, Bindings, GradCheckReport, Tensor};
use crate::error::{Error, Result};
use crate::pipeline::{augment_pair, images_to_tensor, ImageRgb};
use crate::rng::SeedStream;

/// Finite-difference check of every parameter gradient of the total loss
/// in 64-bit. Weights are the seeded init plus Gaussian noise of std
/// `perturb`, so that no gradient is trivially small; inputs are random
/// images through the training augmentations.
pub fn check_model_gradients(config: &TrainConfig, h: f64, perturb: f64) -> Result<GradCheckReport> {
    let mut model = Model::<f64>::init(config)?;
    let root = SeedStream::new(config.seed).tagged("gradcheck");
    let noise = Normal::new(0.0, perturb).map_err(|e| Error::Input(e.to_string()))?;
    let mut rng = root.tagged("perturb").rng();
    for p in model.store.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }

    let b = config.batch;
    let mut img_rng = root.tagged("images").rng();
    let images: Vec<ImageRgb> = (0..b)
        .map(|_| ImageRgb::from_fn(config.side, config.side, |_, _, _| img_rng.random::<f32>()))
        .collect();
    let aug = config.augmentation();
    let mut views_a = Vec::new();
    let mut views_b = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let (a, b) = augment_pair(img, &aug, root.tagged("augment").derive(i as u64))?;
        views_a.push(a);
        views_b.push(b);
    }
    let ta: Tensor<f64> = images_to_tensor(&views_a.iter().collect::<Vec<_>>())?;
    let tb: Tensor<f64> = images_to_tensor(&views_b.iter().collect::<Vec<_>>())?;
    let clip: Option<Tensor<f64>> = if config.clip_fusion {
        let ids: Vec<String> = (0..b).map(|i| i.to_string()).collect();
        let labels: Vec<usize> = (0..b).map(|i| i % config.clusters).collect();
        let table = synthetic_features(&ids, &labels, CLIP_DIM, 1.0, 0.1, config.seed)?;
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        Some(table.gather(&refs)?)
    } else {
        None
    };

    let inputs: Vec<Tensor<f64>> = model.store.iter().map(|p| p.tensor.clone()).collect();
    check_gradients(&inputs, h, |tape, vars| {
        let bind = Bindings::from_vars(vars.to_vec());
        let ia = tape.constant(ta.clone());
        let ib = tape.constant(tb.clone());
        let c = clip.clone().map(|t| tape.constant(t));
        let fwd = model.forward(tape, &bind, ia, ib, c, true, false)?;
        Ok(fwd.loss.expect("loss requested").total)
    })
}
