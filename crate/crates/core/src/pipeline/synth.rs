//! Deterministic synthetic image classes.

use rand_distr::{Distribution, Normal};

use super::augment::hsv_to_rgb;
use super::dataset::{Dataset, Item};
use super::image::ImageRgb;
use crate::error::{Error, Result};
use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateFamily {
    /// Each class gets its own texture and tint.
    Distinct,
    /// Every class shares one stripe template, so images of different
    /// classes differ only in their noise.
    Confusable,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub noise: f64,
    pub family: TemplateFamily,
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, side: usize, noise: f64) -> Self {
        SyntheticSpec {
            classes,
            per_class,
            side,
            noise,
            family: TemplateFamily::Distinct,
        }
    }
}

fn texture(kind: usize, freq: f64, u: f64, v: f64) -> bool {
    let wave = |t: f64| (t * freq).rem_euclid(1.0) < 0.5;
    match kind % 4 {
        0 => wave(v),
        1 => wave(u),
        2 => wave(u) ^ wave(v),
        _ => {
            let (du, dv) = (u - 0.5, v - 0.5);
            wave((du * du + dv * dv).sqrt() * 1.5)
        }
    }
}

/// Noise-free template of one class.
pub fn class_template(spec: &SyntheticSpec, class: usize) -> ImageRgb {
    let s = spec.side;
    let (kind, freq, hue) = match spec.family {
        TemplateFamily::Distinct => {
            let round = class / 4;
            (class % 4, 4.0 + round as f64, class as f64 / spec.classes as f64)
        }
        TemplateFamily::Confusable => (0, 4.0, 0.6),
    };
    let (fr, fg, fb) = hsv_to_rgb(hue as f32, 0.6, 0.95);
    let fore = [fr, fg, fb];
    let back = [0.05f32; 3];
    ImageRgb::from_fn(s, s, |c, y, x| {
        let u = (x as f64 + 0.5) / s as f64;
        let v = (y as f64 + 0.5) / s as f64;
        if texture(kind, freq, u, v) {
            fore[c]
        } else {
            back[c]
        }
    })
}

/// `classes × per_class` labeled images: template plus clamped Gaussian noise.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Input("synthetic data needs at least 2 classes".into()));
    }
    if spec.side < 2 || spec.per_class == 0 {
        return Err(Error::Input("synthetic images need side >= 2 and per_class >= 1".into()));
    }
    let normal = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Input(e.to_string()))?;
    let stream = SeedStream::new(seed).tagged("synthetic");
    let mut data = Dataset {
        items: Vec::with_capacity(spec.classes * spec.per_class),
        class_names: (0..spec.classes).map(|c| format!("class{c:02}")).collect(),
    };
    for class in 0..spec.classes {
        let template = class_template(spec, class);
        for i in 0..spec.per_class {
            let mut rng = stream.derive(class as u64).derive(i as u64).rng();
            let mut image = template.clone();
            if spec.noise > 0.0 {
                image.map_pixels(|v| v + normal.sample(&mut rng) as f32);
            }
            data.items.push(Item {
                id: format!("class{class:02}/{i:05}.ppm"),
                image: image.with_label(class),
            });
        }
    }
    Ok(data)
}
