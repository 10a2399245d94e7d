//! The two augmentation pipelines.
//!
//! View a: resized crop, color jitter, grayscale, horizontal flip, blur.
//! View b: the same plus solarize.

use rand::seq::SliceRandom;
use rand::Rng;

use super::image::ImageRgb;
use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Grayscale luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub crop_ratio_min: f64,
    pub crop_ratio_max: f64,
    pub p_colorjitter: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub p_grayscale: f64,
    pub p_blur: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub p_hflip: f64,
    pub p_solarize: f64,
    pub solarize_threshold: f32,
    pub output_side: usize,
}

impl AugmentationConfig {
    pub fn new(output_side: usize) -> Self {
        AugmentationConfig {
            crop_scale_min: 0.08,
            crop_scale_max: 1.0,
            crop_ratio_min: 3.0 / 4.0,
            crop_ratio_max: 4.0 / 3.0,
            p_colorjitter: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            p_grayscale: 0.2,
            p_blur: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
            p_hflip: 0.5,
            p_solarize: 0.2,
            solarize_threshold: 0.5,
            output_side,
        }
    }

    /// Every transform disabled and crops covering the whole image.
    pub fn identity(output_side: usize) -> Self {
        AugmentationConfig {
            crop_scale_min: 1.0,
            crop_scale_max: 1.0,
            p_colorjitter: 0.0,
            p_grayscale: 0.0,
            p_blur: 0.0,
            p_hflip: 0.0,
            p_solarize: 0.0,
            ..Self::new(output_side)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_colorjitter", self.p_colorjitter),
            ("p_grayscale", self.p_grayscale),
            ("p_blur", self.p_blur),
            ("p_hflip", self.p_hflip),
            ("p_solarize", self.p_solarize),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Input(format!("{name}={p} is not a probability")));
            }
        }
        if !(0.0 < self.crop_scale_min && self.crop_scale_min <= self.crop_scale_max && self.crop_scale_max <= 1.0) {
            return Err(Error::Input(format!(
                "crop scale range [{}, {}] invalid",
                self.crop_scale_min, self.crop_scale_max
            )));
        }
        if !(0.0 < self.crop_ratio_min && self.crop_ratio_min <= self.crop_ratio_max) {
            return Err(Error::Input("crop aspect ratio range invalid".into()));
        }
        if self.blur_sigma_min <= 0.0 || self.blur_sigma_min > self.blur_sigma_max {
            return Err(Error::Input("blur sigma range invalid".into()));
        }
        if self.output_side == 0 {
            return Err(Error::Input("output side must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    A,
    B,
}

/// Produces the two views of one image. Randomness comes only from `stream`,
/// which the caller derives from (seed, epoch, image index).
pub fn augment_pair(
    image: &ImageRgb,
    config: &AugmentationConfig,
    stream: SeedStream,
) -> Result<(ImageRgb, ImageRgb)> {
    config.validate()?;
    if image.height() < 2 || image.width() < 2 {
        return Err(Error::Input(format!(
            "image {}x{} is smaller than 2x2",
            image.height(),
            image.width()
        )));
    }
    let a = augment_view(image, config, View::A, &mut stream.derive(0).rng());
    let b = augment_view(image, config, View::B, &mut stream.derive(1).rng());
    Ok((a, b))
}

pub fn augment_view(image: &ImageRgb, config: &AugmentationConfig, view: View, rng: &mut impl Rng) -> ImageRgb {
    let (y0, x0, h, w) = crop_box(image.height(), image.width(), config, rng);
    let mut out = resize_region(image, y0, x0, h, w, config.output_side);
    if rng.random_bool(config.p_colorjitter) {
        color_jitter(&mut out, config, rng);
    }
    if rng.random_bool(config.p_grayscale) {
        grayscale(&mut out);
    }
    if rng.random_bool(config.p_hflip) {
        hflip(&mut out);
    }
    if rng.random_bool(config.p_blur) {
        let sigma = rng.random_range(config.blur_sigma_min..=config.blur_sigma_max);
        gaussian_blur(&mut out, sigma);
    }
    if view == View::B && rng.random_bool(config.p_solarize) {
        solarize(&mut out, config.solarize_threshold);
    }
    out
}

/// Random crop box `(y, x, h, w)` with area fraction and aspect ratio drawn
/// from the configured ranges; falls back to the whole image.
fn crop_box(height: usize, width: usize, config: &AugmentationConfig, rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    let area = (height * width) as f64;
    let (lr0, lr1) = (config.crop_ratio_min.ln(), config.crop_ratio_max.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(config.crop_scale_min..=config.crop_scale_max);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= width && h <= height {
            let y = rng.random_range(0..=height - h);
            let x = rng.random_range(0..=width - w);
            return (y, x, h, w);
        }
    }
    (0, 0, height, width)
}

/// Bilinear resampling of a region to `side × side` (pixel-center aligned).
pub fn resize_region(image: &ImageRgb, y0: usize, x0: usize, h: usize, w: usize, side: usize) -> ImageRgb {
    let sy = h as f64 / side as f64;
    let sx = w as f64 / side as f64;
    let taps = |dst: usize, scale: f64, origin: usize, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        let t = (src - i0 as f64) as f32;
        (origin + i0, origin + i1, t)
    };
    let rows: Vec<_> = (0..side).map(|d| taps(d, sy, y0, h)).collect();
    let cols: Vec<_> = (0..side).map(|d| taps(d, sx, x0, w)).collect();
    ImageRgb::from_fn(side, side, |c, y, x| {
        let (ya, yb, ty) = rows[y];
        let (xa, xb, tx) = cols[x];
        let top = if tx == 0.0 {
            image.get(c, ya, xa)
        } else {
            image.get(c, ya, xa) * (1.0 - tx) + image.get(c, ya, xb) * tx
        };
        if ty == 0.0 {
            top
        } else {
            let bottom = if tx == 0.0 {
                image.get(c, yb, xa)
            } else {
                image.get(c, yb, xa) * (1.0 - tx) + image.get(c, yb, xb) * tx
            };
            top * (1.0 - ty) + bottom * ty
        }
    })
}

/// Plain resize of the whole image.
pub fn resize(image: &ImageRgb, side: usize) -> ImageRgb {
    resize_region(image, 0, 0, image.height(), image.width(), side)
}

fn luma_plane(image: &ImageRgb) -> Vec<f32> {
    let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
    (0..r.len())
        .map(|i| (LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i]).clamp(0.0, 1.0))
        .collect()
}

pub fn grayscale(image: &mut ImageRgb) {
    let l = luma_plane(image);
    for c in 0..3 {
        image.plane_mut(c).copy_from_slice(&l);
    }
}

pub fn hflip(image: &mut ImageRgb) {
    let w = image.width();
    for c in 0..3 {
        for row in image.plane_mut(c).chunks_mut(w) {
            row.reverse();
        }
    }
}

/// Pixels at or above `threshold` are inverted.
pub fn solarize(image: &mut ImageRgb, threshold: f32) {
    image.map_pixels(|v| if v >= threshold { 1.0 - v } else { v });
}

pub fn adjust_brightness(image: &mut ImageRgb, factor: f32) {
    image.map_pixels(|v| v * factor);
}

pub fn adjust_contrast(image: &mut ImageRgb, factor: f32) {
    let l = luma_plane(image);
    let mean = l.iter().sum::<f32>() / l.len() as f32;
    image.map_pixels(|v| factor * v + (1.0 - factor) * mean);
}

pub fn adjust_saturation(image: &mut ImageRgb, factor: f32) {
    let l = luma_plane(image);
    for c in 0..3 {
        for (v, &g) in image.plane_mut(c).iter_mut().zip(&l) {
            *v = (factor * *v + (1.0 - factor) * g).clamp(0.0, 1.0);
        }
    }
}

/// Rotates hue by `shift` turns (in `[-0.5, 0.5]`).
pub fn adjust_hue(image: &mut ImageRgb, shift: f32) {
    let n = image.height() * image.width();
    for i in 0..n {
        let (r, g, b) = (image.data()[i], image.data()[n + i], image.data()[2 * n + i]);
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        image.plane_mut(0)[i] = r.clamp(0.0, 1.0);
        image.plane_mut(1)[i] = g.clamp(0.0, 1.0);
        image.plane_mut(2)[i] = b.clamp(0.0, 1.0);
    }
}

pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let mx = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let d = mx - mn;
    let s = if mx > 0.0 { d / mx } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if mx == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if mx == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, mx)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn color_jitter(image: &mut ImageRgb, config: &AugmentationConfig, rng: &mut impl Rng) {
    let mut order = [0u8, 1, 2, 3];
    order.shuffle(rng);
    let factor = |rng: &mut dyn rand::RngCore, s: f64| -> f32 {
        if s <= 0.0 {
            1.0
        } else {
            rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32
        }
    };
    for step in order {
        match step {
            0 => {
                let f = factor(rng, config.brightness);
                adjust_brightness(image, f);
            }
            1 => {
                let f = factor(rng, config.contrast);
                adjust_contrast(image, f);
            }
            2 => {
                let f = factor(rng, config.saturation);
                adjust_saturation(image, f);
            }
            _ => {
                if config.hue > 0.0 {
                    let shift = rng.random_range(-config.hue..=config.hue) as f32;
                    adjust_hue(image, shift);
                }
            }
        }
    }
}

/// Mirror index into `0..len` for any offset (reflection without repeating
/// the edge pixel).
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Separable Gaussian blur, radius `ceil(2σ)`, reflected borders.
pub fn gaussian_blur(image: &mut ImageRgb, sigma: f64) {
    let radius = (2.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (image.height(), image.width());
    let mut tmp = vec![0.0f32; h * w];
    for c in 0..3 {
        let plane = image.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, k) in kernel.iter().enumerate() {
                    let xi = reflect(x as isize + t as isize - radius, w);
                    acc += k * plane[y * w + xi];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, k) in kernel.iter().enumerate() {
                    let yi = reflect(y as isize + t as isize - radius, h);
                    acc += k * tmp[yi * w + x];
                }
                plane[y * w + x] = acc.clamp(0.0, 1.0);
            }
        }
    }
}
