//! Robustness masking: blacken part of each image before augmentation.

use rand::Rng;

use super::image::ImageRgb;
use crate::error::{Error, Result};

/// Allowed range for the masked area fraction.
pub const MASK_FRACTION_RANGE: (f64, f64) = (0.3, 0.5);

/// Blackens an axis-aligned region covering `fraction` of the pixels.
pub fn mask_image(image: &ImageRgb, fraction: f64, rng: &mut impl Rng) -> Result<ImageRgb> {
    let (lo, hi) = MASK_FRACTION_RANGE;
    if !(lo..=hi).contains(&fraction) {
        return Err(Error::Input(format!(
            "mask fraction {fraction} outside [{lo}, {hi}]"
        )));
    }
    Ok(mask_region(image, fraction, rng))
}

/// Same as [`mask_image`] without the range check; any fraction in `[0, 1]`.
///
/// Uses a single rectangle when one lands within 2% of the target pixel
/// count, otherwise a full-width band plus a partial row, which hits the
/// target exactly.
pub fn mask_region(image: &ImageRgb, fraction: f64, rng: &mut impl Rng) -> ImageRgb {
    let (h, w) = (image.height(), image.width());
    let total = h * w;
    let target = (fraction.clamp(0.0, 1.0) * total as f64).round() as usize;
    let mut out = image.clone();
    if target == 0 {
        return out;
    }
    let tol = 0.02 * total as f64;
    let candidates: Vec<(usize, usize)> = (1..=h)
        .filter_map(|rh| {
            let rw = ((target as f64 / rh as f64).round() as usize).clamp(1, w);
            ((rh * rw) as f64 - target as f64).abs().le(&tol).then_some((rh, rw))
        })
        .collect();
    let blacken = |img: &mut ImageRgb, y: usize, x: usize| {
        for c in 0..3 {
            img.set(c, y, x, 0.0);
        }
    };
    if candidates.is_empty() {
        let rows = target / w;
        let rest = target % w;
        let band = rows + usize::from(rest > 0);
        let y0 = rng.random_range(0..=h - band);
        for y in y0..y0 + rows {
            for x in 0..w {
                blacken(&mut out, y, x);
            }
        }
        let x0 = rng.random_range(0..=w - rest);
        for x in x0..x0 + rest {
            blacken(&mut out, y0 + rows, x);
        }
    } else {
        let (rh, rw) = candidates[rng.random_range(0..candidates.len())];
        let y0 = rng.random_range(0..=h - rh);
        let x0 = rng.random_range(0..=w - rw);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                blacken(&mut out, y, x);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn zero_pixels(img: &ImageRgb) -> usize {
        let n = img.height() * img.width();
        (0..n)
            .filter(|&i| (0..3).all(|c| img.plane(c)[i] == 0.0))
            .count()
    }

    #[test]
    fn zero_fraction_leaves_image_unchanged() {
        let img = ImageRgb::filled(8, 8, 1.0);
        let out = mask_region(&img, 0.0, &mut SeedStream::new(1).rng());
        assert_eq!(out, img);
    }

    #[test]
    fn half_mask_on_ten_by_ten() {
        let img = ImageRgb::filled(10, 10, 1.0);
        for s in 0..20 {
            let out = mask_image(&img, 0.5, &mut SeedStream::new(s).rng()).unwrap();
            let mean = out.data().iter().sum::<f32>() / out.data().len() as f32;
            assert!((mean - 0.5).abs() <= 0.02, "mean {mean}");
        }
    }

    #[test]
    fn masked_count_on_32_square() {
        let img = ImageRgb::filled(32, 32, 0.7);
        for s in 0..50 {
            let out = mask_image(&img, 0.3, &mut SeedStream::new(s).rng()).unwrap();
            let zeros = zero_pixels(&out);
            assert!((287..=327).contains(&zeros), "{zeros} masked pixels");
        }
    }

    #[test]
    fn out_of_range_fraction_is_rejected() {
        let img = ImageRgb::filled(4, 4, 1.0);
        let mut rng = SeedStream::new(0).rng();
        assert!(matches!(mask_image(&img, 0.6, &mut rng), Err(Error::Input(_))));
        assert!(matches!(mask_image(&img, 0.1, &mut rng), Err(Error::Input(_))));
    }

    #[test]
    fn small_images_fall_back_to_exact_band() {
        let img = ImageRgb::filled(7, 3, 1.0);
        for s in 0..20 {
            let out = mask_region(&img, 0.45, &mut SeedStream::new(s).rng());
            let want = (0.45f64 * 21.0).round() as usize;
            let got = zero_pixels(&out);
            assert!((got as f64 - want as f64).abs() <= 0.02 * 21.0, "{got} vs {want}");
        }
    }
}
