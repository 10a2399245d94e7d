use crate::diffcore::{Float, Tensor};
use crate::error::{Error, Result};

/// RGB image, planar channel-first, pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    data: Vec<f32>,
    label: Option<usize>,
}

impl ImageRgb {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Input("image must be nonempty".into()));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Input(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageRgb {
            height,
            width,
            data,
            label: None,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        ImageRgb::new(height, width, vec![value.clamp(0.0, 1.0); 3 * height * width])
            .expect("filled image")
    }

    /// Builds an image from `f(channel, y, x)`, clamping into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        ImageRgb {
            height,
            width,
            data,
            label: None,
        }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Applies `f` to every value and clamps back into `[0, 1]`.
    pub fn map_pixels(&mut self, mut f: impl FnMut(f32) -> f32) {
        self.data.iter_mut().for_each(|v| *v = f(*v).clamp(0.0, 1.0));
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Stacks square images of equal side into a `[B, 3, S, S]` tensor.
pub fn images_to_tensor<F: Float>(images: &[&ImageRgb]) -> Result<Tensor<F>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Input("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::Shape(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height, img.width
            )));
        }
        data.extend(img.data.iter().map(|&v| F::of(v as f64)));
    }
    Tensor::new([images.len(), 3, h, w], data)
}
