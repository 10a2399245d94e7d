//! Image ingestion, augmentation, masking, conv stem, and datasets.

pub mod augment;
pub mod dataset;
mod image;
pub mod mask;
mod stem;
pub mod synth;

pub use augment::{augment_pair, AugmentationConfig, View};
pub use dataset::{load_dataset, read_ppm, save_dataset, write_ppm, Dataset, Item};
pub use image::{images_to_tensor, ImageRgb};
pub use mask::{mask_image, mask_region};
pub use stem::{add_positional, conv_stem, StemConfig, StemParams, TokenSequence};
pub use synth::{class_template, gen_synthetic, SyntheticSpec, TemplateFamily};
