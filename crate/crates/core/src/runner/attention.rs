use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use crate::clipfeat::FeatureTable;
use crate::diffcore::{Tape, Tensor};
use crate::encoder::{AttentionKind, AttentionMap};
use crate::error::{Error, Result};
use crate::pipeline::{augment_pair, images_to_tensor, ImageRgb};
use crate::rng::SeedStream;

/// Head-averaged attention of one block pass, `tokens × tokens`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    pub name: String,
    pub tokens: usize,
    pub weights: Vec<f64>,
}

impl HeatMap {
    fn from_map(name: &str, map: &AttentionMap<f32>) -> Self {
        HeatMap {
            name: name.to_owned(),
            tokens: map.tokens(),
            weights: map.head_mean(0),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.weights.chunks(self.tokens) {
            let line: Vec<String> = row.iter().map(|w| format!("{w:.8}")).collect();
            writeln!(s, "{}", line.join(",")).unwrap();
        }
        s
    }

    /// Binary 8-bit PGM with the weights min-max scaled to 0..=255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (lo, hi) = self
            .weights
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &w| (l.min(w), h.max(w)));
        let span = hi - lo;
        let mut out = format!("P5\n{} {}\n255\n", self.tokens, self.tokens).into_bytes();
        out.extend(self.weights.iter().map(|&w| {
            if span > 0.0 {
                ((w - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        }));
        out
    }

    /// Attention mass per quadrant of a fused `2T × 2T` map, normalized by
    /// the row count: `[[a→a, a→b], [b→a, b→b]]`.
    pub fn quadrant_mass(&self) -> [[f64; 2]; 2] {
        let t = self.tokens / 2;
        let mut q = [[0.0; 2]; 2];
        for (i, row) in self.weights.chunks(self.tokens).enumerate() {
            for (j, &w) in row.iter().enumerate() {
                q[(i >= t) as usize][(j >= t) as usize] += w;
            }
        }
        q.map(|r| r.map(|v| v / t.max(1) as f64))
    }
}

/// Attention maps of the last fusing block for one image: the two branch
/// passes and the fused pass over both views. Views come from the training
/// augmentations seeded by `seed`.
pub fn final_block_attention(
    checkpoint: &Checkpoint,
    image: &ImageRgb,
    clip_row: Option<&[f32]>,
    seed: u64,
) -> Result<Vec<HeatMap>> {
    let model = &checkpoint.model;
    let cfg = &model.config;
    if cfg.depth == 0 {
        return Err(Error::Input("the model has no fusing blocks to visualize".into()));
    }
    let (a, b) = augment_pair(image, &cfg.augmentation(), SeedStream::new(seed).tagged("export"))?;
    let mut tape = Tape::<f32>::new();
    let bind = model.store.bind(&mut tape);
    let ia = tape.constant(images_to_tensor(&[&a])?);
    let ib = tape.constant(images_to_tensor(&[&b])?);
    let clip = match (cfg.clip_fusion, clip_row) {
        (false, _) => None,
        (true, Some(row)) => Some(tape.constant(Tensor::new([1, row.len()], row.to_vec())?)),
        (true, None) => return Err(Error::Input("CLIP fusion is on but no feature row was given".into())),
    };
    let fwd = model.forward(&mut tape, &bind, ia, ib, clip, false, true)?;
    let last = 2 * cfg.depth - 1;
    let pick = |kind: AttentionKind| {
        fwd.encoded
            .attention
            .iter()
            .filter(|m| m.kind == kind)
            .last()
            .expect("every fusing block records three maps")
    };
    debug_assert_eq!(pick(AttentionKind::Fused).layer, last);
    Ok(vec![
        HeatMap::from_map("final_branch_a", pick(AttentionKind::BranchA)),
        HeatMap::from_map("final_branch_b", pick(AttentionKind::BranchB)),
        HeatMap::from_map("final_fused", pick(AttentionKind::Fused)),
    ])
}

/// Writes each map as `<name>.csv` and `<name>.pgm` under `out_dir`.
pub fn export_attention(
    checkpoint: &Checkpoint,
    image: &ImageRgb,
    features: Option<(&FeatureTable, &str)>,
    out_dir: impl AsRef<Path>,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    let row = match features {
        Some((table, id)) => Some(
            table
                .get(id)
                .ok_or_else(|| Error::Input(format!("no CLIP feature for id {id:?}")))?,
        ),
        None => None,
    };
    let maps = final_block_attention(checkpoint, image, row, seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for map in &maps {
        let csv = out_dir.join(format!("{}.csv", map.name));
        fs::write(&csv, map.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let pgm = out_dir.join(format!("{}.pgm", map.name));
        fs::write(&pgm, map.to_pgm()).map_err(|e| Error::io(&pgm, e))?;
        written.extend([csv, pgm]);
    }
    Ok(written)
}
