use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::heads::LossConfig;
use crate::pipeline::{mask::MASK_FRACTION_RANGE, AugmentationConfig, StemConfig};

/// Where CLIP features come from when fusion is on.
#[derive(Clone, Debug, PartialEq)]
pub enum ClipSource {
    /// Class-informative stand-in features derived from the dataset labels.
    Synthetic { class_sep: f64, sigma: f64 },
    /// A CLFT file keyed by dataset item id.
    File(PathBuf),
}

/// Every knob of a training run. Serialized as flat `key=value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub side: usize,
    pub stem_convs: usize,
    pub embed: usize,
    pub heads: usize,
    /// Number of fusing blocks N (2N ViT blocks); 0 is the no-fusion baseline.
    pub depth: usize,
    pub clusters: usize,
    pub proj_dim: usize,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub tau_instance: f64,
    pub tau_cluster: f64,
    pub penalty_weight: f64,
    pub strict_negatives: bool,
    pub rowwise_clusters: bool,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub clip_fusion: bool,
    pub clip_source: ClipSource,
    pub clip_normalize: bool,
    /// Fraction range of each image blackened before augmentation.
    pub mask: Option<(f64, f64)>,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub p_jitter: f64,
    pub p_grayscale: f64,
    pub p_blur: f64,
    pub p_hflip: f64,
    pub p_solarize: f64,
    /// When off, logged epoch durations are written as 0 so logs are
    /// byte-comparable across runs.
    pub log_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Small model that trains on one CPU core.
    pub fn desk() -> Self {
        let aug = AugmentationConfig::new(32);
        TrainConfig {
            side: 32,
            stem_convs: 3,
            embed: 64,
            heads: 4,
            depth: 4,
            clusters: 4,
            proj_dim: 128,
            batch: 32,
            epochs: 100,
            patience: 20,
            tau_instance: 0.5,
            tau_cluster: 1.0,
            penalty_weight: 1.0,
            strict_negatives: false,
            rowwise_clusters: false,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            adam_eps: 1e-8,
            seed: 0,
            clip_fusion: false,
            clip_source: ClipSource::Synthetic {
                class_sep: 1.0,
                sigma: 0.05,
            },
            clip_normalize: true,
            mask: None,
            crop_scale_min: aug.crop_scale_min,
            crop_scale_max: aug.crop_scale_max,
            p_jitter: aug.p_colorjitter,
            p_grayscale: aug.p_grayscale,
            p_blur: aug.p_blur,
            p_hflip: aug.p_hflip,
            p_solarize: aug.p_solarize,
            log_timing: true,
        }
    }

    /// Full-size ViT-small settings: 224-pixel inputs, E=512, 8 heads,
    /// N=4, batch 128, 500 epochs.
    pub fn full() -> Self {
        TrainConfig {
            side: 224,
            stem_convs: 4,
            embed: 512,
            heads: 8,
            depth: 4,
            batch: 128,
            epochs: 500,
            ..TrainConfig::desk()
        }
    }

    /// Smallest CLIP-fused network used for finite-difference checks:
    /// B=4, S=16 with four patches, E=16, h=2, N=2, k=3.
    pub fn gradcheck() -> Self {
        TrainConfig {
            side: 16,
            stem_convs: 3,
            embed: 16,
            heads: 2,
            depth: 2,
            clusters: 3,
            batch: 4,
            clip_fusion: true,
            ..TrainConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(TrainConfig::desk()),
            "full" => Ok(TrainConfig::full()),
            "gradcheck" => Ok(TrainConfig::gradcheck()),
            other => Err(Error::Input(format!("unknown preset {other:?} (expected desk, full or gradcheck)"))),
        }
    }

    pub fn stem(&self) -> StemConfig {
        StemConfig {
            side: self.side,
            convs: self.stem_convs,
            embed: self.embed,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau_instance: self.tau_instance,
            tau_cluster: self.tau_cluster,
            penalty_weight: self.penalty_weight,
            strict_negatives: self.strict_negatives,
            rowwise_clusters: self.rowwise_clusters,
        }
    }

    pub fn augmentation(&self) -> AugmentationConfig {
        AugmentationConfig {
            crop_scale_min: self.crop_scale_min,
            crop_scale_max: self.crop_scale_max,
            p_colorjitter: self.p_jitter,
            p_grayscale: self.p_grayscale,
            p_blur: self.p_blur,
            p_hflip: self.p_hflip,
            p_solarize: self.p_solarize,
            ..AugmentationConfig::new(self.side)
        }
    }

    /// Token count entering the encoder: patches, CLS, and the CLIP anchor.
    pub fn tokens(&self) -> usize {
        self.stem().patches() + 1 + usize::from(self.clip_fusion)
    }

    pub fn validate(&self) -> Result<()> {
        self.stem().validate()?;
        self.augmentation().validate()?;
        let fail = |msg: String| Err(Error::Input(msg));
        if self.heads == 0 || self.embed % self.heads != 0 {
            return fail(format!("embed {} is not divisible by heads {}", self.embed, self.heads));
        }
        if self.batch < 2 {
            return fail("batch must be at least 2".into());
        }
        if self.epochs < 1 || self.patience < 1 {
            return fail("epochs and patience must be at least 1".into());
        }
        if self.clusters < 2 || self.proj_dim < 2 {
            return fail("clusters and proj_dim must be at least 2".into());
        }
        if !(self.tau_instance > 0.0 && self.tau_cluster > 0.0) {
            return fail("temperatures must be positive".into());
        }
        if !(self.lr >= 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("need lr >= 0 and betas in [0, 1)".into());
        }
        if let Some((lo, hi)) = self.mask {
            let (min, max) = MASK_FRACTION_RANGE;
            if !(min <= lo && lo <= hi && hi <= max) {
                return fail(format!("mask range {lo},{hi} must lie within [{min}, {max}]"));
            }
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Input(format!("bad value {value:?} for {key}")))
        }
        let v = value.trim();
        match key.trim() {
            "side" => self.side = parse(key, v)?,
            "stem_convs" => self.stem_convs = parse(key, v)?,
            "embed" => self.embed = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "clusters" => self.clusters = parse(key, v)?,
            "proj_dim" => self.proj_dim = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "tau_instance" => self.tau_instance = parse(key, v)?,
            "tau_cluster" => self.tau_cluster = parse(key, v)?,
            "penalty_weight" => self.penalty_weight = parse(key, v)?,
            "strict_negatives" => self.strict_negatives = parse(key, v)?,
            "rowwise_clusters" => self.rowwise_clusters = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "clip_fusion" => self.clip_fusion = parse(key, v)?,
            "clip_source" => {
                self.clip_source = match v {
                    "synthetic" => match self.clip_source {
                        ClipSource::Synthetic { .. } => self.clip_source.clone(),
                        ClipSource::File(_) => ClipSource::Synthetic {
                            class_sep: 1.0,
                            sigma: 0.05,
                        },
                    },
                    path => ClipSource::File(PathBuf::from(path.strip_prefix("file:").unwrap_or(path))),
                }
            }
            "clip_class_sep" | "clip_sigma" => {
                let x: f64 = parse(key, v)?;
                let (mut sep, mut sigma) = match self.clip_source {
                    ClipSource::Synthetic { class_sep, sigma } => (class_sep, sigma),
                    ClipSource::File(_) => (1.0, 0.05),
                };
                if key.trim() == "clip_class_sep" {
                    sep = x;
                } else {
                    sigma = x;
                }
                self.clip_source = ClipSource::Synthetic { class_sep: sep, sigma };
            }
            "clip_normalize" => self.clip_normalize = parse(key, v)?,
            "mask" => {
                self.mask = match v {
                    "off" => None,
                    range => {
                        let (lo, hi) = range
                            .split_once(',')
                            .ok_or_else(|| Error::Input(format!("mask must be off or lo,hi, got {range:?}")))?;
                        Some((parse(key, lo.trim())?, parse(key, hi.trim())?))
                    }
                }
            }
            "crop_scale_min" => self.crop_scale_min = parse(key, v)?,
            "crop_scale_max" => self.crop_scale_max = parse(key, v)?,
            "p_jitter" => self.p_jitter = parse(key, v)?,
            "p_grayscale" => self.p_grayscale = parse(key, v)?,
            "p_blur" => self.p_blur = parse(key, v)?,
            "p_hflip" => self.p_hflip = parse(key, v)?,
            "p_solarize" => self.p_solarize = parse(key, v)?,
            "log_timing" => self.log_timing = parse(key, v)?,
            other => return Err(Error::Input(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the desk defaults; `#` starts a comment.
    /// A `preset=` line, if present, must come first.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::desk();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
            let result = if k.trim() == "preset" {
                TrainConfig::preset(v.trim()).map(|p| cfg = p)
            } else {
                cfg.set(k, v)
            };
            result.map_err(|e| e.context(format!("config line {}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text).map_err(|e| e.context(format!("reading {}", path.display())))
    }

    /// Every key, one per line; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("side", self.side.to_string());
        kv("stem_convs", self.stem_convs.to_string());
        kv("embed", self.embed.to_string());
        kv("heads", self.heads.to_string());
        kv("depth", self.depth.to_string());
        kv("clusters", self.clusters.to_string());
        kv("proj_dim", self.proj_dim.to_string());
        kv("batch", self.batch.to_string());
        kv("epochs", self.epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("tau_instance", self.tau_instance.to_string());
        kv("tau_cluster", self.tau_cluster.to_string());
        kv("penalty_weight", self.penalty_weight.to_string());
        kv("strict_negatives", self.strict_negatives.to_string());
        kv("rowwise_clusters", self.rowwise_clusters.to_string());
        kv("lr", self.lr.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("seed", self.seed.to_string());
        kv("clip_fusion", self.clip_fusion.to_string());
        match &self.clip_source {
            ClipSource::Synthetic { class_sep, sigma } => {
                kv("clip_source", "synthetic".into());
                kv("clip_class_sep", class_sep.to_string());
                kv("clip_sigma", sigma.to_string());
            }
            ClipSource::File(p) => kv("clip_source", format!("file:{}", p.display())),
        }
        kv("clip_normalize", self.clip_normalize.to_string());
        kv(
            "mask",
            self.mask.map_or("off".into(), |(lo, hi)| format!("{lo},{hi}")),
        );
        kv("crop_scale_min", self.crop_scale_min.to_string());
        kv("crop_scale_max", self.crop_scale_max.to_string());
        kv("p_jitter", self.p_jitter.to_string());
        kv("p_grayscale", self.p_grayscale.to_string());
        kv("p_blur", self.p_blur.to_string());
        kv("p_hflip", self.p_hflip.to_string());
        kv("p_solarize", self.p_solarize.to_string());
        kv("log_timing", self.log_timing.to_string());
        s
    }
}
