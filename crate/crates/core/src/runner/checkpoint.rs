//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "MFCK" | u32 version | u32 config_len | config text (key=value)
//! u32 epoch | f64 best_loss | u64 adam_step | u32 record_count
//! record: u16 name_len | name | u8 rank | rank × u32 dims | f32 payload
//! ```
//!
//! Parameter records come first in model order, followed by the Adam
//! moments named `adam.m/<param>` and `adam.v/<param>`.

use std::fs;
use std::path::Path;

use super::adam::Adam;
use super::config::TrainConfig;
use super::model::Model;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained weights, optimizer state, and progress.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub epoch: u32,
    pub best_loss: f64,
}

impl Checkpoint {
    pub fn new(model: Model<f32>) -> Self {
        let c = &model.config;
        let adam = Adam::new(&model.store, c.lr, c.beta1, c.beta2, c.adam_eps, c.weight_decay);
        Checkpoint {
            model,
            adam,
            epoch: 0,
            best_loss: f64::INFINITY,
        }
    }

    fn records(&self) -> Vec<(String, &Tensor<f32>)> {
        let store = &self.model.store;
        let params = store.iter().map(|p| (p.name.clone(), &p.tensor));
        let m = store.iter().zip(&self.adam.m).map(|(p, t)| (format!("adam.m/{}", p.name), t));
        let v = store.iter().zip(&self.adam.v).map(|(p, t)| (format!("adam.v/{}", p.name), t));
        params.chain(m).chain(v).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let config = self.model.config.to_text();
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend((config.len() as u32).to_le_bytes());
        out.extend(config.as_bytes());
        out.extend(self.epoch.to_le_bytes());
        out.extend(self.best_loss.to_le_bytes());
        out.extend(self.adam.step.to_le_bytes());
        let records = self.records();
        out.extend((records.len() as u32).to_le_bytes());
        for (name, t) in records {
            out.extend((name.len() as u16).to_le_bytes());
            out.extend(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let config = TrainConfig::parse(text)?;
        let epoch = r.u32()?;
        let best_loss = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_owned();
            let rank = r.take(1)?[0] as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel: usize = dims.iter().product();
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push((name, Tensor::new(dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint records".into()));
        }

        let mut model = Model::<f32>::init(&config)?;
        let n = model.store.len();
        if records.len() != 3 * n {
            return Err(Error::Integrity(format!(
                "checkpoint has {} records, model needs {}",
                records.len(),
                3 * n
            )));
        }
        let moments = records.split_off(n);
        model.load_weights(&records)?;
        let mut ckpt = Checkpoint::new(model);
        for (i, (name, t)) in moments.into_iter().enumerate() {
            let (kind, slot) = if i < n { ("m", i) } else { ("v", i - n) };
            let expect = format!("adam.{kind}/{}", ckpt.model.store.iter().nth(slot).unwrap().name);
            if name != expect || t.shape() != ckpt.adam.m[slot].shape() {
                return Err(Error::Integrity(format!("unexpected optimizer record {name:?}")));
            }
            if kind == "m" {
                ckpt.adam.m[slot] = t;
            } else {
                ckpt.adam.v[slot] = t;
            }
        }
        ckpt.adam.step = step;
        ckpt.epoch = epoch;
        ckpt.best_loss = best_loss;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes).map_err(|e| e.context(format!("loading {}", path.display())))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Length(format!("checkpoint truncated at offset {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
