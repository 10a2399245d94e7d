use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{Float, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

pub const CLIP_DIM: usize = 512;
const MAGIC: &[u8; 4] = b"CLFT";
const VERSION: u32 = 1;

/// Id → embedding map with O(1) lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    rows: Vec<f32>,
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl FeatureTable {
    pub fn new(dim: usize, ids: Vec<String>, rows: Vec<f32>) -> Result<Self> {
        if dim == 0 && !ids.is_empty() {
            return Err(Error::Format("feature rows need dim > 0".into()));
        }
        if rows.len() != ids.len() * dim {
            return Err(Error::Length(format!(
                "{} ids × {dim} dims needs {} values, got {}",
                ids.len(),
                ids.len() * dim,
                rows.len()
            )));
        }
        if !rows.iter().all(|v| v.is_finite()) {
            return Err(Error::Integrity("feature table contains non-finite values".into()));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate feature id {id:?}")));
            }
        }
        Ok(FeatureTable { dim, rows, ids, index })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.row(i))
    }

    /// Scales every row to unit L2 norm; zero rows are left as they are.
    pub fn normalize(&mut self) {
        if self.dim == 0 {
            return;
        }
        for row in self.rows.chunks_mut(self.dim) {
            let n = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
            }
        }
    }

    /// Fails unless every id resolves to a row.
    pub fn check_covers<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let missing: Vec<&str> = ids.into_iter().filter(|id| !self.index.contains_key(*id)).collect();
        if missing.is_empty() {
            return Ok(());
        }
        let shown = missing.iter().take(5).copied().collect::<Vec<_>>().join(", ");
        Err(Error::Input(format!(
            "{} dataset ids have no CLIP feature (first: {shown})",
            missing.len()
        )))
    }

    /// Stacks the rows of `ids` into a `[len, dim]` tensor.
    pub fn gather<F: Float>(&self, ids: &[&str]) -> Result<Tensor<F>> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            let row = self
                .get(id)
                .ok_or_else(|| Error::Input(format!("no CLIP feature for id {id:?}")))?;
            data.extend(row.iter().map(|&v| F::of(v as f64)));
        }
        Tensor::new([ids.len(), self.dim], data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.rows.len() * 4);
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((self.len() as u32).to_le_bytes());
        out.extend((self.dim as u32).to_le_bytes());
        for v in &self.rows {
            out.extend(v.to_le_bytes());
        }
        for id in &self.ids {
            out.extend((id.len() as u16).to_le_bytes());
            out.extend(id.as_bytes());
        }
        out
    }

    /// Parses the raw bytes without normalizing.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad CLFT magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported CLFT version {version}")));
        }
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let payload = r.take(count * dim * 4)?;
        let rows = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("feature id is not UTF-8".into()))?;
            ids.push(id.to_owned());
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after CLFT ids", bytes.len() - r.pos)));
        }
        FeatureTable::new(dim, ids, rows)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Length(format!("CLFT needs {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads a CLFT file, re-normalizing rows to unit length when `normalize`.
pub fn read_table(path: impl AsRef<Path>, normalize: bool) -> Result<FeatureTable> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut table = FeatureTable::decode(&bytes).map_err(|e| e.context(format!("reading {}", path.display())))?;
    if normalize {
        table.normalize();
    }
    Ok(table)
}

pub fn write_table(path: impl AsRef<Path>, table: &FeatureTable) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, table.encode()).map_err(|e| Error::io(path, e))
}

/// Class-informative stand-in for CLIP features: each class has a random
/// unit direction `d_c`, and item rows are `normalize(class_sep · d_c + ε)`
/// with `ε ~ N(0, σ²)` per coordinate.
pub fn synthetic_features(
    ids: &[String],
    labels: &[usize],
    dim: usize,
    class_sep: f64,
    sigma: f64,
    seed: u64,
) -> Result<FeatureTable> {
    if dim < 2 {
        return Err(Error::Input("synthetic features need dim >= 2".into()));
    }
    if ids.len() != labels.len() {
        return Err(Error::Input(format!("{} ids but {} labels", ids.len(), labels.len())));
    }
    let stream = SeedStream::new(seed).tagged("clip-features");
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let directions: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut rng = stream.tagged("direction").derive(c as u64).rng();
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let mut rows = Vec::with_capacity(ids.len() * dim);
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = stream.tagged("noise").derive(i as u64).rng();
        let v: Vec<f64> = directions[label]
            .iter()
            .map(|&d| {
                let e: f64 = StandardNormal.sample(&mut rng);
                class_sep * d + sigma * e
            })
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        rows.extend(v.iter().map(|x| (x / n) as f32));
    }
    FeatureTable::new(dim, ids.to_vec(), rows)
}
