use std::collections::BTreeMap;
use std::path::Path;

use crate::architectures::{Model, ModelConfig};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::signal::NormStats;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EVBCKPT1";

const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

/// Parameters, architecture and normalization statistics of a trained model.
///
/// Layout, little-endian: magic, `u32` header length and `key=value` lines,
/// `u64` block count, `u64` scalar count, then per block `u32` name length,
/// name, `u32` rank, `u64` dims and `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub norm: Option<NormStats>,
    pub meta: BTreeMap<String, String>,
    pub store: ParamStore,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size exceeds address space".into()))
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Format(format!("invalid utf-8: {e}")))
    }
}

fn put_block(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(model: &Model, norm: Option<NormStats>) -> Self {
        Checkpoint { config: model.cfg.clone(), norm, meta: BTreeMap::new(), store: model.store.clone() }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("config={}\n", serde_json::to_string(&self.config)?);
        for (k, v) in &self.meta {
            if k == "config" || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("invalid header entry {k:?}")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        let mut blocks: Vec<(&str, Tensor)> =
            self.store.iter().map(|p| (p.name.as_str(), p.value.clone())).collect();
        if let Some(norm) = &self.norm {
            blocks.push((NORM_MEAN, Tensor::new(vec![norm.mean.len()], norm.mean.clone())?));
            blocks.push((NORM_STD, Tensor::new(vec![norm.std.len()], norm.std.clone())?));
        }
        let scalars: usize = blocks.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(64 + header.len() + scalars * 8);
        out.extend(CHECKPOINT_MAGIC);
        out.extend((header.len() as u32).to_le_bytes());
        out.extend(header.as_bytes());
        out.extend((blocks.len() as u64).to_le_bytes());
        out.extend((scalars as u64).to_le_bytes());
        for (name, t) in &blocks {
            put_block(&mut out, name, t);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(CHECKPOINT_MAGIC.len())?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Load {
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let header_len = r.u32()? as usize;
        let header = r.utf8(header_len)?;
        let mut config = None;
        let mut meta = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("header line without '=': {line:?}")))?;
            if k == "config" {
                config = Some(serde_json::from_str::<ModelConfig>(v)?);
            } else {
                meta.insert(k.to_string(), v.to_string());
            }
        }
        let config = config.ok_or_else(|| Error::Format("header has no config".into()))?;
        let count = r.usize()?;
        let scalars = r.usize()?;
        let mut store = ParamStore::new();
        let (mut mean, mut std) = (None, None);
        let mut seen = 0usize;
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.utf8(name_len)?.to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.filter(|&l| l <= bytes.len() / 8).ok_or_else(|| {
                Error::Format(format!("block {name:?} has implausible shape {shape:?}"))
            })?;
            let data: Vec<f64> = r
                .take(len * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            seen += len;
            match name.as_str() {
                NORM_MEAN => mean = Some(data),
                NORM_STD => std = Some(data),
                _ => {
                    store.register(name, Tensor::new(shape, data)?)?;
                }
            }
        }
        if seen != scalars {
            return Err(Error::Format(format!("header declares {scalars} scalars, blocks hold {seen}")));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let norm = match (mean, std) {
            (Some(mean), Some(std)) if mean.len() == std.len() => Some(NormStats { mean, std }),
            (None, None) => None,
            _ => return Err(Error::Format("incomplete normalization statistics".into())),
        };
        Ok(Checkpoint { config, norm, meta, store })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the model; `expected` must match the stored architecture.
    pub fn into_model(self, expected: Option<&ModelConfig>) -> Result<Model> {
        if let Some(exp) = expected {
            if *exp != self.config {
                return Err(Error::Load {
                    expected: serde_json::to_string(exp)?,
                    found: serde_json::to_string(&self.config)?,
                });
            }
        }
        Model::from_parts_unchecked(self.config, self.store)
    }
}
