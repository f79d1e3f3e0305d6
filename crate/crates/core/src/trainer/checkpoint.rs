//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MGAN" | u32 version | u32 tensor count
//! per tensor: u32 name length | name (UTF-8) | u32 ndim | u32 dims... | f32 payload
//! u32 phase length | phase | u32 epoch | u32 history length | f64 history...
//! u32 extra count | per extra: u32 key length | key | u32 value length | value
//! ```

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::networks::{Ablation, Model};
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 4] = b"MGAN";
pub const FORMAT_VERSION: u32 = 1;

/// Training metadata stored next to the tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub phase: String,
    pub epoch: u32,
    /// Validation precision per evaluation.
    pub mp_history: Vec<f64>,
    /// Free-form key/value pairs (model configuration, vocabulary).
    pub extras: Vec<(String, String)>,
}

impl CheckpointMeta {
    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extras.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: CheckpointMeta,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, len32(s.len(), "string")?);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn len32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Config(format!("{what} too large for the checkpoint format")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, len32(self.tensors.len(), "tensor table")?);
        for (name, t) in &self.tensors {
            put_str(&mut out, name)?;
            put_u32(&mut out, len32(t.ndim(), "rank")?);
            for &d in t.shape() {
                put_u32(&mut out, len32(d, "dimension")?);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_str(&mut out, &self.meta.phase)?;
        put_u32(&mut out, self.meta.epoch);
        put_u32(&mut out, len32(self.meta.mp_history.len(), "history")?);
        for &v in &self.meta.mp_history {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut out, len32(self.meta.extras.len(), "extras")?);
        for (k, v) in &self.meta.extras {
            put_str(&mut out, k)?;
            put_str(&mut out, v)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Load("bad magic: not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Load(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Load(format!("tensor {name} is too large")))?;
            let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Load("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        let phase = r.string()?;
        let epoch = r.u32()?;
        let h = r.u32()? as usize;
        let mut mp_history = Vec::with_capacity(h.min(1 << 16));
        for _ in 0..h {
            let b = r.take(8)?;
            mp_history.push(f64::from_le_bytes(b.try_into().expect("8 bytes")));
        }
        let e = r.u32()? as usize;
        let mut extras = Vec::with_capacity(e.min(1 << 16));
        for _ in 0..e {
            extras.push((r.string()?, r.string()?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Load(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self {
            tensors,
            meta: CheckpointMeta {
                phase,
                epoch,
                mp_history,
                extras,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::storage(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Load(format!("truncated checkpoint: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Load("name is not valid UTF-8".into()))
    }
}

const KEY_ABLATION: &str = "ablation";
const KEY_VOCAB: &str = "vocabulary";
const CONFIG_PREFIX: &str = "model.";

/// Snapshot of every tensor of `model`, with enough metadata to rebuild it.
pub fn model_checkpoint(model: &Model, mut meta: CheckpointMeta) -> Checkpoint {
    meta.extras.retain(|(k, _)| k != KEY_ABLATION && k != KEY_VOCAB && !k.starts_with(CONFIG_PREFIX));
    meta.extras.push((KEY_ABLATION.into(), model.ablation.name().into()));
    for (k, v) in model.config.to_pairs() {
        meta.extras.push((format!("{CONFIG_PREFIX}{k}"), v));
    }
    meta.extras.push((KEY_VOCAB.into(), model.vocab.to_text()));
    Checkpoint {
        tensors: model.store.named().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        meta,
    }
}

pub fn save_model(model: &Model, meta: CheckpointMeta, path: &Path) -> Result<()> {
    model_checkpoint(model, meta).save(path)
}

/// Rebuilds a model from a checkpoint written by [`save_model`].
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    let meta = &ck.meta;
    let ablation = Ablation::parse(meta.extra(KEY_ABLATION).ok_or_else(|| Error::Load("checkpoint has no ablation record".into()))?)?;
    let pairs: Vec<(&str, &str)> = meta
        .extras
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(CONFIG_PREFIX).map(|k| (k, v.as_str())))
        .collect();
    let config = ModelConfig::from_pairs(pairs)?;
    let vocab = Vocabulary::from_text(meta.extra(KEY_VOCAB).ok_or_else(|| Error::Load("checkpoint has no vocabulary".into()))?)?;
    let mut model = Model::new(config, ablation, vocab, 0)?;
    model.store.load_from(&ck.tensors, true)?;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let ck = Checkpoint::load(path)?;
    let model = model_from_checkpoint(&ck)?;
    Ok((model, ck.meta))
}
