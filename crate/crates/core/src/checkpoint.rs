//! Model checkpoint file.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PCK1"
//! u32 manifest_len, manifest_len bytes of UTF-8 key=value text
//! u32 tensor_count
//! per tensor: u32 name_len, name bytes, u32 rank, rank x u32 dims,
//!             product(dims) x f64 row-major values
//! ```
//!
//! The manifest carries the seed, ablation flags and every model dimension,
//! plus any caller-supplied metadata under an `extra.` prefix.

use std::fs;
use std::path::Path;

use crate::bytes::{put_f64s, put_u32, ByteReader};
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::model::{AblationConfig, Model, ModelDims};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCK1";

pub fn encode_checkpoint(model: &Model, extra: &KvMap) -> Vec<u8> {
    let mut manifest = model.manifest();
    for (k, v) in extra.iter() {
        manifest.set(&format!("extra.{k}"), v);
    }
    let text = manifest.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, model.params.len());
    for (name, t) in model.params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        put_f64s(&mut out, t.data());
    }
    out
}

/// A decoded checkpoint: manifest plus parameters.
#[derive(Debug)]
pub struct Checkpoint {
    pub manifest: KvMap,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let mlen = r.usize("manifest length")?;
        let at = r.offset();
        let text = std::str::from_utf8(r.take(mlen, "manifest")?)
            .map_err(|_| Error::parse(at, "manifest is not UTF-8"))?;
        let manifest = KvMap::parse(text).map_err(|e| Error::parse(at, e.to_string()))?;
        let count = r.usize("tensor count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let nlen = r.usize("name length")?;
            let at = r.offset();
            let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
                .map_err(|_| Error::parse(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.usize("rank")?;
            let at = r.offset();
            let shape = (0..rank).map(|_| r.usize("dimension")).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::parse(at, format!("invalid shape {shape:?} for `{name}`")))?;
            let data = r.f64s(n, "tensor payload")?;
            params.insert(name, Tensor::new(shape, data)?);
        }
        r.finish()?;
        Ok(Checkpoint { manifest, params })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Self::decode(&fs::read(path)?)
    }

    /// Caller-supplied metadata stored under `extra.`.
    pub fn extra(&self) -> KvMap {
        let mut kv = KvMap::new();
        for (k, v) in self.manifest.iter() {
            if let Some(rest) = k.strip_prefix("extra.") {
                kv.set(rest, v);
            }
        }
        kv
    }

    /// Rebuilds the model skeleton from the manifest and installs the stored
    /// parameters, which must match the skeleton name-for-name and
    /// shape-for-shape.
    pub fn into_model(self) -> Result<Model> {
        let mut dims = ModelDims::default();
        dims.read_kv(&self.manifest)?;
        let ablation = AblationConfig::from_kv(&self.manifest)?;
        let seed = self
            .manifest
            .parsed::<u64>("seed")?
            .ok_or_else(|| Error::contract("checkpoint manifest has no seed"))?;
        let mut model = Model::build(ablation, dims, seed)?;
        if model.params.len() != self.params.len() {
            return Err(Error::contract(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, t) in self.params.iter() {
            model.params.set(name, t.clone())?;
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, extra: &KvMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model, extra))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    Checkpoint::read(path)?.into_model()
}
