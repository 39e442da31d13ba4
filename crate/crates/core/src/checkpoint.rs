//! Binary checkpoint container for a [`Model`] and its metadata.
//!
//! Layout (little-endian): magic `SSNNCKP1`, `u32` version, `u32` tensor
//! count, then per tensor `u32` name length, name bytes, `u32` rank, `u32`
//! dims and `f64` data; finally a `u32`-length-prefixed UTF-8 JSON blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{io_write_atomic, NormStats};
use crate::error::{Result, SsnnError};
use crate::model::{Model, ModelDims};
use crate::numerics::{ParamStore, Tensor};
use crate::training::TrainConfig;

const MAGIC: &[u8; 8] = b"SSNNCKP1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dims: ModelDims,
    pub no_self_transition: bool,
    #[serde(default)]
    pub config: Option<TrainConfig>,
    #[serde(default)]
    pub norm: Option<NormStats>,
    /// Training iterations completed when the checkpoint was taken.
    #[serde(default)]
    pub iteration: usize,
}

impl CheckpointMeta {
    pub fn for_model(model: &Model) -> Self {
        CheckpointMeta {
            dims: model.dims(),
            no_self_transition: model.gen.no_self_transition(),
            config: None,
            norm: None,
            iteration: 0,
        }
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| SsnnError::contract(format!("{what} {v} does not fit in u32")))
}

pub fn encode(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let store = model.to_store();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(store.len(), "tensor count")?.to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.shape().len(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&u32_of(json.len(), "metadata length")?.to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(SsnnError::parse(
                format!("checkpoint byte offset {}", self.pos),
                format!("file ends inside {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(SsnnError::parse("checkpoint byte offset 0", "bad magic (expected SSNNCKP1)"));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(SsnnError::Schema(format!(
            "checkpoint version {version} is not supported (expected {VERSION})"
        )));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.u32("name length")?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| SsnnError::parse(format!("checkpoint byte offset {at}"), "name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(8).unwrap_or(usize::MAX), "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store.register(&name, Tensor::new(shape, data)?)?;
    }
    let n = r.u32("metadata length")?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(n, "metadata")?)?;
    if r.pos != bytes.len() {
        return Err(SsnnError::parse(
            format!("checkpoint byte offset {}", r.pos),
            "trailing bytes after metadata",
        ));
    }
    let model = Model::from_store(meta.dims, &store, meta.no_self_transition)?;
    Ok((model, meta))
}

/// Atomically writes a checkpoint file.
pub fn save(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    io_write_atomic(path, &encode(model, meta)?)
}

pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let dims = ModelDims {
            states: 2,
            max_dur: 3,
            obs_dim: 2,
            hidden: 3,
            encoder: 2,
            summary: 2,
        };
        Model::random(dims, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let mut meta = CheckpointMeta::for_model(&m);
        meta.norm = Some(NormStats {
            mean: vec![0.1, -0.2],
            std: vec![1.5, 0.3],
        });
        meta.config = Some(TrainConfig::with_dims(2, 3, 3, 2, 2));
        let bytes = encode(&m, &meta).unwrap();
        let (m2, meta2) = decode(&bytes).unwrap();
        assert_eq!(m, m2);
        assert_eq!(meta, meta2);
        assert_eq!(encode(&m2, &meta2).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = model();
        let bytes = encode(&m, &CheckpointMeta::for_model(&m)).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(matches!(decode(&bad), Err(SsnnError::Schema(_))));
    }
}
