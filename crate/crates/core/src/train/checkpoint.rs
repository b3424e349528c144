//! Checkpoint directories: `manifest.json` plus `params.bin`, a flat blob of
//! little-endian f64 values in manifest order (lexicographic by name).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT: &str = "tgr-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Echo of the configuration that produced these parameters.
    pub config: serde_json::Value,
    pub frozen: bool,
    /// Metrics file of the producing run, relative to the checkpoint's parent.
    pub metrics: Option<String>,
    /// Free-form provenance such as the seed and final accuracy.
    pub info: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub config: serde_json::Value,
    pub frozen: bool,
    pub metrics: Option<String>,
    pub info: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: ParamSet, config: serde_json::Value) -> Self {
        Checkpoint {
            params,
            config,
            frozen: false,
            metrics: None,
            info: serde_json::Value::Null,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::with_capacity(self.params.num_scalars() * 8);
        let mut tensors = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            frozen: self.frozen,
            metrics: self.metrics.clone(),
            info: self.info.clone(),
            tensors,
        };
        let mpath = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(BLOB_FILE);
        std::fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format("checkpoint manifest", &mpath, e.to_string()))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::format(
                "checkpoint manifest",
                &mpath,
                format!("unsupported format {} v{}", manifest.format, manifest.version),
            ));
        }
        let bpath = dir.join(BLOB_FILE);
        let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let bad = |detail: String| Error::format("checkpoint blob", &bpath, detail);
        let mut params = ParamSet::new();
        let mut expected_offset = 0u64;
        let mut prev: Option<&str> = None;
        for entry in &manifest.tensors {
            if prev.is_some_and(|p| p >= entry.name.as_str()) {
                return Err(bad(format!("tensor `{}` out of lexicographic order", entry.name)));
            }
            prev = Some(&entry.name);
            if entry.offset != expected_offset {
                return Err(bad(format!(
                    "tensor `{}` at offset {}, expected {expected_offset}",
                    entry.name, entry.offset
                )));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + n * 8;
            if end > blob.len() {
                return Err(bad(format!(
                    "truncated: tensor `{}` needs bytes {start}..{end}, file has {}",
                    entry.name,
                    blob.len()
                )));
            }
            let data = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data).map_err(|e| bad(e.to_string()))?;
            params.insert(entry.name.clone(), t);
            expected_offset = end as u64;
        }
        if blob.len() as u64 != expected_offset {
            return Err(bad(format!("{} trailing bytes", blob.len() as u64 - expected_offset)));
        }
        Ok(Checkpoint {
            params,
            config: manifest.config,
            frozen: manifest.frozen,
            metrics: manifest.metrics,
            info: manifest.info,
        })
    }

    /// Loads and checks that the config echo equals `expected`.
    pub fn load_expecting(dir: &Path, expected: &serde_json::Value) -> Result<Self> {
        let ckpt = Self::load(dir)?;
        if &ckpt.config != expected {
            return Err(Error::Config(format!(
                "checkpoint {} was written for a different config",
                dir.display()
            )));
        }
        Ok(ckpt)
    }

    /// Loads and checks that the config echo's `key` field equals `expected`.
    pub fn load_expecting_field<T: Serialize>(dir: &Path, key: &str, expected: &T) -> Result<Self> {
        let ckpt = Self::load(dir)?;
        let want = serde_json::to_value(expected)?;
        if ckpt.config.get(key) != Some(&want) {
            return Err(Error::Config(format!(
                "checkpoint {} has a different `{key}` than expected",
                dir.display()
            )));
        }
        Ok(ckpt)
    }
}

/// `<run_dir>/checkpoints/epoch_<NNNN>` or `<run_dir>/checkpoints/final`.
pub fn checkpoint_dir(run_dir: &Path, epoch: Option<usize>) -> PathBuf {
    let name = match epoch {
        Some(e) => format!("epoch_{e:04}"),
        None => "final".to_string(),
    };
    run_dir.join("checkpoints").join(name)
}
