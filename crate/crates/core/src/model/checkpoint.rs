//! Versioned weight container: magic, version, a JSON header describing the
//! named arrays, then the raw little-endian `f32` data.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, SwingNet};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::Parameters;

const MAGIC: &[u8; 8] = b"SWNGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Arrays keyed by parameter or buffer name.
pub type WeightMap = BTreeMap<String, NamedArray>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: Option<ModelConfig>,
    pub iteration: u64,
    pub arrays: WeightMap,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Option<ModelConfig>,
    iteration: u64,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn from_model(model: &SwingNet, iteration: u64) -> Self {
        let mut arrays = WeightMap::new();
        model.visit_params(&mut |p| {
            arrays.insert(
                p.name.clone(),
                NamedArray {
                    shape: p.shape.clone(),
                    data: p.value.clone(),
                },
            );
        });
        model.visit_buffers(&mut |b| {
            arrays.insert(
                b.name.clone(),
                NamedArray {
                    shape: b.shape.clone(),
                    data: b.value.clone(),
                },
            );
        });
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: Some(*model.config()),
            iteration,
            arrays,
        }
    }

    /// Rebuilds the model described by the stored configuration and copies
    /// every array into it. Names and shapes must match exactly.
    pub fn to_model(&self) -> Result<SwingNet> {
        let cfg = self
            .config
            .ok_or_else(|| Error::IncompatibleWeights("checkpoint carries no model configuration".into()))?;
        let build_cfg = ModelConfig { pretrained: false, ..cfg };
        let mut model = SwingNet::new(build_cfg, 0)?;
        self.apply_to(&mut model)?;
        model.set_config_unchecked(cfg);
        Ok(model)
    }

    pub fn apply_to(&self, model: &mut SwingNet) -> Result<()> {
        let mut expected = 0usize;
        let mut problems = Vec::new();
        let mut check = |name: &str, shape: &[usize]| {
            expected += 1;
            match self.arrays.get(name) {
                None => problems.push(format!("missing {name}")),
                Some(a) if a.shape != shape => {
                    problems.push(format!("{name}: expected {shape:?}, found {:?}", a.shape))
                }
                Some(_) => {}
            }
        };
        model.visit_params(&mut |p| check(&p.name, &p.shape));
        model.visit_buffers(&mut |b| check(&b.name, &b.shape));
        if expected != self.arrays.len() {
            problems.push(format!("{} arrays stored, model has {expected}", self.arrays.len()));
        }
        if !problems.is_empty() {
            return Err(Error::IncompatibleWeights(problems.join("; ")));
        }
        model.visit_params_mut(&mut |p| p.value.copy_from_slice(&self.arrays[&p.name].data));
        model.visit_buffers_mut(&mut |b| b.value.copy_from_slice(&self.arrays[&b.name].data));
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config,
            iteration: self.iteration,
            arrays: self
                .arrays
                .iter()
                .map(|(name, a)| ArrayEntry {
                    name: name.clone(),
                    shape: a.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
        let total: usize = self.arrays.values().map(|a| a.data.len()).sum();
        let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + 4 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in self.arrays.values() {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Input(format!("not a valid checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::json("checkpoint header", e))?;
        let mut pos = 20 + hlen;
        let mut arrays = WeightMap::new();
        for entry in header.arrays {
            let n: usize = entry.shape.iter().product();
            let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos += 4 * n;
            arrays.insert(entry.name, NamedArray { shape: entry.shape, data });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            version,
            config: header.config,
            iteration: header.iteration,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d: 32,
            seq_len: 2,
            lstm_hidden: 4,
            pretrained: false,
            freeze_k: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn file_round_trip_restores_model() {
        let net = SwingNet::new(small(), 5).unwrap();
        let ck = Checkpoint::from_model(&net, 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let restored = back.to_model().unwrap();
        assert_eq!(restored.config(), net.config());
        let x = vec![0.25f32; 2 * 3 * 32 * 32];
        assert_eq!(restored.forward(&x, 1, 2).unwrap(), net.forward(&x, 1, 2).unwrap());
    }

    #[test]
    fn corrupt_or_mismatched_checkpoints_rejected() {
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
        let net = SwingNet::new(small(), 5).unwrap();
        let mut ck = Checkpoint::from_model(&net, 0);
        ck.arrays.get_mut("lin.bias").unwrap().shape = vec![3];
        ck.arrays.get_mut("lin.bias").unwrap().data = vec![0.0; 3];
        let mut other = SwingNet::new(small(), 6).unwrap();
        assert!(matches!(ck.apply_to(&mut other), Err(Error::IncompatibleWeights(_))));
    }
}
