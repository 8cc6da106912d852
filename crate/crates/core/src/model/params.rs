//! Named parameter arrays and the checkpoint container.
//!
//! Checkpoint layout (`SCK1`):
//!
//! ```text
//! magic "SCK1" | u64 LE header length | JSON header | f32 LE tensor data
//! ```
//!
//! The header holds the model config, training metadata and, per tensor, its
//! name, shape and element offset into the data block.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::guidance::TextEncoderSpec;
use crate::tensor::Mat;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SCK1";

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            init,
        }
    }
}

/// Rounds every entry through `f32`, matching what a checkpoint stores.
pub fn round_f32(m: &mut Mat) {
    for v in &mut m.data {
        *v = *v as f32 as f64;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub tensors: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for s in specs {
            let mut m = match s.init {
                Init::Zeros => Mat::zeros(s.rows, s.cols),
                Init::Ones => Mat::filled(s.rows, s.cols, 1.0),
                Init::Normal(std) => {
                    let n = Normal::new(0.0, std).expect("valid std");
                    Mat::from_vec(s.rows, s.cols, (0..s.rows * s.cols).map(|_| n.sample(&mut rng)).collect())
                }
            };
            round_f32(&mut m);
            let prev = tensors.insert(s.name.clone(), m);
            assert!(prev.is_none(), "duplicate parameter {}", s.name);
        }
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn expect(&self, name: &str) -> &Mat {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn set(&mut self, name: &str, value: Mat) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn total(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|m| m.all_finite())
    }

    /// Checks that `self` holds exactly the names and shapes of `specs`.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            match self.tensors.get(&s.name) {
                None => return Err(Error::Format(format!("checkpoint lacks parameter {}", s.name))),
                Some(m) if m.shape() != (s.rows, s.cols) => {
                    return Err(Error::Format(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        s.name,
                        m.shape(),
                        (s.rows, s.cols)
                    )))
                }
                _ => {}
            }
        }
        if self.tensors.len() != specs.len() {
            let known: std::collections::HashSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra: Vec<&String> = self.tensors.keys().filter(|k| !known.contains(k.as_str())).collect();
            return Err(Error::Format(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub iteration: usize,
    pub seed: u64,
    #[serde(default)]
    pub text_encoder: Option<TextEncoderSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.params.tensors.len());
        let mut offset = 0;
        for (name, m) in &self.params.tensors {
            if !m.all_finite() {
                return Err(Error::Validation(format!("parameter {name} has non-finite entries")));
            }
            entries.push(TensorEntry {
                name: name.clone(),
                rows: m.rows,
                cols: m.cols,
                offset,
            });
            offset += m.len();
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(12 + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for m in self.params.tensors.values() {
            for &v in &m.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let data = &bytes[12 + hlen..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n = e.rows * e.cols;
            let raw = data
                .get(e.offset * 4..(e.offset + n) * 4)
                .ok_or_else(|| Error::Format(format!("tensor {} exceeds data block", e.name)))?;
            let vals: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("tensor {} has non-finite entries", e.name)));
            }
            tensors.insert(e.name, Mat::from_vec(e.rows, e.cols, vals));
        }
        header.config.validate()?;
        let params = ParamStore { tensors };
        params.check_against(&super::param_specs(&header.config))?;
        Ok(Self {
            config: header.config,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
