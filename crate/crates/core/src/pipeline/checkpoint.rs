//! Versioned binary checkpoints.
//!
//! Layout: the 8 magic bytes `CPRNCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then every
//! tensor listed in the header as little-endian `f64` values in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EpochRecord;
use crate::error::{Error, Result};
use crate::gates::Gate;
use crate::network::{Network, Weights};
use crate::spec::ModelSpec;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CPRNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub weights: Weights,
    pub gates: Vec<Gate>,
    /// Optimizer momentum buffers keyed like the trained tensors.
    pub velocity: BTreeMap<String, Tensor>,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    gates: Vec<Gate>,
    epoch: usize,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn capture(net: &Network, velocity: BTreeMap<String, Tensor>, epoch: usize, history: Vec<EpochRecord>) -> Self {
        Self { spec: net.spec.clone(), weights: net.weights.clone(), gates: net.gates.clone(), velocity, epoch, history }
    }

    /// Rebuilds the network; dropout and noise streams restart from `seed`.
    pub fn network(&self, seed: u64) -> Result<Network> {
        Network::from_parts(&self.spec, self.weights.clone(), self.gates.clone(), seed)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &[usize], &[f64])> = Vec::new();
        for (k, t) in &self.weights.params {
            tensors.push((format!("param/{k}"), t.shape(), t.data()));
        }
        for (k, t) in &self.weights.buffers {
            tensors.push((format!("buffer/{k}"), t.shape(), t.data()));
        }
        for (k, t) in &self.velocity {
            tensors.push((format!("velocity/{k}"), t.shape(), t.data()));
        }
        let mut gates = Vec::with_capacity(self.gates.len());
        for (i, g) in self.gates.iter().enumerate() {
            tensors.push((format!("phi/{i}"), std::slice::from_ref(&0), &g.phi));
            if let Some(audit) = &g.audit {
                tensors.push((format!("audit/{i}"), std::slice::from_ref(&0), audit));
            }
            gates.push(Gate { phi: Vec::new(), audit: None, ..g.clone() });
        }
        let header = Header {
            spec: self.spec.clone(),
            gates,
            epoch: self.epoch,
            history: self.history.clone(),
            tensors: tensors
                .iter()
                .map(|(name, shape, data)| TensorEntry {
                    name: name.clone(),
                    shape: if name.starts_with("phi/") || name.starts_with("audit/") { vec![data.len()] } else { shape.to_vec() },
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = tensors.iter().map(|t| t.2.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &tensors {
            for v in *data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes.get(20..20 + len).ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut cursor = &bytes[20 + len..];
        let mut ckpt = Checkpoint {
            spec: header.spec,
            weights: Weights::default(),
            gates: header.gates,
            velocity: BTreeMap::new(),
            epoch: header.epoch,
            history: header.history,
        };
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if cursor.len() < 8 * n {
                return Err(Error::Checkpoint(format!("truncated payload at '{}'", entry.name)));
            }
            let data: Vec<f64> = cursor[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            cursor = &cursor[8 * n..];
            let (kind, key) = entry.name.split_once('/').ok_or_else(|| Error::Checkpoint(format!("bad tensor name '{}'", entry.name)))?;
            let gate_index = || -> Result<usize> {
                key.parse::<usize>().ok().filter(|&i| i < ckpt.gates.len()).ok_or_else(|| Error::Checkpoint(format!("bad gate index '{key}'")))
            };
            match kind {
                "param" => drop(ckpt.weights.params.insert(key.into(), Tensor::new(entry.shape, data)?)),
                "buffer" => drop(ckpt.weights.buffers.insert(key.into(), Tensor::new(entry.shape, data)?)),
                "velocity" => drop(ckpt.velocity.insert(key.into(), Tensor::new(entry.shape, data)?)),
                "phi" => {
                    let i = gate_index()?;
                    ckpt.gates[i].phi = data;
                }
                "audit" => {
                    let i = gate_index()?;
                    ckpt.gates[i].audit = Some(data);
                }
                _ => return Err(Error::Checkpoint(format!("unknown tensor kind '{kind}'"))),
            }
        }
        if !cursor.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", cursor.len())));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
