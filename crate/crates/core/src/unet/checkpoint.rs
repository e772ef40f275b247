//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SNNRGCK1"
//! meta_len   u64
//! meta       meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! count      u64
//! count x {
//!     name_len u32, name (UTF-8)
//!     ndim     u32, dims (ndim x u64)
//!     data     prod(dims) x f64
//! }
//! ```
//!
//! Batch-norm running statistics are stored as `<layer>.running_mean` and
//! `<layer>.running_var`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::Network;
use super::spec::{Flavor, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Tensor};

pub const MAGIC: &[u8; 8] = b"SNNRGCK1";
const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub flavor: Flavor,
    pub phase: String,
    pub seed: u64,
    pub spec: NetworkSpec,
    pub spec_hash: String,
    /// Free-form provenance (config hash, epochs, calibration percentile).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_network(net: &Network, phase: &str, seed: u64) -> Self {
        let mut tensors = net.params().clone();
        for (name, s) in net.bn_stats() {
            tensors.insert(format!("{name}{RUNNING_MEAN}"), s.mean.clone());
            tensors.insert(format!("{name}{RUNNING_VAR}"), s.var.clone());
        }
        Checkpoint {
            meta: CheckpointMeta {
                flavor: net.flavor(),
                phase: phase.to_string(),
                seed,
                spec: net.spec().clone(),
                spec_hash: net.spec().hash(),
                extra: BTreeMap::new(),
            },
            tensors,
        }
    }

    pub fn to_network(&self) -> Result<Network> {
        if self.meta.spec.hash() != self.meta.spec_hash {
            return Err(Error::Checkpoint("spec hash does not match the stored spec".into()));
        }
        let mut params = BTreeMap::new();
        let mut means = BTreeMap::new();
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            if let Some(layer) = name.strip_suffix(RUNNING_MEAN) {
                means.insert(layer.to_string(), t.clone());
            } else if let Some(layer) = name.strip_suffix(RUNNING_VAR) {
                vars.insert(layer.to_string(), t.clone());
            } else {
                params.insert(name.clone(), t.clone());
            }
        }
        let mut bn = BTreeMap::new();
        for (layer, mean) in means {
            let var = vars
                .remove(&layer)
                .ok_or_else(|| Error::Checkpoint(format!("`{layer}` has a running mean but no variance")))?;
            bn.insert(layer, RunningStats { mean, var });
        }
        if let Some(layer) = vars.keys().next() {
            return Err(Error::Checkpoint(format!("`{layer}` has a running variance but no mean")));
        }
        Network::from_parts(&self.meta.spec, self.meta.flavor, params, bn)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(64 + meta.len() + self.tensors.values().map(|t| t.len() * 8 + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        if meta.spec.hash() != meta.spec_hash {
            return Err(Error::Checkpoint("spec hash does not match the stored spec".into()));
        }
        let count = r.u64()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint(format!("tensor name at byte {} is not UTF-8", r.pos)))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the stored spec against `expected`.
    pub fn load_for(path: &Path, expected: &NetworkSpec) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.meta.spec_hash != expected.hash() {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different network spec",
                path.display()
            )));
        }
        Ok(ck)
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
