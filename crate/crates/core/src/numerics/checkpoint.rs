//! Named-array container.
//!
//! ```text
//! bytes 0..8    magic "FLOWCKPT"
//! bytes 8..16   manifest length L, u64 little-endian
//! bytes 16..16+L  JSON manifest: format_version, kind, metadata, and for every
//!               tensor its name, shape, byte offset and element count
//! remainder     payload: every tensor's entries as little-endian f64, in
//!               manifest order; offsets are relative to the payload start
//! ```
//!
//! Round-trips are bit-exact. The manifest is written with sorted keys so
//! identical contents always produce identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::numerics::{AdamW, NetConfig, ParamSet, Tensor, TrainState, VelocityNet};

pub const MAGIC: &[u8; 8] = b"FLOWCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    metadata: Map<String, Value>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub metadata: Map<String, Value>,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Checkpoint {
            kind: kind.into(),
            metadata: Map::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.push(format!("{prefix}/{name}"), t.clone());
        }
    }

    pub fn set_meta<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.metadata.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key:?}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    /// All tensors under `prefix/`, prefix stripped, in stored order.
    pub fn params(&self, prefix: &str) -> ParamSet {
        let p = format!("{prefix}/");
        ParamSet::from_named(
            self.tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
                .collect(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    len: t.len() as u64,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..body])?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let payload = &bytes[body..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let start = e.offset as usize;
            let end = start + 8 * e.len as usize;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor {:?} runs past the payload", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Checkpoint {
            kind: manifest.kind,
            metadata: manifest.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)))
        }
    }

    // ---- typed helpers ----

    pub fn from_net(kind: &str, net: &VelocityNet) -> Result<Self> {
        let mut c = Checkpoint::new(kind);
        c.set_meta("net", net.config())?;
        c.push_params("theta", net.params());
        Ok(c)
    }

    pub fn to_net(&self) -> Result<VelocityNet> {
        let cfg: NetConfig = self.meta("net")?;
        VelocityNet::from_params(cfg, self.params("theta"))
    }

    pub fn from_train_state(kind: &str, state: &TrainState) -> Result<Self> {
        let mut c = Checkpoint::from_net(kind, &state.theta)?;
        c.set_meta("iters", &state.iters)?;
        c.set_meta("adamw_step", &state.adamw.step)?;
        c.push_params("theta_ema", state.theta_ema.params());
        c.push_params("adamw_m", &state.adamw.m);
        c.push_params("adamw_v", &state.adamw.v);
        Ok(c)
    }

    pub fn to_train_state(&self) -> Result<TrainState> {
        let cfg: NetConfig = self.meta("net")?;
        let theta = VelocityNet::from_params(cfg, self.params("theta"))?;
        let theta_ema = VelocityNet::from_params(cfg, self.params("theta_ema"))?;
        let m = self.params("adamw_m");
        let v = self.params("adamw_v");
        theta.params().check_layout(&m, "adamw_m")?;
        theta.params().check_layout(&v, "adamw_v")?;
        Ok(TrainState {
            theta,
            theta_ema,
            adamw: AdamW {
                m,
                v,
                step: self.meta("adamw_step")?,
            },
            iters: self.meta("iters")?,
        })
    }
}
