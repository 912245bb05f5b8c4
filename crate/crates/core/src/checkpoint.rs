//! Checkpoint container: JSON metadata plus named little-endian `f64`
//! tensors, with a human-readable JSON sidecar.
//!
//! Layout: `b"DANC"`, `u32` version, `u64` metadata length, metadata JSON,
//! then every tensor listed in the metadata in order.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::DegradationSpec;
use crate::error::{DanError, Result};
use crate::kernels::PcaBasis;
use crate::network::{Dan, NetworkConfig};
use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::training::{AdamState, TrainConfig};

const MAGIC: &[u8; 4] = b"DANC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
}

/// Everything in a checkpoint except the tensor payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub degradation: DegradationSpec,
    /// Next training step.
    pub step: u64,
    pub seed: u64,
    pub num_params: usize,
    pub adam_t: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// A saved model with its optimizer state and embedded PCA basis.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
    pub basis: PcaBasis,
}

/// Sidecar manifest path of a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut entries = Vec::new();
        let mut payload: Vec<&Tensor> = Vec::new();
        for id in self.params.ids() {
            entries.push(TensorEntry {
                name: format!("param/{}", self.params.name(id)),
                shape: self.params.get(id).shape(),
            });
            payload.push(self.params.get(id));
        }
        if let Some(adam) = &self.adam {
            for (kind, ts) in [("adam_m", &adam.m), ("adam_v", &adam.v)] {
                for (id, t) in self.params.ids().zip(ts) {
                    entries.push(TensorEntry {
                        name: format!("{kind}/{}", self.params.name(id)),
                        shape: t.shape(),
                    });
                    payload.push(t);
                }
            }
        }
        let n = self.basis.size() * self.basis.size();
        let mean = Tensor::from_vec([1, n, 1, 1], self.basis.mean().to_vec())?;
        let comps = Tensor::from_vec([self.basis.dim(), n, 1, 1], self.basis.components().to_vec())?;
        entries.push(TensorEntry {
            name: "basis/mean".into(),
            shape: mean.shape(),
        });
        entries.push(TensorEntry {
            name: "basis/components".into(),
            shape: comps.shape(),
        });
        payload.push(&mean);
        payload.push(&comps);

        let header = Header {
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("plain metadata");
        let mut bytes = Vec::with_capacity(16 + json.len() + payload.iter().map(|t| t.len() * 8).sum::<usize>());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for t in payload {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| DanError::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| DanError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| DanError::io(path, e))?;
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(&self.meta).expect("plain metadata")).map_err(|e| DanError::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| DanError::io(path, e))?;
        let bad = |msg: String| DanError::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version} (expected {CHECKPOINT_VERSION})")));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + json_len).ok_or_else(|| bad("truncated metadata".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("metadata: {e}")))?;
        if header.meta.version != version {
            return Err(bad("metadata version disagrees with container version".into()));
        }
        let mut pos = 16 + json_len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let len: usize = e.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 8 * len)
                .ok_or_else(|| bad(format!("truncated tensor {}", e.name)))?;
            pos += 8 * len;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((e.name.clone(), Tensor::from_vec(e.shape, data)?));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensors".into()));
        }

        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut mean = None;
        let mut comps = None;
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix("param/") {
                params.add(p, t);
            } else if name.starts_with("adam_m/") {
                m.push(t);
            } else if name.starts_with("adam_v/") {
                v.push(t);
            } else if name == "basis/mean" {
                mean = Some(t);
            } else if name == "basis/components" {
                comps = Some(t);
            } else {
                return Err(bad(format!("unexpected tensor {name}")));
            }
        }
        let (mean, comps) = mean.zip(comps).ok_or_else(|| bad("missing embedded PCA basis".into()))?;
        let size = header.meta.network.kernel_size;
        let basis = PcaBasis::from_parts(size, mean.into_vec(), comps.data().to_vec(), comps.n())?;
        let adam = match header.meta.adam_t {
            Some(t) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(bad("optimizer state does not match parameters".into()));
                }
                Some(AdamState { m, v, t })
            }
            None => None,
        };
        Ok(Checkpoint {
            meta: header.meta,
            params,
            adam,
            basis,
        })
    }

    /// Rejects a checkpoint whose architecture differs from `expected`
    /// (the iteration count is free and not compared).
    pub fn check_compatible(&self, expected: &NetworkConfig) -> Result<()> {
        let got = &self.meta.network;
        let mut diffs = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {$(
                if got.$f != expected.$f {
                    diffs.push(format!("{} {:?} (checkpoint) vs {:?} (config)", stringify!($f), got.$f, expected.$f));
                }
            )*};
        }
        cmp!(
            scale,
            image_channels,
            kernel_size,
            reduced_dim,
            restorer_groups,
            restorer_blocks,
            restorer_channels,
            restorer_cond_kernel,
            estimator_groups,
            estimator_blocks,
            estimator_channels,
            ablation
        );
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(DanError::Checkpoint(format!("config mismatch: {}", diffs.join("; "))))
        }
    }

    /// Rebuilds the network around the stored parameters.
    pub fn model(&self) -> Result<(Dan, ParamStore)> {
        let (dan, fresh) = Dan::new(self.meta.network.clone(), Arc::new(self.basis.clone()), 0)?;
        if fresh.len() != self.params.len() {
            return Err(DanError::Checkpoint(format!(
                "architecture has {} tensors, checkpoint {}",
                fresh.len(),
                self.params.len()
            )));
        }
        for id in fresh.ids() {
            if fresh.name(id) != self.params.name(id) || fresh.get(id).shape() != self.params.get(id).shape() {
                return Err(DanError::Checkpoint(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    self.params.name(id),
                    self.params.get(id).shape(),
                    fresh.name(id),
                    fresh.get(id).shape()
                )));
            }
        }
        Ok((dan, self.params.clone()))
    }
}
