//! Model snapshots and their binary container.
//!
//! # Layout (all integers little-endian)
//!
//! ```text
//! magic        8 bytes   "CMILCKPT"
//! version      u32       1
//! float_bytes  u32       4 (f32) or 8 (f64)
//! meta_len     u64
//! meta         meta_len bytes of UTF-8 JSON (config, dims, epoch, flags, ...)
//! n_tensors    u32
//! n_tensors × {
//!     name_len u32, name (UTF-8),
//!     rows u64, cols u64,
//!     rows·cols floats of float_bytes each, row-major
//! }
//! ```
//!
//! Tensor names: `param/<name>` for every learnable tensor in store order,
//! `cafd/cluster_logits`, and when present `frozen/centers`,
//! `frozen/cluster_means`, `frozen/global_mean`, `frozen/cluster_bias`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::cafd::BiasModel;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::trainer::{Model, Phase, Precision, TrainConfig};

pub const MAGIC: &[u8; 8] = b"CMILCKPT";
pub const VERSION: u32 = 1;

/// Cluster centers and bias estimate frozen at the end of an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenStats {
    pub centers: Tensor,
    pub bias: BiasModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub feature_dim: usize,
    pub thumbnail_dim: usize,
    pub epoch: usize,
    pub cafd_active: bool,
    pub sampler_active: bool,
    pub params: ParamStore,
    pub cluster_logits: Vec<f64>,
    pub k_effective: usize,
    pub frozen: Option<FrozenStats>,
    pub train_median_risk: Option<f64>,
    /// Epoch the RNG streams would continue from; with the config seed this
    /// fixes every later draw.
    pub next_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    feature_dim: usize,
    thumbnail_dim: usize,
    epoch: usize,
    cafd_active: bool,
    sampler_active: bool,
    k_effective: usize,
    train_median_risk: Option<f64>,
    next_epoch: usize,
    degenerate: Option<Vec<bool>>,
    sample_count: Option<usize>,
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        config: &TrainConfig,
        epoch: usize,
        phase: Phase,
        frozen: Option<FrozenStats>,
    ) -> Self {
        Self {
            config: config.clone(),
            feature_dim: model.feature_dim,
            thumbnail_dim: model.thumbnail_dim,
            epoch,
            cafd_active: phase.cafd,
            sampler_active: phase.sampler,
            params: model.store.clone(),
            cluster_logits: model.cluster.cluster_logits.clone(),
            k_effective: model.cluster.k_effective,
            frozen,
            train_median_risk: None,
            next_epoch: epoch + 1,
        }
    }

    pub fn phase(&self) -> Phase {
        Phase {
            warm_up: false,
            cafd: self.cafd_active,
            sampler: self.sampler_active,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let wide = self.config.precision == Precision::F64;
        let meta = Meta {
            config: self.config.clone(),
            feature_dim: self.feature_dim,
            thumbnail_dim: self.thumbnail_dim,
            epoch: self.epoch,
            cafd_active: self.cafd_active,
            sampler_active: self.sampler_active,
            k_effective: self.k_effective,
            train_median_risk: self.train_median_risk,
            next_epoch: self.next_epoch,
            degenerate: self.frozen.as_ref().map(|f| f.bias.degenerate.clone()),
            sample_count: self.frozen.as_ref().map(|f| f.bias.sample_count),
        };
        let meta = serde_json::to_vec(&meta)?;
        let mut tensors: Vec<(String, &Tensor)> = self
            .params
            .names()
            .iter()
            .zip(self.params.values())
            .map(|(n, t)| (format!("param/{n}"), t))
            .collect();
        let logits = Tensor::row_vector(self.cluster_logits.clone());
        tensors.push(("cafd/cluster_logits".into(), &logits));
        if let Some(f) = &self.frozen {
            tensors.push(("frozen/centers".into(), &f.centers));
            tensors.push(("frozen/cluster_means".into(), &f.bias.cluster_means));
            tensors.push(("frozen/global_mean".into(), &f.bias.global_mean));
            tensors.push(("frozen/cluster_bias".into(), &f.bias.cluster_bias));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(if wide { 8u32 } else { 4u32 }).to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for &x in t.data() {
                if wide {
                    out.extend_from_slice(&x.to_le_bytes());
                } else {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(parse_err("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(parse_err(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let width = r.u32()?;
        if width != 4 && width != 8 {
            return Err(parse_err(format!("unsupported float width {width}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: Meta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| parse_err(e.to_string()))?;
        let n = r.u32()?;
        let mut params = ParamStore::new();
        let mut logits = None;
        let (mut centers, mut means, mut global, mut bias) = (None, None, None, None);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| parse_err(e.to_string()))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| parse_err("tensor size overflow"))?;
            let raw = r.take(
                count
                    .checked_mul(width as usize)
                    .ok_or_else(|| parse_err("tensor size overflow"))?,
            )?;
            let data: Vec<f64> = if width == 8 {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            } else {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            };
            let t = Tensor::new(rows, cols, data)?;
            match name.as_str() {
                "cafd/cluster_logits" => logits = Some(t.into_data()),
                "frozen/centers" => centers = Some(t),
                "frozen/cluster_means" => means = Some(t),
                "frozen/global_mean" => global = Some(t),
                "frozen/cluster_bias" => bias = Some(t),
                other => match other.strip_prefix("param/") {
                    Some(p) => {
                        params.add(p, t);
                    }
                    None => return Err(parse_err(format!("unknown tensor {other}"))),
                },
            }
        }
        if r.pos != bytes.len() {
            return Err(parse_err("trailing bytes after tensor table"));
        }
        let frozen = match (centers, means, global, bias) {
            (Some(centers), Some(cluster_means), Some(global_mean), Some(cluster_bias)) => {
                Some(FrozenStats {
                    centers,
                    bias: BiasModel {
                        cluster_bias,
                        global_mean,
                        cluster_means,
                        sample_count: meta.sample_count.unwrap_or(0),
                        degenerate: meta.degenerate.unwrap_or_default(),
                    },
                })
            }
            (None, None, None, None) => None,
            _ => return Err(parse_err("incomplete frozen statistics")),
        };
        Ok(Self {
            config: meta.config,
            feature_dim: meta.feature_dim,
            thumbnail_dim: meta.thumbnail_dim,
            epoch: meta.epoch,
            cafd_active: meta.cafd_active,
            sampler_active: meta.sampler_active,
            params,
            cluster_logits: logits.ok_or_else(|| parse_err("missing cluster logits"))?,
            k_effective: meta.k_effective,
            frozen,
            train_median_risk: meta.train_median_risk,
            next_epoch: meta.next_epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                context: path.display().to_string(),
                message,
            },
            other => other,
        })
    }
}

fn parse_err(message: impl Into<String>) -> Error {
    Error::Parse {
        context: "checkpoint".into(),
        message: message.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(parse_err(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
