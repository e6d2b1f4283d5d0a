//! Checkpoints: a JSON manifest plus a little-endian `f32` blob.
//!
//! Blob layout: for every layer in order, its tensors in the order
//! `weights, s_q, v1, b_w_hat, b_s_hat, t_hat` followed by
//! `bn_gamma, bn_beta, bn_running_mean, bn_running_var` when the layer has
//! batch norm. The manifest lists every tensor with its offset and length
//! (in `f32` elements) and the SHA-256 of the blob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::renewal::{ObserverState, ShuttingGate};
use crate::train::{RenewalState, TrainConfig, Trainer};

pub const CHECKPOINT_FORMAT: &str = "bitsnn.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Enough to regenerate every later epoch's sample order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub renewal: Option<RenewalState>,
    pub train_config: Option<TrainConfig>,
    pub epoch: usize,
    pub step: usize,
    pub rng: RngState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    layer: usize,
    name: String,
    offset: usize,
    len: usize,
}

/// Observer with infinite extrema written as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct ObserverRecord {
    v_r_max: Option<f64>,
    v_r_min: Option<f64>,
    recorded_bits: u32,
    active: bool,
}

impl From<&ObserverState> for ObserverRecord {
    fn from(o: &ObserverState) -> Self {
        let fin = |x: f64| x.is_finite().then_some(x);
        ObserverRecord {
            v_r_max: fin(o.v_r_max),
            v_r_min: fin(o.v_r_min),
            recorded_bits: o.recorded_bits,
            active: o.active,
        }
    }
}

impl From<ObserverRecord> for ObserverState {
    fn from(r: ObserverRecord) -> Self {
        ObserverState {
            v_r_max: r.v_r_max.unwrap_or(f64::NEG_INFINITY),
            v_r_min: r.v_r_min.unwrap_or(f64::INFINITY),
            recorded_bits: r.recorded_bits,
            active: r.active,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RenewalRecord {
    weight: Vec<ObserverRecord>,
    spike: Vec<Vec<ObserverRecord>>,
    gate_w: Option<ShuttingGate>,
    gate_s: Option<ShuttingGate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    crate_version: String,
    spec: ModelSpec,
    epoch: usize,
    step: usize,
    rng: RngState,
    train_config: Option<TrainConfig>,
    renewal: Option<RenewalRecord>,
    blob: String,
    blob_sha256: String,
    blob_f32_count: usize,
    tensors: Vec<TensorEntry>,
}

fn layout(model: &Model) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (li, l) in model.layers.iter().enumerate() {
        for (name, t) in l.tensors() {
            out.push(TensorEntry {
                layer: li,
                name: name.to_string(),
                offset,
                len: t.len(),
            });
            offset += t.len();
        }
    }
    out
}

/// Blob file that sits next to a manifest.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl Checkpoint {
    /// Snapshot a trainer between epochs.
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            model: t.model.clone(),
            renewal: Some(t.renewal.clone()),
            train_config: Some(t.cfg.clone()),
            epoch: t.epoch,
            step: t.step,
            rng: RngState {
                seed: t.cfg.seed,
                next_epoch: t.epoch,
            },
        }
    }

    /// Resume training; `cfg` overrides the stored configuration.
    pub fn into_trainer(self, cfg: Option<TrainConfig>) -> Result<Trainer> {
        let cfg = cfg
            .or(self.train_config)
            .ok_or_else(|| Error::invalid("checkpoint carries no training configuration"))?;
        let renewal = self.renewal.unwrap_or_else(|| RenewalState::new(&self.model));
        let mut t = Trainer::resume(self.model, cfg, renewal, self.rng.next_epoch)?;
        t.step = self.step;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blob = Vec::new();
        for l in &self.model.layers {
            for (_, t) in l.tensors() {
                for &x in t {
                    blob.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
        }
        let bin = blob_path(path);
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            spec: self.model.spec.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng,
            train_config: self.train_config.clone(),
            renewal: self.renewal.as_ref().map(|r| RenewalRecord {
                weight: r.weight.iter().map(Into::into).collect(),
                spike: r.spike.iter().map(|s| s.iter().map(Into::into).collect()).collect(),
                gate_w: r.gate_w,
                gate_s: r.gate_s,
            }),
            blob: bin.file_name().expect("blob has a name").to_string_lossy().into_owned(),
            blob_sha256: hex::encode(Sha256::digest(&blob)),
            blob_f32_count: blob.len() / 4,
            tensors: layout(&self.model),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        let format = raw.get("format").and_then(|v| v.as_str()).unwrap_or("");
        if format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!("{} is not a {CHECKPOINT_FORMAT} manifest", path.display())));
        }
        let version = raw.get("version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Version {
                found: version.map_or_else(|| "none".to_string(), |v| v.to_string()),
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        let m: Manifest = serde_json::from_value(raw)?;
        let bin = path.with_file_name(&m.blob);
        let blob = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let actual = hex::encode(Sha256::digest(&blob));
        if actual != m.blob_sha256 {
            return Err(Error::Checksum {
                expected: m.blob_sha256,
                actual,
            });
        }
        if blob.len() != 4 * m.blob_f32_count {
            return Err(Error::Format {
                offset: blob.len() as u64,
                message: format!("blob has {} bytes, manifest expects {}", blob.len(), 4 * m.blob_f32_count),
            });
        }
        let mut model = Model::new(m.spec.clone(), 0)?;
        if layout(&model) != m.tensors {
            return Err(Error::Data("tensor layout in the manifest does not match the model spec".into()));
        }
        let mut pos = 0;
        for l in &mut model.layers {
            for t in l.tensors_mut() {
                for x in t.iter_mut() {
                    let b = &blob[pos..pos + 4];
                    *x = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
                    pos += 4;
                }
            }
        }
        let renewal = m.renewal.map(|r| RenewalState {
            weight: r.weight.into_iter().map(Into::into).collect(),
            spike: r.spike.into_iter().map(|s| s.into_iter().map(Into::into).collect()).collect(),
            gate_w: r.gate_w,
            gate_s: r.gate_s,
        });
        Ok(Checkpoint {
            model,
            renewal,
            train_config: m.train_config,
            epoch: m.epoch,
            step: m.step,
            rng: m.rng,
        })
    }
}
