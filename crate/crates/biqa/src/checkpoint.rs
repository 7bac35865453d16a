//! Checkpoint container.
//!
//! Layout: magic `BIQC`, `u32` version, `u64` header length, a JSON header
//! (run config, counters, parameter names and shapes), then BIQT tensors:
//! every parameter, then Adam's first moments, then its second moments, all
//! in canonical parameter order. Integers are little-endian.

use std::path::Path;

use biqa_core::model::{Model, Trainer};
use biqa_core::numerics::{biqt, AdamState, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io;

pub const MAGIC: &[u8; 4] = b"BIQC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    epoch: usize,
    adam_step: u64,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub trainer: Trainer<f32>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let model = &self.trainer.model;
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            adam_step: self.trainer.adam.step,
            params: model
                .named()
                .into_iter()
                .map(|(name, t)| ParamEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let adam = &self.trainer.adam;
        for t in model.tensors().into_iter().chain(&adam.m).chain(&adam.v) {
            out.extend_from_slice(&biqt::encode(t));
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::data(path, msg);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("checkpoint version {version} unsupported, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..).unwrap_or_default();
        if hlen > body.len() {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(e.to_string()))?;
        let mut rest = &body[hlen..];
        let n = header.params.len();
        let mut tensors = Vec::with_capacity(3 * n);
        for _ in 0..3 * n {
            let (t, used) = biqt::decode_prefix(rest).map_err(|e| Error::in_file(path, e))?;
            tensors.push(t);
            rest = &rest[used..];
        }
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        let v = tensors.split_off(2 * n);
        let m = tensors.split_off(n);
        let mut model: Model<Tensor<f32>> = Model::init(&header.config.model, 0);
        let names: Vec<String> = model.named().into_iter().map(|(name, _)| name).collect();
        let stored: Vec<&String> = header.params.iter().map(|p| &p.name).collect();
        if names.iter().collect::<Vec<_>>() != stored {
            return Err(bad("parameter names do not match the configured model".into()));
        }
        model.load_tensors(tensors).map_err(|e| Error::in_file(path, e))?;
        for (p, (a, b)) in model.tensors().iter().zip(m.iter().zip(&v)) {
            if a.shape() != p.shape() || b.shape() != p.shape() {
                return Err(bad("optimizer state does not match parameter shapes".into()));
            }
        }
        let trainer = Trainer {
            model,
            adam: AdamState {
                step: header.adam_step,
                m,
                v,
            },
            adam_cfg: header.config.optimizer,
            loss_cfg: header.config.loss.clone(),
        };
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            trainer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_bytes(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&io::read_bytes(path)?, path)
    }
}

/// Short content digest used to identify checkpoints and datasets in reports.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}
