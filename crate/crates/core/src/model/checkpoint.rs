// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint file layout:
//!
//! ```text
//! "SUBLABCK" | header length (u64 LE) | JSON header | f32 LE payload
//! ```
//!
//! The header carries the config, step, optimizer-state hash and a table of
//! `(name, shape, byte offset)` entries into the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SUBLABCK";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet<f32>,
    pub step: u64,
    pub optimizer_state_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    optimizer_state_hash: String,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

const WHAT: &str = "checkpoint";

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Hash identifying this checkpoint in downstream provenance records.
    pub fn hash(&self) -> String {
        self.params.content_hash()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .params
            .infos
            .iter()
            .zip(&self.params.tensors)
            .map(|(info, t)| {
                let e = Entry {
                    name: info.name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            config: self.params.config.clone(),
            step: self.step,
            optimizer_state_hash: self.optimizer_state_hash.clone(),
            tensors,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.params.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(WHAT, "missing SUBLABCK header"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(WHAT, "truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::format(WHAT, e.to_string()))?;
        let payload = &bytes[header_end..];
        let layout = super::layout(&header.config);
        if layout.len() != header.tensors.len() {
            return Err(Error::format(WHAT, "tensor table does not match config"));
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for (info, e) in layout.iter().zip(&header.tensors) {
            if info.name != e.name || info.shape != e.shape {
                return Err(Error::format(
                    WHAT,
                    format!("unexpected tensor {} {:?}", e.name, e.shape),
                ));
            }
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset..e.offset + 4 * n)
                .ok_or_else(|| Error::format(WHAT, format!("payload too short for {}", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Checkpoint {
            params: ParamSet::from_parts(header.config, tensors)?,
            step: header.step,
            optimizer_state_hash: header.optimizer_state_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
