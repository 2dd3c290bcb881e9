//! Binary checkpoint format: magic `HZCK`, schema version, the full training
//! configuration as embedded JSON, the RNG state, and length-prefixed
//! per-parameter records carrying the value plus both Adam moment buffers.
//! f64 payloads are stored as raw little-endian bits, so a round trip is
//! bitwise exact.

use crate::error::{Error, Result};
use crate::model::HarmonizerModel;
use crate::pipeline::TrainConfig;
use crate::rng::Prng;
use crate::tensor::adam::{AdamConfig, AdamState};
use crate::tensor::params::ParamSet;
use crate::tensor::Tensor;
use rand::SeedableRng;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HZCK";
pub const CHECKPOINT_SCHEMA: u32 = 1;

/// One named parameter with its optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub value: Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// A full training snapshot: everything needed to resume bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: u8,
    pub config: TrainConfig,
    pub adam_step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    /// Snapshots the current training state.
    pub fn capture(
        phase: u8,
        config: &TrainConfig,
        params: &ParamSet,
        adam: &AdamState,
        rng: &Prng,
    ) -> Self {
        let entries = params
            .iter()
            .map(|(id, entry)| {
                let (m, v) = adam.moments(id);
                CheckpointEntry {
                    name: entry.name.clone(),
                    value: entry.value.clone(),
                    m: m.to_vec(),
                    v: v.to_vec(),
                }
            })
            .collect();
        Checkpoint {
            phase,
            config: config.clone(),
            adam_step: adam.step,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            entries,
        }
    }

    /// Snapshot for inference-only use: parameters as they stand, zeroed
    /// optimizer moments, and a fresh RNG at the configured seed.
    pub fn for_inference(phase: u8, config: &TrainConfig, params: &ParamSet) -> Self {
        let entries = params
            .iter()
            .map(|(_, entry)| {
                let n = entry.value.numel();
                CheckpointEntry {
                    name: entry.name.clone(),
                    value: entry.value.clone(),
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        let rng = crate::rng::rng_from_seed(config.seed);
        Checkpoint {
            phase,
            config: config.clone(),
            adam_step: 0,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            entries,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let display = path.display().to_string();
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_SCHEMA.to_le_bytes());
        buf.push(self.phase);
        let config_json = serde_json::to_vec(&self.config)?;
        buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&config_json);
        buf.extend_from_slice(&self.rng_seed);
        buf.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        buf.extend_from_slice(&self.adam_step.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            buf.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
            for &d in e.value.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in e.value.data() {
                buf.extend_from_slice(&x.to_bits().to_le_bytes());
            }
            for &x in &e.m {
                buf.extend_from_slice(&x.to_bits().to_le_bytes());
            }
            for &x in &e.v {
                buf.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(display.clone(), e))?;
        file.write_all(&buf).map_err(|e| Error::io(display, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let display = path.display().to_string();
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(display.clone(), e))?;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)
            .map_err(|e| Error::io(display.clone(), e))?;
        let mut cursor = Cursor {
            raw: &raw,
            pos: 0,
            path: &display,
        };
        let magic = cursor.bytes(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(display.clone(), "bad magic (expected HZCK)"));
        }
        let schema = cursor.u32()?;
        if schema != CHECKPOINT_SCHEMA {
            return Err(Error::format(
                display.clone(),
                format!("schema {schema} unsupported (expected {CHECKPOINT_SCHEMA})"),
            ));
        }
        let phase = cursor.bytes(1)?[0];
        let config_len = cursor.u32()? as usize;
        let config: TrainConfig = serde_json::from_slice(cursor.bytes(config_len)?)?;
        let mut rng_seed = [0u8; 32];
        rng_seed.copy_from_slice(cursor.bytes(32)?);
        let rng_word_pos = u128::from_le_bytes(cursor.bytes(16)?.try_into().unwrap());
        let adam_step = u64::from_le_bytes(cursor.bytes(8)?.try_into().unwrap());
        let count = cursor.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cursor.u32()? as usize;
            let name = String::from_utf8(cursor.bytes(name_len)?.to_vec())
                .map_err(|_| Error::format(display.clone(), "parameter name is not UTF-8"))?;
            let rank = cursor.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cursor.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let value = Tensor::new(shape, cursor.f64s(numel)?)?;
            let m = cursor.f64s(numel)?;
            let v = cursor.f64s(numel)?;
            entries.push(CheckpointEntry { name, value, m, v });
        }
        if cursor.pos != raw.len() {
            return Err(Error::format(display, "trailing bytes after last record"));
        }
        Ok(Checkpoint {
            phase,
            config,
            adam_step,
            rng_seed,
            rng_word_pos,
            entries,
        })
    }

    /// Rebuilds the model, parameters, optimizer, and RNG from this
    /// snapshot. The restored forward pass is bitwise identical to the one
    /// that was captured.
    pub fn restore(&self) -> Result<(HarmonizerModel, ParamSet, AdamState, Prng)> {
        let (model, mut params) = HarmonizerModel::new(self.config.model.clone(), 0)?;
        if params.len() != self.entries.len() {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "model has {} parameters, checkpoint carries {}",
                    params.len(),
                    self.entries.len()
                ),
            ));
        }
        let adam_config = AdamConfig {
            lr: if self.phase >= 2 {
                self.config.lr_phase2
            } else {
                self.config.lr_phase1
            },
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            epsilon: 1e-8,
            weight_decay: self.config.weight_decay,
        };
        let mut adam = AdamState::new(&params, adam_config);
        adam.step = self.adam_step;
        for entry in &self.entries {
            let id = params.id(&entry.name).ok_or_else(|| {
                Error::format("checkpoint", format!("unknown parameter '{}'", entry.name))
            })?;
            if params.value(id).shape() != entry.value.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "parameter '{}' has shape {:?}, checkpoint carries {:?}",
                        entry.name,
                        params.value(id).shape(),
                        entry.value.shape()
                    ),
                ));
            }
            *params.value_mut(id) = entry.value.clone();
            adam.set_moments(id, entry.m.clone(), entry.v.clone())?;
        }
        let mut rng = Prng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        Ok((model, params, adam, rng))
    }
}

struct Cursor<'a> {
    raw: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.raw.len() {
            return Err(Error::format(self.path.to_string(), "truncated checkpoint"));
        }
        let s = &self.raw[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|b| f64::from_bits(u64::from_le_bytes(b.try_into().unwrap())))
            .collect())
    }
}
