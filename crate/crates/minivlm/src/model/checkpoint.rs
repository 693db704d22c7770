//! Checkpoint and train-state files.
//!
//! A checkpoint is `MVLM`, a format version, the config as JSON, and a
//! named-tensor table with little-endian f32 payloads — nothing else, so
//! a round trip is bit-exact by construction. Optimizer state and the
//! curriculum position live in a separate train-state file (`MVTS`) so
//! that checkpoints stay pure parameter snapshots while training can
//! still resume where it stopped.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::optim::{AdamHyper, AdamState};
use crate::model::params::{schema, ModelParams};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"MVLM";
const TRAIN_STATE_MAGIC: &[u8; 4] = b"MVTS";
const FORMAT_VERSION: u32 = 1;

/// Serializes parameters to the checkpoint byte format.
pub fn checkpoint_bytes(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let config_json = serde_json::to_vec(&params.config)
        .map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        let (rows, cols) = tensor.dims2();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(params)?).map_err(|e| Error::io(path, e))
}

/// Parses checkpoint bytes back into parameters. Any structural problem —
/// bad magic, unsupported version, truncation, trailing bytes, missing or
/// misshapen tensors — is a format error; nothing partial is returned.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let config_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| Error::Format(format!("bad config block: {e}")))?;
    let n = r.u32()? as usize;
    let mut table = HashMap::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r.f32s(rows * cols)?;
        table.insert(name, Tensor::matrix(rows, cols, data)?);
    }
    r.finish()?;
    ModelParams::from_named(config, table)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Loads a checkpoint and rejects it unless its config matches `expected`
/// exactly, naming every differing field.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &ModelConfig,
) -> Result<ModelParams<f32>> {
    let params = load_checkpoint(path)?;
    let diffs = config_mismatches(expected, &params.config);
    if !diffs.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint config does not match: {}",
            diffs.join("; ")
        )));
    }
    Ok(params)
}

/// Field-by-field config comparison; each entry names one differing field
/// as `name: expected vs found`.
pub fn config_mismatches(expected: &ModelConfig, found: &ModelConfig) -> Vec<String> {
    macro_rules! diff {
        ($out:ident, $field:ident) => {
            if expected.$field != found.$field {
                $out.push(format!(
                    concat!(stringify!($field), ": {} vs {}"),
                    expected.$field, found.$field
                ));
            }
        };
    }
    let mut out = Vec::new();
    diff!(out, image_size);
    diff!(out, patch_size);
    diff!(out, embed_dim);
    diff!(out, depth_vision);
    diff!(out, depth_text);
    diff!(out, heads);
    diff!(out, proj_dim);
    diff!(out, vocab_size);
    diff!(out, max_text_len);
    diff!(out, seed);
    out
}

/// Optimizer state plus curriculum position, for resuming training.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Next phase to execute (phases before it are complete).
    pub phase: usize,
    /// Next step within that phase.
    pub step: usize,
    pub adam: AdamState<f32>,
}

/// Serializes train state; the config rides along so a resume can verify
/// it belongs to the checkpoint being resumed.
pub fn train_state_bytes(state: &TrainState, config: &ModelConfig) -> Result<Vec<u8>> {
    let config_json = serde_json::to_vec(config)
        .map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;
    let hyper = state.adam.hyper();
    let (m, v) = state.adam.moments();
    let mut out = Vec::new();
    out.extend_from_slice(TRAIN_STATE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(state.phase as u32).to_le_bytes());
    out.extend_from_slice(&(state.step as u32).to_le_bytes());
    out.extend_from_slice(&state.adam.step_count().to_le_bytes());
    out.extend_from_slice(&hyper.beta1.to_le_bytes());
    out.extend_from_slice(&hyper.beta2.to_le_bytes());
    out.extend_from_slice(&hyper.eps.to_le_bytes());
    out.extend_from_slice(&(m.len() as u32).to_le_bytes());
    for buf in m.iter().chain(v.iter()) {
        out.extend_from_slice(&(buf.len() as u32).to_le_bytes());
        for &x in buf {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_train_state(state: &TrainState, config: &ModelConfig, path: &Path) -> Result<()> {
    std::fs::write(path, train_state_bytes(state, config)?).map_err(|e| Error::io(path, e))
}

/// Parses a train-state file, validating the moment buffers against the
/// embedded config's schema. Returns the config it was saved under and
/// the state.
pub fn load_train_state(path: &Path) -> Result<(ModelConfig, TrainState)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes);
    if r.take(4)? != TRAIN_STATE_MAGIC {
        return Err(Error::Format("not a train-state file: bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported train-state version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let config_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| Error::Format(format!("bad config block: {e}")))?;
    let phase = r.u32()? as usize;
    let step = r.u32()? as usize;
    let adam_step = r.u64()?;
    let hyper = AdamHyper {
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    };
    let n = r.u32()? as usize;
    let sizes: Vec<usize> = schema(&config).iter().map(|s| s.rows * s.cols).collect();
    if n != sizes.len() {
        return Err(Error::Format(format!(
            "train state holds {n} moment buffers, schema needs {}",
            sizes.len()
        )));
    }
    let mut read_buffers = |sizes: &[usize]| -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(sizes.len());
        for &expect in sizes {
            let len = r.u32()? as usize;
            if len != expect {
                return Err(Error::Format(format!(
                    "moment buffer of {len} values, schema needs {expect}"
                )));
            }
            out.push(r.f32s(len)?);
        }
        Ok(out)
    };
    let m = read_buffers(&sizes)?;
    let v = read_buffers(&sizes)?;
    r.finish()?;
    Ok((
        config,
        TrainState {
            phase,
            step,
            adam: AdamState::from_parts(hyper, adam_step, m, v),
        },
    ))
}

/// Bounds-checked little-endian reader over a byte slice.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("file truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last field",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 16,
            depth_vision: 2,
            depth_text: 1,
            heads: 2,
            proj_dim: 8,
            vocab_size: 24,
            max_text_len: 8,
            seed: 11,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let params = ModelParams::<f32>::init(tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mvlm");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, params.config);
        for ((na, a), (nb, b)) in params.iter().zip(loaded.iter()) {
            assert_eq!(na, nb);
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "tensor {na}");
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let params = ModelParams::<f32>::init(tiny_config()).unwrap();
        let mut bytes = checkpoint_bytes(&params).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = checkpoint_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let params = ModelParams::<f32>::init(tiny_config()).unwrap();
        let mut bytes = checkpoint_bytes(&params).unwrap();
        bytes[0] = b'X';
        assert!(checkpoint_from_bytes(&bytes).is_err());
    }

    #[test]
    fn future_version_is_rejected() {
        let params = ModelParams::<f32>::init(tiny_config()).unwrap();
        let mut bytes = checkpoint_bytes(&params).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = checkpoint_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn config_mismatch_names_the_differing_fields() {
        let params = ModelParams::<f32>::init(tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mvlm");
        save_checkpoint(&params, &path).unwrap();
        let other = ModelConfig {
            embed_dim: 32,
            heads: 4,
            ..tiny_config()
        };
        let err = load_checkpoint_expecting(&path, &other).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("embed_dim: 32 vs 16"), "{msg}");
        assert!(msg.contains("heads: 4 vs 2"), "{msg}");
    }

    #[test]
    fn train_state_round_trips() {
        let cfg = tiny_config();
        let sizes: Vec<usize> = schema(&cfg).iter().map(|s| s.rows * s.cols).collect();
        let mut adam = AdamState::<f32>::new(&sizes);
        // Give the moments non-trivial values by applying one update.
        let mut tensors: Vec<Tensor<f32>> = schema(&cfg)
            .iter()
            .map(|s| Tensor::zeros(vec![s.rows, s.cols]))
            .collect();
        let grads: Vec<Vec<f32>> = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| (0..n).map(|j| ((i + j) % 7) as f32 * 0.1 - 0.3).collect())
            .collect();
        adam.apply(&mut tensors, &grads, 1e-3).unwrap();

        let state = TrainState {
            phase: 1,
            step: 42,
            adam,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mvts");
        save_train_state(&state, &cfg, &path).unwrap();
        let (loaded_cfg, loaded) = load_train_state(&path).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(loaded.phase, 1);
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.adam.step_count(), 1);
        let (m0, v0) = state.adam.moments();
        let (m1, v1) = loaded.adam.moments();
        assert_eq!(m0, m1);
        assert_eq!(v0, v1);
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let params = ModelParams::<f32>::init(tiny_config()).unwrap();
        let mut bytes = checkpoint_bytes(&params).unwrap();
        bytes.push(0);
        assert!(checkpoint_from_bytes(&bytes).is_err());
    }
}
