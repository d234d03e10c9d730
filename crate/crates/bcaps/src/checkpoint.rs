//! Checkpoint container: "BCAP" magic, little-endian u32 version, u32 record
//! count, then length-prefixed records of (name, dtype, shape, payload). One
//! JSON record ("meta") carries the configs, counters, and RNG positions;
//! every tensor (parameters, running statistics, Adam moments) is its own
//! record. Byte layout is a pure function of the state, so save→load→save
//! reproduces the file exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::optim::AdamState;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use crate::train::{RngStreams, TrainConfig, TrainState};

pub const CKPT_MAGIC: &[u8; 4] = b"BCAP";
pub const CKPT_VERSION: u32 = 1;

const META_RECORD: &str = "meta";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    pub adam_t: u64,
    /// ChaCha word positions (lo, hi) for the init, shuffle, and noise
    /// streams, in that order.
    pub rng_word_pos: [[u64; 2]; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub name: String,
    pub dtype: Dtype,
    pub dims: Vec<u64>,
    pub payload: Vec<u8>,
}

fn push_record(out: &mut Vec<u8>, rec: &RawRecord) {
    out.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
    out.extend_from_slice(rec.name.as_bytes());
    out.push(rec.dtype.code());
    out.push(rec.dims.len() as u8);
    for &d in &rec.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(rec.payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&rec.payload);
}

pub fn write_records(records: &[RawRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in records {
        push_record(&mut out, rec);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CheckpointParse {
                offset: self.pos,
                msg: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn read_records(bytes: &[u8]) -> Result<Vec<RawRecord>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::CheckpointParse {
            offset: 0,
            msg: format!("bad magic {magic:02x?}, expected {CKPT_MAGIC:02x?}"),
        });
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::CheckpointParse {
            offset: 4,
            msg: format!("unsupported version {version}, expected {CKPT_VERSION}"),
        });
    }
    let count = r.u32("record count")?;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u32("record name length")? as usize;
        let name_off = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "record name")?)
            .map_err(|e| Error::CheckpointParse {
                offset: name_off,
                msg: format!("record name is not UTF-8: {e}"),
            })?
            .to_string();
        let code_off = r.pos;
        let code = r.take(1, "dtype code")?[0];
        let dtype = Dtype::from_code(code).ok_or_else(|| Error::CheckpointParse {
            offset: code_off,
            msg: format!("unknown dtype code {code}"),
        })?;
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dimension")?);
        }
        let payload_len = r.u64("payload length")? as usize;
        let payload = r.take(payload_len, "payload")?.to_vec();
        records.push(RawRecord {
            name,
            dtype,
            dims,
            payload,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::CheckpointParse {
            offset: r.pos,
            msg: format!("{} trailing bytes after last record", bytes.len() - r.pos),
        });
    }
    Ok(records)
}

fn tensor_record<S: Scalar>(name: String, t: &Tensor<S>) -> RawRecord {
    let mut payload = Vec::with_capacity(t.numel() * S::BYTES);
    for &v in t.data() {
        v.write_le(&mut payload);
    }
    RawRecord {
        name,
        dtype: S::DTYPE,
        dims: t.shape().iter().map(|&d| d as u64).collect(),
        payload,
    }
}

fn record_tensor<S: Scalar>(rec: &RawRecord) -> Result<Tensor<S>> {
    if rec.dtype != S::DTYPE {
        return Err(Error::CheckpointMismatch(format!(
            "record '{}' holds {}, this run wants {}",
            rec.name,
            rec.dtype.name(),
            S::DTYPE.name()
        )));
    }
    let shape: Vec<usize> = rec.dims.iter().map(|&d| d as usize).collect();
    let numel: usize = shape.iter().product();
    if rec.payload.len() != numel * S::BYTES {
        return Err(Error::CheckpointMismatch(format!(
            "record '{}' payload is {} bytes, shape {:?} needs {}",
            rec.name,
            rec.payload.len(),
            shape,
            numel * S::BYTES
        )));
    }
    let data: Vec<S> = rec
        .payload
        .chunks_exact(S::BYTES)
        .map(S::read_le)
        .collect();
    Tensor::new(&shape, data)
}

/// Serializes the full training state. Record order is fixed: meta, then
/// parameters, running statistics, and Adam moments in canonical order.
pub fn checkpoint_bytes<S: Scalar>(state: &TrainState<S>, cfg: &TrainConfig) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        config: state.model.config(),
        train: cfg.clone(),
        epoch: state.epoch,
        adam_t: state.adam.t,
        rng_word_pos: state.streams.word_pos(),
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut records = vec![RawRecord {
        name: META_RECORD.into(),
        dtype: Dtype::Bytes,
        dims: vec![meta_json.len() as u64],
        payload: meta_json,
    }];
    let names = state.model.param_names();
    for (name, t) in names.iter().zip(state.model.params()) {
        records.push(tensor_record(format!("param.{name}"), t));
    }
    for (name, t) in state.model.extra_names().iter().zip(state.model.extras()) {
        records.push(tensor_record(format!("extra.{name}"), t));
    }
    for (name, t) in names.iter().zip(&state.adam.m) {
        records.push(tensor_record(format!("adam.m.{name}"), t));
    }
    for (name, t) in names.iter().zip(&state.adam.v) {
        records.push(tensor_record(format!("adam.v.{name}"), t));
    }
    Ok(write_records(&records))
}

pub fn save_checkpoint<S: Scalar>(
    state: &TrainState<S>,
    cfg: &TrainConfig,
    path: &Path,
) -> Result<()> {
    fs::write(path, checkpoint_bytes(state, cfg)?)?;
    Ok(())
}

fn parse_meta(records: &[RawRecord]) -> Result<CheckpointMeta> {
    let rec = records
        .iter()
        .find(|r| r.name == META_RECORD)
        .ok_or_else(|| Error::CheckpointMismatch("no meta record".into()))?;
    serde_json::from_slice(&rec.payload)
        .map_err(|e| Error::CheckpointMismatch(format!("meta record does not parse: {e}")))
}

/// Reads only the metadata (model kind, precision, counters); used to pick
/// the scalar type before a full typed load.
pub fn peek_meta(path: &Path) -> Result<CheckpointMeta> {
    let records = read_records(&fs::read(path)?)?;
    parse_meta(&records)
}

/// Full typed load. Every tensor record must match the model the config
/// describes, and no record may be missing or unexpected.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(TrainState<S>, TrainConfig)> {
    let records = read_records(&fs::read(path)?)?;
    let meta = parse_meta(&records)?;
    if meta.train.precision.dtype() != S::DTYPE {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint precision is {}, this load wants {}",
            meta.train.precision,
            S::DTYPE.name()
        )));
    }

    // Structural init only; every tensor is overwritten from records.
    let mut scratch = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::<S>::init(&meta.config, &mut scratch)?;

    let mut by_name: std::collections::HashMap<&str, &RawRecord> =
        records.iter().map(|r| (r.name.as_str(), r)).collect();
    by_name.remove(META_RECORD);

    let mut fill = |full: String, dst: &mut Tensor<S>| -> Result<()> {
        let rec = by_name.remove(full.as_str()).ok_or_else(|| {
            Error::CheckpointMismatch(format!("missing record '{full}'"))
        })?;
        let t = record_tensor::<S>(rec)?;
        if t.shape() != dst.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "record '{full}' has shape {:?}, model wants {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        *dst = t;
        Ok(())
    };

    let names: Vec<String> = model.param_names().iter().map(|s| s.to_string()).collect();
    for (name, t) in names.iter().zip(model.params_mut()) {
        fill(format!("param.{name}"), t)?;
    }
    let extra_names: Vec<String> = model.extra_names().iter().map(|s| s.to_string()).collect();
    for (name, t) in extra_names.iter().zip(model.extras_mut()) {
        fill(format!("extra.{name}"), t)?;
    }
    let mut adam = AdamState::new(&model.params());
    adam.t = meta.adam_t;
    for (name, t) in names.iter().zip(adam.m.iter_mut()) {
        fill(format!("adam.m.{name}"), t)?;
    }
    for (name, t) in names.iter().zip(adam.v.iter_mut()) {
        fill(format!("adam.v.{name}"), t)?;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::CheckpointMismatch(format!(
            "unexpected record '{extra}'"
        )));
    }

    let streams = RngStreams::restore(meta.train.seed, meta.rng_word_pos);
    Ok((
        TrainState {
            model,
            adam,
            epoch: meta.epoch,
            streams,
        },
        meta.train,
    ))
}

use rand::SeedableRng;
