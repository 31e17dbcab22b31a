//! Binary checkpoint codec.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "XMS1" | u32 version | u32 kind tag
//! u32 len | config blob (canonical key=value text, sorted keys, includes
//!                        the rng state)
//! u32 param count | records…
//! u8 optimizer flag | [u32 count | records…]
//! u64 checksum of all preceding bytes (FNV-1a)
//! ```
//!
//! One record is `u32 name len | name | u8 dtype | u8 rank | u32 dims… |
//! raw little-endian payload`. Parameters are stored in model visit order;
//! loading rebuilds the architecture from the config blob and validates
//! every name, dtype and shape against it.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::TensorError;
use crate::nn::bundle::{ModelBundle, ModelKind};
use crate::nn::layers::Module;
use crate::optim::Adam;
use crate::rng::Rng;
use crate::scalar::{DType, Scalar};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"XMS1";
pub const VERSION: u32 = 1;

const RNG_KEY: &str = "rng_state";

#[derive(Clone, Debug, PartialEq)]
pub enum CheckpointError {
    BadMagic,
    UnsupportedVersion(u32),
    ChecksumMismatch,
    Truncated,
    UnknownKind(u32),
    UnknownDtype(u8),
    Malformed(String),
    Config(TensorError),
    KindMismatch {
        expected: ModelKind,
        found: ModelKind,
    },
    Integrity(String),
}

impl core::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CheckpointError::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            CheckpointError::UnsupportedVersion(v) => {
                write!(f, "unsupported checkpoint version {v}")
            }
            CheckpointError::ChecksumMismatch => write!(f, "checksum mismatch (corrupt file)"),
            CheckpointError::Truncated => write!(f, "truncated checkpoint"),
            CheckpointError::UnknownKind(t) => write!(f, "unknown model kind tag {t}"),
            CheckpointError::UnknownDtype(t) => write!(f, "unknown dtype tag {t}"),
            CheckpointError::Malformed(m) => write!(f, "malformed checkpoint: {m}"),
            CheckpointError::Config(e) => write!(f, "bad embedded config: {e}"),
            CheckpointError::KindMismatch { expected, found } => {
                write!(f, "checkpoint holds a {found} model, expected {expected}")
            }
            CheckpointError::Integrity(m) => write!(f, "integrity error: {m}"),
        }
    }
}

impl core::error::Error for CheckpointError {}

/// FNV-1a over a byte stream. Any single-byte substitution changes the
/// digest: every round is a bijection of the running state.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config_text: String,
    pub params: Vec<ParamRecord>,
    pub optimizer: Option<Vec<ParamRecord>>,
}

fn write_record(out: &mut Vec<u8>, rec: &ParamRecord) {
    out.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
    out.extend_from_slice(rec.name.as_bytes());
    out.push(rec.dtype.tag());
    out.push(rec.shape.len() as u8);
    for &d in &rec.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&rec.payload);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn record(&mut self) -> Result<ParamRecord, CheckpointError> {
        let name_len = self.u32()? as usize;
        let name = core::str::from_utf8(self.take(name_len)?)
            .map_err(|_| CheckpointError::Malformed(String::from("record name is not UTF-8")))?
            .to_string();
        let dtype_tag = self.u8()?;
        let dtype = DType::from_tag(dtype_tag).ok_or(CheckpointError::UnknownDtype(dtype_tag))?;
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = self.take(numel * dtype.size_bytes())?.to_vec();
        Ok(ParamRecord {
            name,
            dtype,
            shape,
            payload,
        })
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.kind.tag().to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for rec in &self.params {
            write_record(&mut out, rec);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(records) => {
                out.push(1);
                out.extend_from_slice(&(records.len() as u32).to_le_bytes());
                for rec in records {
                    write_record(&mut out, rec);
                }
            }
        }
        let digest = fnv1a64(&out);
        out.extend_from_slice(&digest.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < MAGIC.len() {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 12 + 8 {
            return Err(CheckpointError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let declared = u64::from_le_bytes(tail.try_into().unwrap());
        if fnv1a64(body) != declared {
            return Err(CheckpointError::ChecksumMismatch);
        }

        let mut cur = Cursor { bytes: body, pos: 4 };
        let version = cur.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let kind_tag = cur.u32()?;
        let kind = ModelKind::from_tag(kind_tag).ok_or(CheckpointError::UnknownKind(kind_tag))?;
        let cfg_len = cur.u32()? as usize;
        let config_text = core::str::from_utf8(cur.take(cfg_len)?)
            .map_err(|_| CheckpointError::Malformed(String::from("config blob is not UTF-8")))?
            .to_string();
        let n_params = cur.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(cur.record()?);
        }
        let optimizer = match cur.u8()? {
            0 => None,
            1 => {
                let n = cur.u32()? as usize;
                let mut records = Vec::with_capacity(n);
                for _ in 0..n {
                    records.push(cur.record()?);
                }
                Some(records)
            }
            other => {
                return Err(CheckpointError::Malformed(format!(
                    "bad optimizer flag {other}"
                )))
            }
        };
        if cur.pos != body.len() {
            return Err(CheckpointError::Malformed(String::from(
                "trailing bytes after optimizer section",
            )));
        }
        Ok(Checkpoint {
            kind,
            config_text,
            params,
            optimizer,
        })
    }

    /// Snapshot a bundle (and optionally its optimizers) together with the
    /// data-stream rng state.
    pub fn from_bundle<E: Scalar>(
        bundle: &ModelBundle<E>,
        rng: &Rng,
        optimizers: Option<&[(&str, &Adam<E>)]>,
    ) -> Checkpoint {
        let mut params = Vec::new();
        bundle.visit("", &mut |name, t| {
            let mut payload = Vec::with_capacity(t.numel() * E::DTYPE.size_bytes());
            for &v in t.data() {
                v.write_le(&mut payload);
            }
            params.push(ParamRecord {
                name: String::from(name),
                dtype: E::DTYPE,
                shape: t.shape().to_vec(),
                payload,
            });
        });
        let optimizer = optimizers.map(|groups| {
            let mut records = Vec::new();
            for (group, adam) in groups {
                let mut t_payload = Vec::new();
                (adam.step_count() as f64).write_le(&mut t_payload);
                records.push(ParamRecord {
                    name: format!("{group}.t"),
                    dtype: DType::F64,
                    shape: alloc::vec![1],
                    payload: t_payload,
                });
                for (name, m, v) in adam.snapshot() {
                    for (tag, buf) in [("m", m), ("v", v)] {
                        let mut payload = Vec::with_capacity(buf.len() * E::DTYPE.size_bytes());
                        for &x in &buf {
                            x.write_le(&mut payload);
                        }
                        records.push(ParamRecord {
                            name: format!("{group}.{tag}.{name}"),
                            dtype: E::DTYPE,
                            shape: alloc::vec![buf.len()],
                            payload,
                        });
                    }
                }
            }
            records
        });
        Checkpoint {
            kind: bundle.kind(),
            config_text: compose_config_text(&bundle.cfg, rng),
            params,
            optimizer,
        }
    }

    /// Parse the embedded config and rng state.
    pub fn config(&self) -> Result<(TrainConfig, Rng), CheckpointError> {
        let mut rng_state: Option<[u64; 5]> = None;
        let mut cfg_lines = String::new();
        for line in self.config_text.lines() {
            if let Some(value) = line.strip_prefix("rng_state=") {
                let words: Vec<&str> = value.split(':').collect();
                if words.len() != 5 {
                    return Err(CheckpointError::Malformed(String::from(
                        "rng_state needs 5 words",
                    )));
                }
                let mut state = [0u64; 5];
                for (i, w) in words.iter().enumerate() {
                    state[i] = u64::from_str_radix(w, 16).map_err(|_| {
                        CheckpointError::Malformed(format!("bad rng_state word '{w}'"))
                    })?;
                }
                rng_state = Some(state);
            } else {
                cfg_lines.push_str(line);
                cfg_lines.push('\n');
            }
        }
        let cfg = TrainConfig::from_canonical_text(&cfg_lines).map_err(CheckpointError::Config)?;
        let rng = match rng_state {
            Some(s) => Rng::from_state(s),
            None => {
                return Err(CheckpointError::Malformed(String::from(
                    "missing rng_state",
                )))
            }
        };
        if cfg.kind != self.kind {
            return Err(CheckpointError::Integrity(format!(
                "config says {}, header says {}",
                cfg.kind, self.kind
            )));
        }
        Ok((cfg, rng))
    }

    /// Rebuild the architecture from the embedded config and load every
    /// parameter, validating names, dtypes and shapes in visit order.
    pub fn restore<E: Scalar>(&self) -> Result<(ModelBundle<E>, Rng), CheckpointError> {
        let (cfg, rng) = self.config()?;
        let mut bundle = ModelBundle::<E>::build(&cfg).map_err(CheckpointError::Config)?;
        let mut idx = 0usize;
        let mut problem: Option<CheckpointError> = None;
        bundle.visit_mut("", &mut |name, t| {
            if problem.is_some() {
                return;
            }
            let Some(rec) = self.params.get(idx) else {
                problem = Some(CheckpointError::Integrity(format!(
                    "missing record for parameter '{name}'"
                )));
                return;
            };
            idx += 1;
            if rec.name != name {
                problem = Some(CheckpointError::Integrity(format!(
                    "parameter order mismatch: file has '{}', model expects '{name}'",
                    rec.name
                )));
                return;
            }
            if rec.dtype != E::DTYPE {
                problem = Some(CheckpointError::Integrity(format!(
                    "parameter '{name}': dtype {} in file, {} in model",
                    rec.dtype,
                    E::DTYPE
                )));
                return;
            }
            if rec.shape != t.shape() {
                problem = Some(CheckpointError::Integrity(format!(
                    "parameter '{name}': shape {:?} in file, {:?} in model",
                    rec.shape,
                    t.shape()
                )));
                return;
            }
            let width = E::DTYPE.size_bytes();
            for (dst, chunk) in t.data_mut().iter_mut().zip(rec.payload.chunks_exact(width)) {
                *dst = E::read_le(chunk);
            }
        });
        if let Some(e) = problem {
            return Err(e);
        }
        if idx != self.params.len() {
            return Err(CheckpointError::Integrity(format!(
                "{} extra parameter record(s) in file",
                self.params.len() - idx
            )));
        }
        Ok((bundle, rng))
    }

    /// As [`Checkpoint::restore`], refusing a mismatched model kind.
    pub fn restore_expecting<E: Scalar>(
        &self,
        expected: ModelKind,
    ) -> Result<(ModelBundle<E>, Rng), CheckpointError> {
        if self.kind != expected {
            return Err(CheckpointError::KindMismatch {
                expected,
                found: self.kind,
            });
        }
        self.restore()
    }
}

/// Canonical config text plus the rng state, all keys sorted.
fn compose_config_text(cfg: &TrainConfig, rng: &Rng) -> String {
    let state = rng.state();
    let rng_line = format!(
        "{RNG_KEY}={:x}:{:x}:{:x}:{:x}:{:x}",
        state[0], state[1], state[2], state[3], state[4]
    );
    let mut lines: Vec<String> = cfg.canonical_text().lines().map(String::from).collect();
    lines.push(rng_line);
    lines.sort();
    let mut out = lines.join("\n");
    out.push('\n');
    out
}
