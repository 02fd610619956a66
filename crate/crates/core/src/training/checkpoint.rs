//! Versioned binary checkpoints. Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0     8  magic "DEEPCARE"
//!      8     4  u32 format version
//!     12    20  u32 × 5: n_diagnoses, n_interventions, M, K, D
//!     32     4  u32 tensor count
//!     36     8  u64 JSON header length H
//!     44     H  JSON header: model config, training config, vocabulary,
//!               training state
//!      …        tensor table, per tensor: u16 name length, name bytes,
//!               u32 rows, u32 cols
//!      …        tensor data in table order, row-major f64
//!      …     8  u64 FNV-1a checksum of every preceding byte
//! ```
//!
//! Loading recomputes the expected tensor table from the model config and
//! refuses any file whose table, dimensions or checksum disagree.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LrSchedule, TrainConfig};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::network::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DEEPCARE";
pub const CHECKPOINT_VERSION: u32 = 1;
const FIXED_HEADER: usize = 44;

/// Where a training run stood when the checkpoint was written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub schedule: LrSchedule,
    pub rng: Rng,
    #[serde(with = "extended_f64")]
    pub best_valid_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocabulary: Vocabulary,
    pub train: Option<TrainConfig>,
    pub state: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    vocabulary: Vocabulary,
    train: Option<TrainConfig>,
    state: Option<TrainState>,
}

/// JSON numbers cannot carry infinities or NaN; those become strings.
pub(crate) mod extended_f64 {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            v if v.is_finite() => s.serialize_f64(v),
            v if v.is_nan() => s.serialize_str("nan"),
            v if v > 0.0 => s.serialize_str("inf"),
            _ => s.serialize_str("-inf"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "nan" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(D::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

fn dim(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Shape(format!("{what} {v} does not fit the checkpoint format")))
}

impl Checkpoint {
    pub fn new(model: Model, vocabulary: Vocabulary) -> Self {
        Self { model, vocabulary, train: None, state: None }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.model.validate()?;
        let cfg = &self.model.config;
        let header = Header {
            model: cfg.clone(),
            vocabulary: self.vocabulary.clone(),
            train: self.train.clone(),
            state: self.state.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
        let tensors = self.model.params.tensors();
        let mut out = Vec::with_capacity(FIXED_HEADER + json.len() + 8 * self.model.params.n_scalars() + 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (v, what) in [
            (cfg.n_diagnoses, "n_diagnoses"),
            (cfg.n_interventions, "n_interventions"),
            (cfg.embed_dim, "embed_dim"),
            (cfg.hidden_dim, "hidden_dim"),
            (cfg.head_dim, "head_dim"),
            (tensors.len(), "tensor count"),
        ] {
            out.extend_from_slice(&dim(v, what)?.to_le_bytes());
        }
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&dim(t.rows, "rows")?.to_le_bytes());
            out.extend_from_slice(&dim(t.cols, "cols")?.to_le_bytes());
        }
        for t in &tensors {
            for v in t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    /// Parses a checkpoint; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |m: String| Error::Checkpoint { path: origin.to_path_buf(), message: m };
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8).ok_or_else(|| fail("truncated before the magic bytes".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(fail("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32().ok_or_else(|| fail("truncated in the fixed header".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!("format version {version} is not supported (expected {CHECKPOINT_VERSION})")));
        }
        if bytes.len() < FIXED_HEADER + 8 {
            return Err(fail(format!("truncated: {} bytes is shorter than the fixed header", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8-byte tail"));
        let mut fixed = [0u32; 6];
        for v in &mut fixed {
            *v = r.u32().ok_or_else(|| fail("truncated in the fixed header".into()))?;
        }
        let json_len = r.u64().ok_or_else(|| fail("truncated in the fixed header".into()))? as usize;
        let json = r
            .take(json_len)
            .filter(|_| r.pos <= body.len())
            .ok_or_else(|| fail(format!("truncated: JSON header of {json_len} bytes goes past the end")))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| fail(format!("malformed JSON header: {e}")))?;
        let cfg = header.model;
        let want = [cfg.n_diagnoses, cfg.n_interventions, cfg.embed_dim, cfg.hidden_dim, cfg.head_dim];
        if fixed[..5].iter().zip(want).any(|(&a, b)| a as usize != b) {
            return Err(fail(format!(
                "fixed header dimensions {:?} disagree with the model config {want:?}",
                &fixed[..5]
            )));
        }
        let mut model = Model::zeros(cfg).map_err(|e| fail(format!("model config: {e}")))?;
        let n_tensors = model.params.tensors().len();
        if fixed[5] as usize != n_tensors {
            return Err(fail(format!("file has {} tensors, the model config implies {n_tensors}", fixed[5])));
        }
        let truncated = || fail("truncated in the tensor table".into());
        for t in model.params.tensors() {
            let len = r.u16().ok_or_else(truncated)? as usize;
            let name = r.take(len).ok_or_else(truncated)?;
            let (rows, cols) = (r.u32().ok_or_else(truncated)?, r.u32().ok_or_else(truncated)?);
            if name != t.name.as_bytes() || rows as usize != t.rows || cols as usize != t.cols {
                return Err(fail(format!(
                    "tensor {} {rows}x{cols} where the model config expects {} {}x{}",
                    String::from_utf8_lossy(name),
                    t.name,
                    t.rows,
                    t.cols
                )));
            }
        }
        let need = 8 * model.params.n_scalars();
        if body.len() != r.pos + need {
            return Err(fail(format!(
                "truncated or padded: {} data bytes where {need} are expected",
                body.len().saturating_sub(r.pos)
            )));
        }
        if fnv1a(body) != stored {
            return Err(fail("checksum mismatch; the file is corrupt".into()));
        }
        for t in model.params.tensors_mut() {
            for v in t.data.iter_mut() {
                *v = f64::from_le_bytes(r.take(8).expect("length checked").try_into().expect("8 bytes"));
            }
        }
        let vocabulary = header.vocabulary.reindex().map_err(|e| fail(format!("vocabulary: {e}")))?;
        if vocabulary.n_diagnoses() != model.config.n_diagnoses
            || vocabulary.n_interventions() != model.config.n_interventions
        {
            return Err(fail("vocabulary size disagrees with the model config".into()));
        }
        Ok(Self { model, vocabulary, train: header.train, state: header.state })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
