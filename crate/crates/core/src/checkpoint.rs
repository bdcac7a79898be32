//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes          | content                                  |
//! |----------------|------------------------------------------|
//! | 8              | magic `METAFITC`                         |
//! | 4              | `u32` format version                     |
//! | 8              | `u64` header length `h`                  |
//! | `h`            | UTF-8 JSON header                        |
//! | rest           | `f64` little-endian payload              |
//!
//! The header names the architecture, the optimizer and rng state, and lists
//! every tensor with its shape, element offset and element count in the
//! payload. Model tensors are named `param/<name>`, Adam moments
//! `adam_m/<name>` and `adam_v/<name>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::nn::ArchSpec;
use crate::optim::{OptimizerKind, OptimizerState};
use crate::params::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"METAFITC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model, optimizer state and the position of the training rng.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    pub params: ParamSet,
    pub optimizer: Option<OptimizerState>,
    /// Master seed of the run.
    pub seed: u64,
    /// Number of completed iterations; the next one draws stream `iteration`.
    pub iteration: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    kind: OptimizerKind,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct RngHeader {
    seed: u64,
    iteration: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchSpec,
    dtype: String,
    optimizer: Option<OptimizerHeader>,
    rng: RngHeader,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.arch == other.arch
            && self.seed == other.seed
            && self.iteration == other.iteration
            && self.params.bit_eq(&other.params)
            && match (&self.optimizer, &other.optimizer) {
                (None, None) => true,
                (Some(a), Some(b)) => a.bit_eq(b),
                _ => false,
            }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |prefix: &str, set: &ParamSet| {
            for (name, a) in set.iter() {
                tensors.push(TensorEntry {
                    name: format!("{prefix}/{name}"),
                    shape: a.shape().to_vec(),
                    offset: payload.len(),
                    count: a.numel(),
                });
                payload.extend_from_slice(a.data());
            }
        };
        push("param", &self.params);
        if let Some(opt) = &self.optimizer {
            push("adam_m", &opt.m);
            push("adam_v", &opt.v);
        }
        let header = Header {
            arch: self.arch.clone(),
            dtype: "f64le".into(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                kind: o.kind,
                step: o.step,
            }),
            rng: RngHeader {
                seed: self.seed,
                iteration: self.iteration,
            },
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let fail = |d: String| Error::format(path, d);
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!(
                "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(fail("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| fail(format!("header: {e}")))?;
        if header.dtype != "f64le" {
            return Err(fail(format!("unsupported dtype `{}`", header.dtype)));
        }
        let raw = &body[hlen..];
        if !raw.len().is_multiple_of(8) {
            return Err(fail("payload is not a whole number of f64 values".into()));
        }
        let payload: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (mut params, mut m, mut v) = (ParamSet::new(), ParamSet::new(), ParamSet::new());
        for t in &header.tensors {
            let end = t.offset.checked_add(t.count).filter(|&e| e <= payload.len());
            let Some(end) = end else {
                return Err(fail(format!("tensor `{}` runs past the payload", t.name)));
            };
            let a = Array::new(t.shape.clone(), payload[t.offset..end].to_vec())
                .map_err(|e| fail(format!("tensor `{}`: {e}", t.name)))?;
            let (set, name) = match t.name.split_once('/') {
                Some(("param", n)) => (&mut params, n),
                Some(("adam_m", n)) => (&mut m, n),
                Some(("adam_v", n)) => (&mut v, n),
                _ => return Err(fail(format!("unknown tensor group in `{}`", t.name))),
            };
            set.insert(name, a);
        }
        let optimizer = header.optimizer.map(|o| OptimizerState {
            kind: o.kind,
            step: o.step,
            m,
            v,
        });
        Ok(Checkpoint {
            arch: header.arch,
            params,
            optimizer,
            seed: header.rng.seed,
            iteration: header.rng.iteration,
        })
    }

    /// Writes to a temporary sibling and renames it into place, so a reader
    /// never sees a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
