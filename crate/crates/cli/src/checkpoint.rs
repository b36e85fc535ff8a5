//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        b"HKGE"
//! version      u32
//! model block  u32 length + UTF-8 `key = value` lines
//! vocabulary   u32 original relation count,
//!              u32 entity count + names, u32 relation count + names
//!              (each name is u32 length + UTF-8)
//! tensors      u32 count, then per tensor:
//!              u32 name length + name, u32 ndim, u64 dims[ndim],
//!              f64 values[prod(dims)]
//! optimizer    u8 present; if 1: u64 step, then a tensor list as above
//!              holding `adam.m.<name>` and `adam.v.<name>`
//! checksum     SHA-256 of every preceding byte
//! ```

use std::path::Path;

use hyperkg::data::Vocabulary;
use hyperkg::model::{ModelConfig, ModelParams, TRAINABLE};
use hyperkg::train::Adam;
use sha2::{Digest, Sha256};

use crate::config::{model_from_text, model_to_text};

pub const MAGIC: &[u8; 4] = b"HKGE";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch")]
    Checksum,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("model block: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A trained model with the vocabulary it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub original_relations: usize,
    pub params: ModelParams,
    pub optimizer: Option<Adam>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0
            .extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, shape: (usize, usize), data: &[f64]) {
        self.str(name);
        self.u32(2);
        self.u64(shape.0 as u64);
        self.u64(shape.1 as u64);
        for x in data {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))
    }
    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>), CheckpointError> {
        let name = self.str()?;
        let ndim = self.u32()?;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(usize::try_from(self.u64()?).map_err(|_| CheckpointError::Truncated)?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or(CheckpointError::Truncated)?;
        let bytes = self.take(count.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, dims, data))
    }
}

fn flat_shape(dims: &[usize]) -> (usize, usize) {
    match dims {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        _ => (usize::MAX, usize::MAX),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.str(&model_to_text(&self.model));
        w.u32(self.original_relations);
        for names in [self.vocab.entity_names(), self.vocab.relation_names()] {
            w.u32(names.len());
            for n in names {
                w.str(n);
            }
        }
        let tensors = self.params.tensors();
        w.u32(tensors.len());
        for (name, shape, data) in tensors {
            w.tensor(name, shape, data);
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(adam) => {
                w.u8(1);
                w.u64(adam.step);
                w.u32(2 * TRAINABLE.len());
                for (prefix, moments) in [
                    ("adam.m.", &adam.first_moment),
                    ("adam.v.", &adam.second_moment),
                ] {
                    for (name, m) in TRAINABLE.iter().zip(moments) {
                        w.tensor(&format!("{prefix}{name}"), (1, m.len()), m);
                    }
                }
            }
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 4 + 4 + 32 {
            return Err(CheckpointError::Truncated);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let model = model_from_text(&r.str()?)?;
        let original_relations = r.u32()?;
        let mut names = Vec::new();
        for _ in 0..2 {
            let n = r.u32()?;
            let mut v = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                v.push(r.str()?);
            }
            names.push(v);
        }
        let relations = names.pop().unwrap();
        let entities = names.pop().unwrap();
        let vocab = Vocabulary::from_names(entities, relations);
        let mut params = ModelParams::zeros(&model, vocab.num_entities(), vocab.num_relations());
        let expected: Vec<(&str, (usize, usize))> =
            params.tensors().iter().map(|(n, s, _)| (*n, *s)).collect();
        let count = r.u32()?;
        if count != expected.len() {
            return Err(CheckpointError::Malformed(format!(
                "{count} tensors, expected {}",
                expected.len()
            )));
        }
        for (want_name, want_shape) in expected {
            let (name, dims, data) = r.tensor()?;
            if name != want_name || flat_shape(&dims) != want_shape {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {name} {dims:?}, expected {want_name} {want_shape:?}"
                )));
            }
            params
                .tensor_mut(&name)
                .expect("known tensor")
                .copy_from_slice(&data);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut adam = Adam::for_params(&params);
                adam.step = step;
                if r.u32()? != 2 * TRAINABLE.len() {
                    return Err(CheckpointError::Malformed("optimizer tensor count".into()));
                }
                for (prefix, slot) in [("adam.m.", 0), ("adam.v.", 1)] {
                    for (i, name) in TRAINABLE.iter().enumerate() {
                        let (got, dims, data) = r.tensor()?;
                        let target = if slot == 0 {
                            &mut adam.first_moment[i]
                        } else {
                            &mut adam.second_moment[i]
                        };
                        if got != format!("{prefix}{name}")
                            || flat_shape(&dims) != (1, target.len())
                        {
                            return Err(CheckpointError::Malformed(format!(
                                "optimizer tensor {got}"
                            )));
                        }
                        target.copy_from_slice(&data);
                    }
                }
                Some(adam)
            }
            f => return Err(CheckpointError::Malformed(format!("optimizer flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Checkpoint {
            model,
            vocab,
            original_relations,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes)
    }
}
