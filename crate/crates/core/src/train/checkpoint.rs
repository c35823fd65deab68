//! Binary checkpoint format.
//!
//! Layout (little-endian): `"PSNL"`, `u32` version, `u32`-length model
//! config record, then the parameter, EMA and optimizer sections, the
//! global step, the training RNG state and a trailing CRC32 of every
//! preceding byte. Each tensor is `u32` name length, name, `u8` dtype,
//! `u32` rank, `u32` extents, raw values.

use std::fs;
use std::io;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ModelParams, NamedTensor};
use crate::tensor::{DType, Real, Tensor};

use super::adam::{AdamConfig, AdamState};
use super::ema::EmaState;

pub const MAGIC: &[u8; 4] = b"PSNL";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint holds {found:?} values, expected {expected:?}")]
    DType { found: DType, expected: DType },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Position of the training RNG stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pub ema: EmaState<T>,
    pub optimizer: AdamState<T>,
    pub step: u64,
    pub rng: RngState,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }

    fn tensor<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        self.bytes(name.as_bytes());
        self.buf.push(T::DTYPE.code());
        self.u32(t.rank() as u32);
        for &e in t.shape() {
            self.u32(e as u32);
        }
        for &v in t.values() {
            v.write_le(&mut self.buf);
        }
    }

    fn section<T: Real>(&mut self, names: &ModelParams<T>, tensors: &[&Tensor<T>]) {
        self.u32(tensors.len() as u32);
        for (n, t) in names.tensors.iter().zip(tensors) {
            self.tensor(&n.name, t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Corrupt("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("non-utf8 text".into()))
    }

    fn tensor<T: Real>(&mut self) -> Result<NamedTensor<T>, CheckpointError> {
        let name = self.string()?;
        let code = self.take(1)?[0];
        let dtype = DType::from_code(code)
            .ok_or_else(|| CheckpointError::Corrupt(format!("dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(CheckpointError::DType {
                found: dtype,
                expected: T::DTYPE,
            });
        }
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let raw = self.take(
            len.checked_mul(dtype.size())
                .ok_or_else(|| CheckpointError::Corrupt("tensor size".into()))?,
        )?;
        let values = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        let tensor =
            Tensor::new(shape, values).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        Ok(NamedTensor { name, tensor })
    }

    fn section<T: Real>(&mut self, cfg: &ModelConfig) -> Result<ModelParams<T>, CheckpointError> {
        let n = self.u32()? as usize;
        let tensors = (0..n)
            .map(|_| self.tensor())
            .collect::<Result<Vec<_>, _>>()?;
        let params = ModelParams { tensors };
        params.check(cfg)?;
        Ok(params)
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode<T: Real>(ck: &Checkpoint<T>) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.bytes(ck.config.to_record().as_bytes());

    let params: Vec<&Tensor<T>> = ck.params.tensors.iter().map(|t| &t.tensor).collect();
    w.section(&ck.params, &params);

    w.f64(ck.ema.decay);
    let shadow: Vec<&Tensor<T>> = ck.ema.shadow.tensors.iter().map(|t| &t.tensor).collect();
    w.section(&ck.params, &shadow);

    let opt = &ck.optimizer;
    w.u64(opt.step);
    for v in [
        opt.lr,
        opt.config.lr,
        opt.config.beta1,
        opt.config.beta2,
        opt.config.eps,
        opt.config.lr_decay,
    ] {
        w.f64(v);
    }
    let m: Vec<&Tensor<T>> = opt.m.iter().collect();
    let v: Vec<&Tensor<T>> = opt.v.iter().collect();
    w.section(&ck.params, &m);
    w.section(&ck.params, &v);

    w.u64(ck.step);
    w.buf.extend_from_slice(&ck.rng.seed);
    w.u64(ck.rng.stream);
    w.buf.extend_from_slice(&ck.rng.word_pos.to_le_bytes());

    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

/// Checks magic, version and checksum, returning the body without the CRC.
fn verified_body(bytes: &[u8]) -> Result<&[u8], CheckpointError> {
    if bytes.len() < 4 {
        return Err(if MAGIC.starts_with(bytes) {
            CheckpointError::Corrupt("truncated header".into())
        } else {
            CheckpointError::BadMagic
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(CheckpointError::Corrupt("truncated header".into()));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found,
            expected: VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Corrupt("truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(CheckpointError::Corrupt("checksum mismatch".into()));
    }
    Ok(body)
}

/// Reads only the model config, e.g. to pick the value type before decoding.
pub fn peek_config(bytes: &[u8]) -> Result<ModelConfig, CheckpointError> {
    let body = verified_body(bytes)?;
    let mut r = Reader { buf: body, pos: 8 };
    Ok(ModelConfig::from_record(&r.string()?)?)
}

/// Parses bytes produced by [`encode`].
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    let body = verified_body(bytes)?;
    let mut r = Reader { buf: body, pos: 8 };
    let config = ModelConfig::from_record(&r.string()?)?;
    if config.precision.dtype() != T::DTYPE {
        return Err(CheckpointError::DType {
            found: config.precision.dtype(),
            expected: T::DTYPE,
        });
    }
    let params = r.section(&config)?;
    let decay = r.f64()?;
    let shadow = r.section(&config)?;
    let opt_step = r.u64()?;
    let lr = r.f64()?;
    let config_adam = AdamConfig {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
        lr_decay: r.f64()?,
    };
    let m: ModelParams<T> = r.section(&config)?;
    let v: ModelParams<T> = r.section(&config)?;
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(Checkpoint {
        config,
        params,
        ema: EmaState { decay, shadow },
        optimizer: AdamState {
            config: config_adam,
            lr,
            step: opt_step,
            m: m.tensors.into_iter().map(|t| t.tensor).collect(),
            v: v.tensors.into_iter().map(|t| t.tensor).collect(),
        },
        step,
        rng: RngState {
            seed,
            stream,
            word_pos,
        },
    })
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint<T: Real>(path: &Path, ck: &Checkpoint<T>) -> Result<(), CheckpointError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, encode(ck))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    decode(&fs::read(path)?)
}
