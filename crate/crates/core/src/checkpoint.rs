//! Versioned binary checkpoint format.
//!
//! ```text
//! "3TFCKPT" | version u32
//! config: vocab_size, context_len, d_model, n_heads, n_layers, seed (u64 each)
//! n_params u32, then per parameter:
//!     name_len u32 | name utf-8 | rank u32 | dims u64 * rank | f32 * numel
//! optimizer flag u8, when 1:
//!     step u64 | lr, beta1, beta2, eps, weight_decay f64
//!     per parameter (same order): m f32 * numel | v f32 * numel
//! rng flag u8, when 1:
//!     seed [u8; 32] | stream u64 | word_pos u128
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{self, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tft_tensor::{AdamWConfig, AdamWState, Tensor};

use crate::model::{ModelConfig, ModelError, TransformerModel};

pub const MAGIC: &[u8; 7] = b"3TFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Snapshot of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TransformerModel,
    pub optimizer: Option<AdamWState>,
    pub rng: Option<RngState>,
}

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f32s(w: &mut impl Write, xs: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => CheckpointError::Corrupt("truncated".into()),
            _ => CheckpointError::Io(e),
        })?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Corrupt("size overflow".into()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let mut buf = vec![0u8; n * 4];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| CheckpointError::Corrupt("truncated tensor payload".into()))?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        put_u32(w, FORMAT_VERSION)?;
        let c = self.model.config();
        for v in [c.vocab_size, c.context_len, c.d_model, c.n_heads, c.n_layers] {
            put_u64(w, v as u64)?;
        }
        put_u64(w, c.seed)?;
        let params = self.model.params();
        put_u32(w, params.len() as u32)?;
        for (name, t) in self.model.names().iter().zip(params) {
            put_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            put_u32(w, t.rank() as u32)?;
            for &d in t.shape() {
                put_u64(w, d as u64)?;
            }
            put_f32s(w, t.data())?;
        }
        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(s) => {
                w.write_all(&[1])?;
                put_u64(w, s.step)?;
                let h = s.config;
                for v in [h.lr, h.beta1, h.beta2, h.eps, h.weight_decay] {
                    w.write_all(&v.to_le_bytes())?;
                }
                for (m, v) in s.m.iter().zip(&s.v) {
                    put_f32s(w, m)?;
                    put_f32s(w, v)?;
                }
            }
        }
        match &self.rng {
            None => w.write_all(&[0])?,
            Some(r) => {
                w.write_all(&[1])?;
                w.write_all(&r.seed)?;
                put_u64(w, r.stream)?;
                w.write_all(&r.word_pos.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from(r: impl Read) -> Result<Self, CheckpointError> {
        let mut r = Reader { inner: r };
        if &r.bytes::<7>()? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config = ModelConfig {
            vocab_size: r.usize()?,
            context_len: r.usize()?,
            d_model: r.usize()?,
            n_heads: r.usize()?,
            n_layers: r.usize()?,
            seed: r.u64()?,
        };
        config.validate()?;
        let n = r.u32()? as usize;
        let mut named = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let mut name = vec![0u8; len];
            r.inner
                .read_exact(&mut name)
                .map_err(|_| CheckpointError::Corrupt("truncated name".into()))?;
            let name = String::from_utf8(name)
                .map_err(|_| CheckpointError::Corrupt("parameter name is not utf-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.usize()?);
            }
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let numel = numel.ok_or_else(|| CheckpointError::Corrupt("shape overflow".into()))?;
            let data = r.f32s(numel)?;
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            named.push((name, t));
        }
        let model = TransformerModel::from_parts(config, named)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let config = AdamWConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                    weight_decay: r.f64()?,
                };
                let mut m = Vec::new();
                let mut v = Vec::new();
                for p in model.params() {
                    m.push(r.f32s(p.len())?);
                    v.push(r.f32s(p.len())?);
                }
                Some(AdamWState { step, m, v, config })
            }
            f => return Err(CheckpointError::Corrupt(format!("bad optimizer flag {f}"))),
        };
        let rng = match r.u8()? {
            0 => None,
            1 => Some(RngState {
                seed: r.bytes()?,
                stream: r.u64()?,
                word_pos: u128::from_le_bytes(r.bytes()?),
            }),
            f => return Err(CheckpointError::Corrupt(format!("bad rng flag {f}"))),
        };
        let mut trailing = [0u8; 1];
        if r.inner.read(&mut trailing)? != 0 {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            model,
            optimizer,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}
