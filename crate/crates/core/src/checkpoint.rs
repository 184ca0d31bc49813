//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic, format version (u32), payload length (u64),
//! payload, SHA-256 of everything before it. The payload holds the config
//! digest and text, the training position, named parameter tensors, optimizer
//! moments and the RNG state.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::OcrModel;
use crate::numerics::{ParamGroup, ParamStore, Tensor};
use crate::training::{AdamW, TrainState};

pub const MAGIC: &[u8; 8] = b"CFLOWCKP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub config_digest: String,
    pub decoder_layers: usize,
    pub params: ParamStore<f32>,
    pub state: TrainState<f32>,
}

impl Checkpoint {
    pub fn capture(cfg: &RunConfig, model: &OcrModel<f32>, state: &TrainState<f32>) -> Self {
        Checkpoint {
            config_text: cfg.canonical_toml(),
            config_digest: cfg.digest(),
            decoder_layers: model.decoder_layers(),
            params: model.store.clone(),
            state: state.clone(),
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.config_text)
    }

    /// Rebuilds the model architecture from the stored config and loads the parameters.
    pub fn restore_model(&self) -> Result<OcrModel<f32>> {
        let cfg = self.config()?;
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let mut model = OcrModel::<f32>::new(cfg.model, self.decoder_layers, &mut scratch)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Integrity(format!(
                "checkpoint holds {} parameters, architecture has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (dst, src) in model.store.iter_mut().zip(self.params.iter()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() || dst.group != src.group {
                return Err(Error::Integrity(format!(
                    "parameter `{}` does not match architecture entry `{}`",
                    src.name, dst.name
                )));
            }
            dst.value = src.value.clone();
            dst.trainable = src.trainable;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Vec::new();
        put_str(&mut p, &self.config_digest);
        put_str(&mut p, &self.config_text);
        p.push(self.state.stage);
        put_u64(&mut p, self.state.step as u64);
        put_u64(&mut p, self.decoder_layers as u64);

        put_u64(&mut p, self.params.len() as u64);
        for param in self.params.iter() {
            put_str(&mut p, &param.name);
            p.push(param.group.code());
            p.push(u8::from(param.trainable));
            put_u64(&mut p, param.value.shape().len() as u64);
            for &e in param.value.shape() {
                put_u64(&mut p, e as u64);
            }
            put_f32s(&mut p, param.value.data());
        }

        let opt = &self.state.optimizer;
        for v in [opt.beta1, opt.beta2, opt.eps, opt.weight_decay] {
            p.extend_from_slice(&v.to_le_bytes());
        }
        put_u64(&mut p, opt.t);
        put_u64(&mut p, opt.m.len() as u64);
        for (m, v) in opt.m.iter().zip(&opt.v) {
            put_u64(&mut p, m.len() as u64);
            put_f32s(&mut p, m);
            put_f32s(&mut p, v);
        }

        let rng = &self.state.rng;
        p.extend_from_slice(&rng.get_seed());
        put_u64(&mut p, rng.get_stream());
        p.extend_from_slice(&rng.get_word_pos().to_le_bytes());

        let mut out = Vec::with_capacity(HEADER_LEN + p.len() + CHECKSUM_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u64(&mut out, p.len() as u64);
        out.extend_from_slice(&p);
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + CHECKSUM_LEN || &bytes[..8] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        if bytes.len() != HEADER_LEN + len + CHECKSUM_LEN {
            return Err(Error::Integrity(format!(
                "file is {} bytes, header announces {}",
                bytes.len(),
                HEADER_LEN + len + CHECKSUM_LEN
            )));
        }
        let (body, sum) = bytes.split_at(HEADER_LEN + len);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let mut r = Reader {
            buf: &body[HEADER_LEN..],
            pos: 0,
        };
        let config_digest = r.string()?;
        let config_text = r.string()?;
        let stage = r.u8()?;
        let step = r.u64()? as usize;
        let decoder_layers = r.u64()? as usize;

        let n = r.u64()? as usize;
        let mut params = ParamStore::new();
        let mut trainable = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let group = ParamGroup::from_code(r.u8()?)
                .ok_or_else(|| Error::Integrity("unknown parameter group".into()))?;
            trainable.push(r.u8()? == 1);
            let ndim = r.u64()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let data = r.f32s(numel)?;
            let value = Tensor::new(shape, data).map_err(|e| Error::Integrity(e.to_string()))?;
            params
                .insert(&name, group, value)
                .map_err(|e| Error::Integrity(e.to_string()))?;
        }
        for (p, t) in params.iter_mut().zip(trainable) {
            p.trainable = t;
        }

        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let weight_decay = r.f64()?;
        let t = r.u64()?;
        let k = r.u64()? as usize;
        let (mut m, mut v) = (Vec::with_capacity(k), Vec::with_capacity(k));
        for _ in 0..k {
            let len = r.u64()? as usize;
            m.push(r.f32s(len)?);
            v.push(r.f32s(len)?);
        }

        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        if r.pos != r.buf.len() {
            return Err(Error::Integrity("trailing bytes in payload".into()));
        }

        Ok(Checkpoint {
            config_text,
            config_digest,
            decoder_layers,
            params,
            state: TrainState {
                stage,
                step,
                rng,
                optimizer: AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    t,
                    m,
                    v,
                },
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity("payload ends early".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Integrity("invalid utf-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Integrity("bad length".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
