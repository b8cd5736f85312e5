//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//! magic `CLQYCKPT`, `u32` format version, `u64` step, length-prefixed
//! config JSON, length-prefixed vocabulary text, `u32` tensor count and the
//! named tensors, then a `u8` flag followed by the optimizer section when
//! present. A tensor is a length-prefixed name, a `u32` rank, `u64` dims and
//! the `f64` values.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::{ModelParameters, Transformer, TransformerConfig};

const MAGIC: &[u8; 8] = b"CLQYCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Optimizer and bookkeeping state needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    /// JSON settings of the run, opaque to the container.
    pub settings: String,
    pub seed: u64,
    pub best_val_loss: Option<f64>,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TransformerConfig,
    pub vocab: Vocabulary,
    pub params: ModelParameters,
    pub step: u64,
    pub trainer: Option<TrainerState>,
}

/// Header fields, for listing checkpoints without the tensors.
#[derive(Clone, Debug, Serialize)]
pub struct CheckpointSummary {
    pub step: u64,
    pub config: TransformerConfig,
    pub vocab_size: usize,
    pub parameters: usize,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.bytes(name.as_bytes());
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("bad length {n}")))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.checked_mul(8)
            .is_none_or(|b| b > self.buf.len() - self.pos)
        {
            return Err(Error::Format(format!(
                "tensor {name} {shape:?} exceeds the file"
            )));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok((name, Tensor::new(shape, data)?))
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

impl Checkpoint {
    pub fn from_model(model: &Transformer, vocab: &Vocabulary, step: u64) -> Self {
        Self {
            config: model.config().clone(),
            vocab: vocab.clone(),
            params: model.params().clone(),
            step,
            trainer: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u64(self.step);
        w.bytes(
            serde_json::to_string(&self.config)
                .map_err(json_err)?
                .as_bytes(),
        );
        w.bytes(self.vocab.to_text().as_bytes());
        w.u32(self.params.len() as u32);
        for (name, t) in self.params.iter() {
            w.tensor(name, t);
        }
        match &self.trainer {
            None => w.0.push(0),
            Some(s) => {
                w.0.push(1);
                w.bytes(s.settings.as_bytes());
                w.u64(s.seed);
                match s.best_val_loss {
                    Some(v) => {
                        w.0.push(1);
                        w.f64(v);
                    }
                    None => w.0.push(0),
                }
                w.u32(s.first_moment.len() as u32);
                for (m, v) in s.first_moment.iter().zip(&s.second_moment) {
                    w.tensor("m", m);
                    w.tensor("v", v);
                }
            }
        }
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let step = r.u64()?;
        let config: TransformerConfig = serde_json::from_str(&r.string()?).map_err(json_err)?;
        let vocab = Vocabulary::from_text(&r.string()?)?;
        let count = r.u32()? as usize;
        let entries = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let params = ModelParameters::from_entries(entries)?;
        params.check_layout(&config)?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Format(format!(
                "vocabulary of {} tokens for a model of {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let trainer = match r.u8()? {
            0 => None,
            1 => {
                let settings = r.string()?;
                let seed = r.u64()?;
                let best_val_loss = match r.u8()? {
                    0 => None,
                    _ => Some(r.f64()?),
                };
                let n = r.u32()? as usize;
                let (mut first_moment, mut second_moment) =
                    (Vec::with_capacity(n), Vec::with_capacity(n));
                for _ in 0..n {
                    first_moment.push(r.tensor()?.1);
                    second_moment.push(r.tensor()?.1);
                }
                Some(TrainerState {
                    settings,
                    seed,
                    best_val_loss,
                    first_moment,
                    second_moment,
                })
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config,
            vocab,
            params,
            step,
            trainer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn model(&self) -> Result<Transformer> {
        Transformer::new(self.config.clone(), self.params.clone())
    }

    pub fn summary(&self) -> CheckpointSummary {
        CheckpointSummary {
            step: self.step,
            config: self.config.clone(),
            vocab_size: self.vocab.len(),
            parameters: self.params.count(),
        }
    }
}
