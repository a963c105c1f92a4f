//! Binary checkpoint files. Layout, little-endian:
//!
//! | field | bytes |
//! |-------|-------|
//! | magic `VGCK` | 4 |
//! | version | 1 |
//! | codec config text length, text | 4 + n |
//! | config hash | 8 |
//! | train config text length, text | 4 + n |
//! | epoch, step, Adam step count | 8 + 8 + 8 |
//! | tensor count | 4 |
//! | per tensor: length, f64 values (parameters, then Adam m, then Adam v) | 4 + 8n |
//! | CRC-32 of all preceding bytes | 4 |

use std::path::Path;

use super::{Adam, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::network::{CodecConfig, CodecModel};

pub const MAGIC: [u8; 4] = *b"VGCK";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub codec: CodecConfig,
    pub train: TrainConfig,
    pub epoch: u64,
    pub step: u64,
    pub params: Vec<Vec<f64>>,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            codec: t.model.config.clone(),
            train: t.config.clone(),
            epoch: t.epoch,
            step: t.step,
            params: t.model.params().iter().map(|p| p.data().to_vec()).collect(),
            optimizer: t.optimizer.clone(),
        }
    }

    /// Rebuilds the model with the stored weights.
    pub fn model(&self) -> Result<CodecModel> {
        let mut model = CodecModel::new(self.codec.clone(), 0)?;
        let mut params = model.params_mut();
        if params.len() != self.params.len() {
            return Err(Error::corrupt(0, "parameter count does not match the architecture"));
        }
        for (p, stored) in params.iter_mut().zip(&self.params) {
            if p.len() != stored.len() {
                return Err(Error::corrupt(0, "parameter shape does not match the architecture"));
            }
            p.data_mut().copy_from_slice(stored);
        }
        drop(params);
        if !model.constraints_hold() {
            return Err(Error::Constraint(
                "checkpoint violates GDN parameter constraints".into(),
            ));
        }
        Ok(model)
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        let model = self.model()?;
        Ok(Trainer {
            model,
            optimizer: self.optimizer,
            config: self.train,
            epoch: self.epoch,
            step: self.step,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        let text = self.codec.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.codec.hash().to_le_bytes());
        let train = self.train.to_text();
        out.extend_from_slice(&(train.len() as u32).to_le_bytes());
        out.extend_from_slice(train.as_bytes());
        for v in [self.epoch, self.step, self.optimizer.t] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let tensors: Vec<&Vec<f64>> = self
            .params
            .iter()
            .chain(&self.optimizer.m)
            .chain(&self.optimizer.v)
            .collect();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.len() < 4 || data[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let body_len = data
            .len()
            .checked_sub(4)
            .ok_or(Error::Truncated { offset: data.len() })?;
        let stored = u32::from_le_bytes(data[body_len..].try_into().expect("4 bytes"));
        if crc32fast::hash(&data[..body_len]) != stored {
            return Err(Error::Checksum {
                section: "checkpoint".into(),
                offset: body_len,
            });
        }
        let mut r = Reader {
            data: &data[..body_len],
            pos: 4,
        };
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version as u32));
        }
        let codec = CodecConfig::from_text(r.text()?)?;
        let hash = r.u64()?;
        if hash != codec.hash() {
            return Err(Error::ConfigMismatch {
                expected: codec.hash(),
                found: hash,
            });
        }
        let train = TrainConfig::from_text(r.text()?)?;
        let (epoch, step, t) = (r.u64()?, r.u64()?, r.u64()?);
        let count = r.u32()? as usize;
        if count % 3 != 0 {
            return Err(Error::corrupt(r.pos, "tensor count is not a multiple of three"));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let bytes = r.take(n.checked_mul(8).ok_or(Error::Truncated { offset: r.pos })?)?;
            tensors.push(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect::<Vec<f64>>(),
            );
        }
        if r.pos != body_len {
            return Err(Error::corrupt(r.pos, "trailing bytes in checkpoint"));
        }
        let v = tensors.split_off(2 * count / 3);
        let m = tensors.split_off(count / 3);
        let lens = |ts: &[Vec<f64>]| ts.iter().map(Vec::len).collect::<Vec<_>>();
        if lens(&m) != lens(&tensors) || lens(&v) != lens(&tensors) {
            return Err(Error::corrupt(0, "optimizer state does not match parameters"));
        }
        let ckpt = Checkpoint {
            codec,
            train,
            epoch,
            step,
            params: tensors,
            optimizer: Adam { m, v, t },
        };
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or(Error::Truncated {
                offset: self.data.len(),
            })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        let at = self.pos;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::corrupt(at, "config text is not UTF-8"))
    }
}
