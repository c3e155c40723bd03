//! Binary checkpoint: a JSON header (model config, labels, vocabulary)
//! followed by every parameter as little-endian `f64`s.
//!
//! Layout: magic `GAPGRID\0`, format version `u32`, header length `u32`,
//! header JSON, parameter count `u32`, then per parameter: name length `u32`,
//! UTF-8 name, rank `u32`, each dimension `u64`, and the values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabelSet;
use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::model::{Model, ModelConfig, ParamStore};
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 8] = b"GAPGRID\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    entity_types: Vec<String>,
    vocab: Vocab,
}

/// A trained model together with everything needed to run it on raw tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub labels: LabelSet,
    pub vocab: Vocab,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.config().clone(),
            entity_types: self.labels.entity_types().to_vec(),
            vocab: self.vocab.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let params = self.model.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= r.remaining() / 8)
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` is truncated")))?;
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }
        let labels = LabelSet::new(header.entity_types)?;
        if labels.len() != header.model.num_labels {
            return Err(Error::Checkpoint(format!(
                "{} labels in header but the model predicts {}",
                labels.len(),
                header.model.num_labels
            )));
        }
        let model = Model::from_parts(header.model, ParamStore::from_entries(entries))?;
        Ok(Checkpoint {
            model,
            labels,
            vocab: header.vocab,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
