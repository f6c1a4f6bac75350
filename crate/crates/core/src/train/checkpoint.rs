//! Binary checkpoint format.
//!
//! ```text
//! "LMPN" | u32 version | u64 json_len | json | u32 n_tensors |
//!   n_tensors × ( u16 name_len | name | u8 rank | rank × u64 dim | f32 data )
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Objective, TrainConfig};
use crate::data::Vocab;
use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"LMPN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    /// Word list of the embedding table; UNK and PAD rows follow.
    pub vocab: Vec<String>,
    pub episodes_trained: usize,
    /// Episode count at which the stored parameters were captured.
    pub best_episode: usize,
    pub best_val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    pub fn model_name(&self) -> String {
        let base = match self.meta.config.objective {
            Objective::Softmax => "ProtoNet",
            Objective::SoftmaxTriplet => "LM-ProtoNet",
        };
        format!("{base} ({})", self.params.config.encoder.label())
    }

    /// Vocabulary with the checkpoint's (trained) embedding table.
    pub fn vocab(&self) -> Result<Vocab> {
        let id = self
            .params
            .store
            .find("word_embedding")
            .ok_or_else(|| Error::Config("checkpoint lacks word_embedding".into()))?;
        let table = self.params.store.get(id);
        Vocab::from_parts(
            self.meta.vocab.clone(),
            table.shape()[1],
            table.data().to_vec(),
            self.params.config.lowercase,
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.meta).map_err(|e| Error::Config(e.to_string()))?;
        let mut out =
            Vec::with_capacity(json.len() + 64 + 4 * self.params.store.iter().map(|(_, t)| t.numel()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.store.len() as u32).to_le_bytes());
        for (name, t) in self.params.store.iter() {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint {
                offset: 0,
                message: format!("bad magic {magic:?}, expected \"LMPN\""),
            });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let json_len = r.u64("config length")? as usize;
        let json_at = r.pos;
        let json = r.take(json_len, "config json")?;
        let meta: CheckpointMeta = serde_json::from_slice(json).map_err(|e| Error::Checkpoint {
            offset: json_at,
            message: format!("invalid config json: {e}"),
        })?;
        let expected = meta.config.model.parameter_shapes(meta.vocab.len() + 2);

        let count_at = r.pos;
        let count = r.u32("tensor count")? as usize;
        if count != expected.len() {
            return Err(Error::Checkpoint {
                offset: count_at,
                message: format!("{count} tensors, config implies {}", expected.len()),
            });
        }
        let mut store = ParamStore::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Checkpoint {
                    offset: at + 2,
                    message: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.take(1, "tensor rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("tensor dim")? as usize);
            }
            match expected.iter().find(|(n, _)| *n == name) {
                Some((_, s)) if *s == shape => {}
                Some((_, s)) => {
                    return Err(Error::Checkpoint {
                        offset: at,
                        message: format!("tensor {name} has shape {shape:?}, config implies {s:?}"),
                    })
                }
                None => {
                    return Err(Error::Checkpoint {
                        offset: at,
                        message: format!("unexpected tensor {name}"),
                    })
                }
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint {
                offset: r.pos,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let params = ModelParams::from_store(meta.config.model.clone(), store)?;
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint {
                offset: self.pos,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            }),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
