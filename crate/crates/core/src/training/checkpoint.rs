//! Binary checkpoint container.
//!
//! ```text
//! "DSQ1" | u32 version | u32 meta_len | meta (JSON) | u32 n_tensors
//!   n_tensors × { u32 name_len | name | u32 ndim | ndim × u64 dim | f32 payload }
//! 32-byte SHA-256 of everything above
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::importance::ImportanceState;
use super::optim::AdamState;
use crate::denoiser::{ModelConfig, ModelParams, FROZEN_SOURCE_NAME};
use crate::error::{Error, Result};
use crate::schedule::ScheduleParams;
use crate::tensor::Matrix;
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 4] = b"DSQ1";
pub const FORMAT_VERSION: u32 = 1;
const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub schedule: ScheduleParams,
    pub vocab_hash: String,
    /// Serialized vocab, so sampling needs nothing but the checkpoint.
    pub vocab: Option<String>,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub adam_step: u64,
    pub importance: Option<ImportanceState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, m: &Matrix) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, 2);
    buf.extend_from_slice(&(m.rows as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols as u64).to_le_bytes());
    for v in &m.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        put_u32(&mut buf, meta.len() as u32);
        buf.extend_from_slice(&meta);

        let named = self.params.named_tensors();
        let mut records: Vec<(String, &Matrix)> = named.iter().map(|(n, m)| (n.to_string(), *m)).collect();
        if let Some(f) = &self.params.frozen_source {
            records.push((FROZEN_SOURCE_NAME.to_string(), &f.matrix));
        }
        if let Some(opt) = &self.optimizer {
            for ((name, _), (m, v)) in named.iter().zip(opt.m.iter().zip(&opt.v)) {
                records.push((format!("{OPT_M}{name}"), m));
                records.push((format!("{OPT_V}{name}"), v));
            }
        }
        put_u32(&mut buf, records.len() as u32);
        for (name, m) in &records {
            put_tensor(&mut buf, name, m);
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch; file is corrupt or was modified".into()));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim != 2 {
                return Err(Error::Checkpoint(format!("tensor {name} has {ndim} dims, expected 2")));
            }
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let raw = r.take(rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor records".into()));
        }

        meta.schedule.build()?;
        if let Some(text) = &meta.vocab {
            let vocab = Vocab::from_text(text)?;
            if vocab.hash() != meta.vocab_hash {
                return Err(Error::Checkpoint("embedded vocab does not match its recorded hash".into()));
            }
        }

        let (opt_m, rest): (Vec<_>, Vec<_>) = tensors.into_iter().partition(|(n, _)| n.starts_with(OPT_M));
        let (opt_v, model): (Vec<_>, Vec<_>) = rest.into_iter().partition(|(n, _)| n.starts_with(OPT_V));
        let params = ModelParams::from_named(meta.model, model)?;
        let optimizer = if opt_m.is_empty() && opt_v.is_empty() {
            None
        } else {
            let lookup = |set: &[(String, Matrix)], prefix: &str| -> Result<Vec<Matrix>> {
                params
                    .named_tensors()
                    .into_iter()
                    .map(|(name, p)| {
                        let key = format!("{prefix}{name}");
                        let m = set
                            .iter()
                            .find(|(n, _)| *n == key)
                            .map(|(_, m)| m.clone())
                            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
                        if m.shape() != p.shape() {
                            return Err(Error::Checkpoint(format!("optimizer tensor {key} has wrong shape")));
                        }
                        Ok(m)
                    })
                    .collect()
            };
            Some(AdamState {
                step: meta.adam_step,
                m: lookup(&opt_m, OPT_M)?,
                v: lookup(&opt_v, OPT_V)?,
            })
        };
        Ok(Checkpoint {
            meta,
            params,
            optimizer,
        })
    }

    /// Writes via a temporary file and rename, so an interrupted write never clobbers the
    /// previous checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// The vocab stored in the checkpoint.
    pub fn vocab(&self) -> Result<Vocab> {
        let text = self
            .meta
            .vocab
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no vocab".into()))?;
        Vocab::from_text(text)
    }

    pub fn verify_vocab(&self, vocab: &Vocab) -> Result<()> {
        if vocab.hash() != self.meta.vocab_hash {
            return Err(Error::Checkpoint(format!(
                "vocab hash mismatch: checkpoint has {}, vocab file has {}",
                self.meta.vocab_hash,
                vocab.hash()
            )));
        }
        if vocab.len() != self.meta.model.vocab_size {
            return Err(Error::Checkpoint("vocab size differs from the model's".into()));
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
