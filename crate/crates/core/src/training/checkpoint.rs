//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MAMEXCKP" | u32 version
//! u64 len | header text (config lines, then modality/users/data_hash/step)
//! u64 block count | per block: u64 len | name | u64 rows | u64 cols | f64 values
//! 32-byte SHA-256 of everything before it
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::ModalitySpec;
use crate::numerics::{Matrix, ParamStore};
use crate::training::{Model, ModelConfig, ARCHITECTURE_KEYS};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MAMEXCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub modalities: Vec<ModalitySpec>,
    pub num_users: usize,
    /// Hash of the dataset directory the model was trained on.
    pub data_hash: String,
    pub step: u64,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &Model, data_hash: &str, step: u64) -> Self {
        Checkpoint {
            config: model.config().clone(),
            modalities: model.modalities().to_vec(),
            num_users: model.num_users(),
            data_hash: data_hash.to_owned(),
            step,
            params: model.params.clone(),
        }
    }

    /// Rebuilds the model. With `expected`, any architecture key that differs
    /// is refused with the full diff.
    pub fn into_model(self, expected: Option<&ModelConfig>) -> Result<Model> {
        if let Some(expected) = expected {
            let diff = self.config.diff(expected, &ARCHITECTURE_KEYS);
            if !diff.is_empty() {
                return Err(Error::Mismatch(format!(
                    "checkpoint config differs:\n  {}",
                    diff.join("\n  ")
                )));
            }
        }
        let mut model = Model::new(&self.config, &self.modalities, self.num_users)?;
        let layout = |p: &ParamStore| -> Vec<(String, (usize, usize))> {
            p.blocks().iter().map(|b| (b.name.clone(), b.value.shape())).collect()
        };
        if layout(&model.params) != layout(&self.params) {
            return Err(Error::Integrity(
                "checkpoint parameter layout does not match its config".into(),
            ));
        }
        model.params = self.params;
        Ok(model)
    }

    fn header(&self) -> String {
        let mut h = self.config.render();
        for m in &self.modalities {
            h.push_str(&format!("@modality = {} {}\n", m.name, m.dim));
        }
        h.push_str(&format!("@num_users = {}\n", self.num_users));
        h.push_str(&format!("@data_hash = {}\n", self.data_hash));
        h.push_str(&format!("@step = {}\n", self.step));
        h
    }

    fn parse_header(text: &str) -> Result<(ModelConfig, Vec<ModalitySpec>, usize, String, u64)> {
        let bad = |msg: &str| Error::Integrity(format!("checkpoint header: {msg}"));
        let mut config_lines = String::new();
        let mut modalities = Vec::new();
        let (mut num_users, mut data_hash, mut step) = (None, None, None);
        for line in text.lines() {
            let Some(rest) = line.strip_prefix('@') else {
                config_lines.push_str(line);
                config_lines.push('\n');
                continue;
            };
            let (k, v) = rest.split_once(" = ").ok_or_else(|| bad("malformed line"))?;
            match k {
                "modality" => {
                    let (name, dim) = v.rsplit_once(' ').ok_or_else(|| bad("malformed modality"))?;
                    let dim = dim.parse().map_err(|_| bad("bad modality dim"))?;
                    modalities.push(ModalitySpec {
                        name: name.to_owned(),
                        dim,
                    });
                }
                "num_users" => num_users = Some(v.parse().map_err(|_| bad("bad num_users"))?),
                "data_hash" => data_hash = Some(v.to_owned()),
                "step" => step = Some(v.parse().map_err(|_| bad("bad step"))?),
                _ => return Err(bad("unknown field")),
            }
        }
        let config = ModelConfig::parse(&config_lines).map_err(|e| bad(&e.to_string()))?;
        Ok((
            config,
            modalities,
            num_users.ok_or_else(|| bad("missing num_users"))?,
            data_hash.ok_or_else(|| bad("missing data_hash"))?,
            step.ok_or_else(|| bad("missing step"))?,
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = self.header();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for b in self.params.blocks() {
            out.extend_from_slice(&(b.name.len() as u64).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.value.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(b.value.cols() as u64).to_le_bytes());
            for v in b.value.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::Integrity("checkpoint truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if &body[..8] != MAGIC {
            return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity(
                "checkpoint checksum mismatch (truncated or corrupted)".into(),
            ));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.len()?;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Integrity("checkpoint header is not UTF-8".into()))?;
        let (config, modalities, num_users, data_hash, step) = Self::parse_header(header)?;
        let mut params = ParamStore::new();
        for _ in 0..r.len()? {
            let name_len = r.len()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Integrity("block name is not UTF-8".into()))?
                .to_owned();
            let rows = r.len()?;
            let cols = r.len()?;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Integrity("block size overflow".into()))?;
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Integrity("block size overflow".into()))?,
            )?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if params.find(&name).is_some() {
                return Err(Error::Integrity(format!("duplicate block `{name}`")));
            }
            params.add(name, Matrix::from_vec(rows, cols, values)?);
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after parameter blocks".into()));
        }
        Ok(Checkpoint {
            config,
            modalities,
            num_users,
            data_hash,
            step,
            params,
        })
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
            .ok_or_else(|| Error::Integrity("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Integrity("length out of range".into()))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
