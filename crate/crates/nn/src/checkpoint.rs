//! Binary parameter checkpoints.
//!
//! Layout: 8-byte magic `STRDCKPT`, u32 LE version, then records until EOF.
//! Each record is u32 LE name length, name bytes, u8 dtype tag, u8 rank,
//! `rank` u32 LE dims, then the payload (little-endian f32 for tag 0, raw
//! bytes for tag 1).

use std::io::{Read, Write};
use std::path::Path;

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{NnError, Result};

pub const MAGIC: &[u8; 8] = b"STRDCKPT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_BYTES: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    F32 { name: String, tensor: Tensor<f32> },
    Bytes { name: String, bytes: Vec<u8> },
}

impl Record {
    pub fn name(&self) -> &str {
        match self {
            Record::F32 { name, .. } | Record::Bytes { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>) -> Self {
        let records = store
            .iter()
            .map(|(n, t)| Record::F32 {
                name: n.to_string(),
                tensor: t.clone(),
            })
            .collect();
        Self { records }
    }

    pub fn with_bytes(mut self, name: &str, bytes: Vec<u8>) -> Self {
        self.records.push(Record::Bytes {
            name: name.to_string(),
            bytes,
        });
        self
    }

    pub fn bytes(&self, name: &str) -> Option<&[u8]> {
        self.records.iter().find_map(|r| match r {
            Record::Bytes { name: n, bytes } if n == name => Some(bytes.as_slice()),
            _ => None,
        })
    }

    /// Copies every stored tensor into `store`; names and shapes must match exactly.
    pub fn restore(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let tensors: Vec<(&String, &Tensor<f32>)> = self
            .records
            .iter()
            .filter_map(|r| match r {
                Record::F32 { name, tensor } => Some((name, tensor)),
                _ => None,
            })
            .collect();
        if tensors.len() != store.len() {
            return Err(NnError::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                tensors.len(),
                store.len()
            )));
        }
        for (name, t) in tensors {
            let id = store
                .id(name)
                .ok_or_else(|| NnError::Checkpoint(format!("unknown parameter `{}`", name)))?;
            let dst = store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(NnError::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, checkpoint {:?}",
                    name,
                    dst.shape(),
                    t.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for r in &self.records {
            let name = r.name().as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            match r {
                Record::F32 { tensor, .. } => {
                    out.push(DTYPE_F32);
                    out.push(tensor.shape().len() as u8);
                    for &d in tensor.shape() {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for v in tensor.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Record::Bytes { bytes, .. } => {
                    out.push(DTYPE_BYTES);
                    out.push(1);
                    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
                    out.extend_from_slice(bytes);
                }
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported version {}",
                version
            )));
        }
        let mut records = Vec::new();
        while cur.pos < buf.len() {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| NnError::Checkpoint("record name is not utf-8".into()))?;
            let tag = cur.u8()?;
            let rank = cur.u8()? as usize;
            let dims: Vec<usize> = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<_>>()?;
            let numel: usize = dims.iter().product();
            match tag {
                DTYPE_F32 => {
                    let raw = cur.take(numel * 4)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    records.push(Record::F32 {
                        name,
                        tensor: Tensor::new(&dims, data)?,
                    });
                }
                DTYPE_BYTES => {
                    let bytes = cur.take(numel)?.to_vec();
                    records.push(Record::Bytes { name, bytes });
                }
                t => return Err(NnError::Checkpoint(format!("unknown dtype tag {}", t))),
            }
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::decode(&buf)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
