//! Versioned named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "TSADVCKP"
//! version      u32
//! has_arch     u8       0 | 1
//! [kind u8, channels u64, length u64, classes u64]    if has_arch
//! seed u64, epochs u64, final_loss f64
//! note_count   u32, then (key, value) strings
//! tensor_count u32, then per tensor:
//!     name string, rank u32, dims u64 × rank, values f64 × product(dims)
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8. Notes are written in key
//! order, so encoding is a pure function of the contents.

use std::io::Write;
use std::path::Path;

use super::{ArchitectureKind, ArchitectureSpec, TrainingMetadata};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TSADVCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        NamedTensor {
            name: name.into(),
            tensor,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub architecture: Option<ArchitectureSpec>,
    pub metadata: TrainingMetadata,
    pub tensors: Vec<NamedTensor>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptContainer(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
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

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?)
            .map_err(|_| Error::CorruptContainer("dimension overflow".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::CorruptContainer("string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.tensor)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.tensors.iter().find(|t| !seen.insert(t.name.as_str())) {
            return Err(Error::invalid(format!(
                "duplicate tensor name {:?}",
                dup.name
            )));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        match self.architecture {
            Some(a) => {
                out.push(1);
                out.push(a.kind.code());
                for d in [a.channels, a.length, a.classes] {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
            }
            None => out.push(0),
        }
        let m = &self.metadata;
        out.extend_from_slice(&m.seed.to_le_bytes());
        out.extend_from_slice(&m.epochs.to_le_bytes());
        out.extend_from_slice(&m.final_loss.to_bits().to_le_bytes());
        out.extend_from_slice(&(m.notes.len() as u32).to_le_bytes());
        for (k, v) in &m.notes {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.tensor.rank() as u32).to_le_bytes());
            for &d in t.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(Error::CorruptContainer("bad magic".into()));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let architecture = match c.u8()? {
            0 => None,
            1 => {
                let code = c.u8()?;
                let kind = ArchitectureKind::from_code(code).ok_or_else(|| {
                    Error::CorruptContainer(format!("unknown architecture code {code}"))
                })?;
                Some(ArchitectureSpec::new(
                    kind,
                    c.usize()?,
                    c.usize()?,
                    c.usize()?,
                ))
            }
            other => {
                return Err(Error::CorruptContainer(format!(
                    "bad architecture flag {other}"
                )))
            }
        };
        let mut metadata = TrainingMetadata {
            seed: c.u64()?,
            epochs: c.u64()?,
            final_loss: c.f64()?,
            notes: Default::default(),
        };
        for _ in 0..c.u32()? {
            let k = c.string()?;
            let v = c.string()?;
            metadata.notes.insert(k, v);
        }
        let count = c.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = c.string()?;
            if tensors.iter().any(|t: &NamedTensor| t.name == name) {
                return Err(Error::CorruptContainer(format!(
                    "duplicate tensor name {name:?}"
                )));
            }
            let rank = c.u32()? as usize;
            let dims = (0..rank).map(|_| c.usize()).collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= bytes.len() / 8)
                .ok_or_else(|| {
                    Error::CorruptContainer(format!("tensor {name:?} dimensions overflow"))
                })?;
            let data = (0..numel).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
            let tensor =
                Tensor::new(dims, data).map_err(|e| Error::CorruptContainer(e.to_string()))?;
            tensors.push(NamedTensor { name, tensor });
        }
        if c.pos != bytes.len() {
            return Err(Error::CorruptContainer(format!(
                "{} trailing bytes",
                bytes.len() - c.pos
            )));
        }
        Ok(Checkpoint {
            architecture,
            metadata,
            tensors,
        })
    }

    pub fn write_to(&self, mut sink: impl Write) -> Result<()> {
        sink.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}
