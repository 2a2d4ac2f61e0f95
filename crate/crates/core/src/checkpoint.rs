//! Named-tensor archive.
//!
//! Layout, all little-endian:
//! `"FARM" | version u32 | count u32 | count x (name_len u16 | name | rank u8
//! | dims u32 x rank | values) | crc32 u32`. The CRC covers every byte before
//! it. Version 1 stores 4-byte floats, version 2 stores 8-byte floats.
//! Integer metadata (`meta.*` entries) is stored one `u32` word per element,
//! zero-extended to the element width.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FARM";
pub const VERSION_F32: u32 = 1;
pub const VERSION_F64: u32 = 2;
pub const META_PREFIX: &str = "meta.";

#[derive(Clone, Debug, PartialEq)]
pub enum Entry<T> {
    Values(Tensor<T>),
    Words(Vec<u32>),
}

/// Ordered archive contents; order is preserved on save and load.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint<T> {
    pub entries: Vec<(String, Entry<T>)>,
}

fn version_for<T: Real>() -> u32 {
    if T::BYTES == 4 {
        VERSION_F32
    } else {
        VERSION_F64
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<T: Real> Checkpoint<T> {
    pub fn new() -> Self {
        Checkpoint { entries: Vec::new() }
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.push((name.into(), Entry::Values(t)));
    }

    pub fn push_words(&mut self, name: impl Into<String>, words: Vec<u32>) {
        self.entries.push((name.into(), Entry::Words(words)));
    }

    pub fn push_u64(&mut self, name: impl Into<String>, v: u64) {
        self.push_words(name, vec![v as u32, (v >> 32) as u32]);
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.push_words(name, bytes.iter().map(|&b| b as u32).collect());
    }

    pub fn get(&self, name: &str) -> Option<&Entry<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        match self.get(name) {
            Some(Entry::Values(t)) => Ok(t),
            _ => Err(corrupt(format!("missing tensor {name}"))),
        }
    }

    pub fn words(&self, name: &str) -> Result<&[u32]> {
        match self.get(name) {
            Some(Entry::Words(w)) => Ok(w),
            _ => Err(corrupt(format!("missing metadata {name}"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.words(name)? {
            [lo, hi] => Ok(*lo as u64 | (*hi as u64) << 32),
            _ => Err(corrupt(format!("{name} is not a 64-bit value"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        self.words(name)?
            .iter()
            .map(|&w| u8::try_from(w).map_err(|_| corrupt(format!("{name} holds non-byte words"))))
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let width = T::BYTES;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&version_for::<T>().to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| corrupt(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            let dims: Vec<usize> = match entry {
                Entry::Values(t) => t.shape().to_vec(),
                Entry::Words(w) => vec![w.len()],
            };
            let rank = u8::try_from(dims.len()).map_err(|_| corrupt("rank above 255"))?;
            out.push(rank);
            for d in dims {
                let d = u32::try_from(d).map_err(|_| corrupt("extent above u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match entry {
                Entry::Values(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                Entry::Words(ws) => {
                    for w in ws {
                        out.extend_from_slice(&w.to_le_bytes());
                        out.extend(std::iter::repeat_n(0u8, width - 4));
                    }
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Decodes either version, converting values to `T`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(payload) != stored {
            return Err(corrupt("CRC mismatch (truncated or corrupted file)"));
        }
        let version = u32::from_le_bytes(payload[4..8].try_into().unwrap());
        let width = match version {
            VERSION_F32 => 4,
            VERSION_F64 => 8,
            v => return Err(corrupt(format!("unsupported version {v}"))),
        };
        let count = u32::from_le_bytes(payload[8..12].try_into().unwrap()) as usize;
        let mut pos = 12;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= payload.len()).ok_or_else(|| {
                corrupt(format!("truncated entry at byte {}", *pos))
            })?;
            let s = &payload[*pos..end];
            *pos = end;
            Ok(s)
        };
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = take(&mut pos, numel.checked_mul(width).ok_or_else(|| corrupt("size overflow"))?)?;
            let entry = if name.starts_with(META_PREFIX) {
                if rank != 1 {
                    return Err(corrupt(format!("metadata {name} must be rank 1")));
                }
                Entry::Words(
                    raw.chunks(width)
                        .map(|c| u32::from_le_bytes(c[..4].try_into().unwrap()))
                        .collect(),
                )
            } else {
                let data = raw
                    .chunks(width)
                    .map(|c| {
                        if width == 4 {
                            T::from_f64(f32::read_le(c) as f64)
                        } else {
                            T::from_f64(f64::read_le(c))
                        }
                    })
                    .collect();
                Entry::Values(Tensor::new(&dims, data)?)
            };
            entries.push((name, entry));
        }
        if pos != payload.len() {
            return Err(corrupt(format!("{} trailing bytes", payload.len() - pos)));
        }
        Ok(Checkpoint { entries })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(format!(".tmp{}", std::process::id()));
        let tmp = std::path::PathBuf::from(tmp);
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Version stored in an encoded archive, if the header is readable.
pub fn stored_version(bytes: &[u8]) -> Option<u32> {
    (bytes.len() >= 8 && &bytes[..4] == MAGIC).then(|| u32::from_le_bytes(bytes[4..8].try_into().unwrap()))
}
