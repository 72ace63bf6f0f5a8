//! Versioned binary checkpoint: named f64 tensors plus an integrity
//! checksum.
//!
//! Layout (all integers little-endian):
//! `"SQCP"` magic · u32 version · u32 tensor count · per tensor in
//! ascending name order (u32 name length, UTF-8 name, u32 rank, u32 dims…,
//! f64 LE payload) · 32-byte SHA-256 over everything preceding it.
//! Writing the same weights twice yields byte-identical files.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SQCP";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialize named weights to `path`.
pub fn save_weights(path: &Path, weights: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut body = Vec::new();
    body.extend_from_slice(MAGIC);
    body.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    body.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for (name, tensor) in weights {
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            body.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&body);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&body)?;
    file.write_all(&digest)?;
    Ok(())
}

/// Read weights back, verifying version and checksum.
pub fn load_weights(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return Err(Error::Codec(format!(
            "checkpoint {} truncated ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Codec(format!(
            "checkpoint {} failed its integrity check",
            path.display()
        )));
    }

    let mut cursor = Cursor::new(body);
    let magic = cursor.take_bytes(4)?;
    if magic != MAGIC {
        return Err(Error::Codec("not a checkpoint file (bad magic)".into()));
    }
    let version = cursor.take_u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Codec(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = cursor.take_u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = cursor.take_u32()? as usize;
        let name = String::from_utf8(cursor.take_bytes(name_len)?.to_vec())
            .map_err(|_| Error::Codec("tensor name is not UTF-8".into()))?;
        let rank = cursor.take_u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cursor.take_u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(
                cursor.take_bytes(8)?.try_into().expect("8 bytes"),
            ));
        }
        out.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if !cursor.at_end() {
        return Err(Error::Codec("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Codec(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take_bytes(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
