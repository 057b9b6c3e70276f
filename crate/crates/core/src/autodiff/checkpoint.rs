//! `FBCS1` parameter checkpoints.
//!
//! Layout: the five header bytes `FBCS1`, then one record per parameter in
//! sorted identifier order. Each record is the identifier length (u64), the
//! UTF-8 identifier bytes, the rank (u64), each extent (u64) and the values
//! (f64). All integers and floats are little-endian.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::params::ParamStore;
use crate::tensor::{Tensor, TensorError};

pub const MAGIC: &[u8; 5] = b"FBCS1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint header")]
    BadMagic,
    #[error("malformed checkpoint record: {0}")]
    Malformed(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut out: W) -> Result<(), CheckpointError> {
    out.write_all(MAGIC)?;
    for (id, p) in store.iter() {
        out.write_all(&(id.len() as u64).to_le_bytes())?;
        out.write_all(id.as_bytes())?;
        out.write_all(&(p.value.rank() as u64).to_le_bytes())?;
        for &e in p.value.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ParamStore, CheckpointError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut cursor = Cursor {
        bytes: &bytes,
        pos: MAGIC.len(),
    };
    let mut store = ParamStore::new();
    let mut last: Option<String> = None;
    while cursor.pos < bytes.len() {
        let len = cursor.u64()? as usize;
        let id = String::from_utf8(cursor.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("identifier is not UTF-8".into()))?;
        if last.as_deref().is_some_and(|prev| prev >= id.as_str()) {
            return Err(CheckpointError::Malformed(format!("identifier {id} out of order")));
        }
        let rank = cursor.u64()? as usize;
        let shape = (0..rank)
            .map(|_| cursor.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| cursor.f64()).collect::<Result<Vec<_>, _>>()?;
        store.insert(id.clone(), Tensor::new(shape, values)?)?;
        last = Some(id);
    }
    Ok(store)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Malformed("truncated record".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
