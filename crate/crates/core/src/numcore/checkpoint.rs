//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ASDC" | u32 version (=1) | u32 tensor count
//! per tensor: u32 name length | UTF-8 name | u8 dtype (0 = f32, 1 = f64)
//!             | u8 rank | rank × u64 dims | raw scalar data
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::{DType, ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ASDC";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(params: &ParamSet<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + params.num_scalars() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Config(format!("`{name}` has rank above 255")))?;
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Load(format!("truncated checkpoint while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a checkpoint whose tensors are all of dtype `T`. Loaded tensors are trainable.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<ParamSet<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Load("bad magic, not a checkpoint".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Load(format!("unsupported checkpoint version {version}")));
    }
    let count = cur.u32("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::Load("tensor name is not UTF-8".into()))?
            .to_string();
        let code = cur.u8("dtype")?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Load(format!("`{name}`: unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Load(format!(
                "`{name}`: stored as {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let rank = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * dtype.size(), "tensor data")?;
        let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| Error::Load(format!("`{name}`: {e}")))?
            .tracked();
        params
            .insert(name.clone(), tensor)
            .map_err(|_| Error::Load(format!("duplicate tensor `{name}`")))?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Load("trailing bytes after last tensor".into()));
    }
    Ok(params)
}

pub fn write<T: Scalar>(params: &ParamSet<T>, mut w: impl Write) -> Result<()> {
    w.write_all(&encode(params)?)?;
    Ok(())
}

pub fn read<T: Scalar>(mut r: impl Read) -> Result<ParamSet<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save<T: Scalar>(params: &ParamSet<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(params)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParamSet<T>> {
    decode(&fs::read(path)?)
}

/// Copies values from `loaded` into every entry of `target` whose name starts with
/// `prefix`, failing on the first tensor that is missing or shaped differently.
pub fn restore_into<T: Scalar>(target: &mut ParamSet<T>, loaded: &ParamSet<T>, prefix: &str) -> Result<()> {
    for (name, t) in target.iter_mut() {
        if !name.starts_with(prefix) {
            continue;
        }
        let src = loaded
            .get(name)
            .map_err(|_| Error::Load(format!("checkpoint lacks tensor `{name}`")))?;
        if src.shape() != t.shape() {
            return Err(Error::Load(format!(
                "tensor `{name}` has shape {:?} in checkpoint, model expects {:?}",
                src.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}
