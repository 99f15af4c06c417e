//! Binary checkpoint format for [`ParamSet`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SVDPCKPT"
//! version    u32      (currently 1)
//! arch_len   u32      length of the architecture JSON blob
//! arch_json  bytes    canonical serde_json of Architecture
//! n_records  u32
//! record:    name_len u32, name utf-8, dtype u8, ndim u8, dims u64 x ndim,
//!            payload (row-major, little-endian)
//! ```
//!
//! Loading and re-saving a checkpoint reproduces the file byte-for-byte.

use super::{Architecture, ParamSet};
use crate::error::{Error, Result};
use crate::num::{Dtype, Real};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 8] = b"SVDPCKPT";
const VERSION: u32 = 1;

pub fn encode<T: Real>(arch: &Architecture, params: &ParamSet<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let arch_json =
        serde_json::to_vec(arch).map_err(|e| Error::Format(format!("arch encode: {e}")))?;
    out.extend_from_slice(&(arch_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch_json);
    out.extend_from_slice(&(params.tensor_count() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<(Architecture, ParamSet<T>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let arch_len = cur.u32()? as usize;
    let arch: Architecture = serde_json::from_slice(cur.take(arch_len)?)
        .map_err(|e| Error::Format(format!("arch decode: {e}")))?;
    let n = cur.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("record name not utf-8".into()))?;
        let dtype = Dtype::from_tag(cur.u8()?)
            .ok_or_else(|| Error::Format(format!("unknown dtype in record '{name}'")))?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "record '{name}' stored as {dtype:?} but {:?} requested",
                T::DTYPE
            )));
        }
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let payload = cur.take(count * dtype.size())?;
        let data: Vec<T> = payload.chunks(dtype.size()).map(T::read_le).collect();
        params.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok((arch, params))
}

pub fn save<T: Real>(path: &Path, arch: &Architecture, params: &ParamSet<T>) -> Result<()> {
    fs::write(path, encode(arch, params)?)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<(Architecture, ParamSet<T>)> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
