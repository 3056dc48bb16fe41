//! Little-endian weight files: `LLTW`, version `u32`, then per tensor
//! `name_len u32, name, rank u32, dims u32 * rank, values f32 * count`.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"LLTW";
pub const WEIGHTS_VERSION: u32 = 1;

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Weights(format!("{what} {n} exceeds u32")))
}

pub fn save_weights<T: Scalar>(path: &Path, params: &ParamStore<T>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    for (_, p) in params.iter() {
        buf.extend_from_slice(&u32_of(p.name.len(), "name length")?.to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        buf.extend_from_slice(&u32_of(shape.len(), "rank")?.to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&(v.to_f64c() as f32).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Weights("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// All tensors of a weight file, in file order.
pub fn read_weights(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::Weights("bad magic".into()));
    }
    let version = c.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Weights(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::Weights("name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let data = c
            .take(count.checked_mul(4).ok_or_else(|| Error::Weights("tensor too large".into()))?)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(dims, data).map_err(|e| Error::Weights(e.to_string()))?));
    }
    Ok(out)
}

/// Loads a weight file into `params` (names and shapes must match).
pub fn load_weights<T: Scalar>(path: &Path, params: &mut ParamStore<T>) -> Result<()> {
    let tensors = read_weights(path)?;
    if tensors.len() != params.len() {
        return Err(Error::Weights(format!("file has {} tensors, model has {}", tensors.len(), params.len())));
    }
    for (name, t) in tensors {
        let id = params.id(&name).ok_or_else(|| Error::Weights(format!("unknown parameter {name}")))?;
        let dst = params.value_mut(id);
        if dst.shape() != t.shape() {
            return Err(Error::Weights(format!("shape mismatch for {name}")));
        }
        for (d, s) in dst.data_mut().iter_mut().zip(t.data()) {
            *d = T::from_f64c(*s as f64);
        }
    }
    Ok(())
}
