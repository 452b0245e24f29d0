//! Checkpoint container.
//!
//! ```text
//! b"UFCK"  u32 version  u32 count
//! count × { u32 name_len  name (UTF-8)  u32 ndim  ndim × u32 dim  f32 data }
//! ```
//! All integers and floats little-endian. Tensors are written with their
//! trailing unit dimensions dropped, so a bias of shape `[c, 1, 1, 1]` is
//! stored as `[c]`.

use std::io::{Read, Write};

use super::tensor::Tensor;
use super::NnError;

pub const MAGIC: &[u8; 4] = b"UFCK";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

fn stored_dims(shape: [usize; 4]) -> Vec<usize> {
    let mut dims = shape.to_vec();
    while dims.len() > 1 && dims[dims.len() - 1] == 1 {
        dims.pop();
    }
    dims
}

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[(String, Tensor)]) -> Result<(), NnError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let dims = stored_dims(t.shape());
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.len());
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, NnError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let ndim = read_u32(&mut r)? as usize;
        if ndim == 0 || ndim > 4 {
            return Err(bad(format!("{name}: {ndim} dimensions")));
        }
        let mut shape = [1usize; 4];
        for d in shape.iter_mut().take(ndim) {
            *d = read_u32(&mut r)? as usize;
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; 4 * n];
        r.read_exact(&mut raw).map_err(|_| bad(format!("{name}: truncated data")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}
