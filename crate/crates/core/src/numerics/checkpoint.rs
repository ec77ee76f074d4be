//! Binary tensor-bundle format shared by checkpoints and optimizer state.
//!
//! ```text
//! magic   "PLNT1"            5 bytes
//! version u32 LE             currently 1
//! repeated until EOF:
//!   name_len u32 LE, name UTF-8 bytes
//!   rank u32 LE, dims rank × u64 LE
//!   payload product(dims) × f64 LE
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{NumericsError, Tensor};

pub const MAGIC: &[u8; 5] = b"PLNT1";
pub const VERSION: u32 = 1;

pub fn write_bundle(mut w: impl Write, entries: &[(String, Tensor)]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_bundle(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, NumericsError> {
    let mut r = bytes;
    let bad = |what: &str| NumericsError::Format(what.to_string());
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r).ok_or_else(|| bad("truncated header"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while !r.is_empty() {
        let idx = out.len();
        let err = |what: &str| NumericsError::Format(format!("entry {idx}: {what}"));
        let len = read_u32(&mut r).ok_or_else(|| err("truncated name length"))? as usize;
        if r.len() < len {
            return Err(err("truncated name"));
        }
        let name = std::str::from_utf8(&r[..len]).map_err(|_| err("name is not UTF-8"))?.to_string();
        r = &r[len..];
        let rank = read_u32(&mut r).ok_or_else(|| err("truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| err("truncated dims"))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        if r.len() < n * 8 {
            return Err(err("truncated payload"));
        }
        let data = r[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        r = &r[n * 8..];
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    write_bundle(&mut buf, entries)?;
    std::fs::write(path, buf)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>, NumericsError> {
    let bytes = std::fs::read(path)
        .map_err(|e| NumericsError::Format(format!("{}: {e}", path.display())))?;
    read_bundle(&bytes)
}
