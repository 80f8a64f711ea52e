//! Binary tensor snapshots ("TNSR" chunks) and checkpoint files ("VPCK").
//!
//! Both formats are little-endian and fully deterministic: writing the same
//! logical content twice produces byte-identical files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";
pub const TNSR_VERSION: u32 = 1;
pub const VPCK_MAGIC: &[u8; 4] = b"VPCK";
pub const VPCK_VERSION: u32 = 1;

/// Named tensors as (shape, row-major f64 data).
pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

/// Write one TNSR chunk: magic, version, rank, extents (u64 each), scalar
/// width in bytes, then the raw little-endian payload.
pub fn write_tnsr<W: Write>(w: &mut W, shape: &[usize], data: &[f64]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::InvalidInput {
            op: "write_tnsr",
            msg: format!("shape {shape:?} does not match data length {}", data.len()),
        });
    }
    w.write_all(TNSR_MAGIC)?;
    w.write_all(&TNSR_VERSION.to_le_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &e in shape {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    w.write_all(&8u32.to_le_bytes())?;
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Read one TNSR chunk.
pub fn read_tnsr<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f64>)> {
    let magic = read_exact::<4, _>(r)?;
    if &magic != TNSR_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad TNSR magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = u32::from_le_bytes(read_exact::<4, _>(r)?);
    if version != TNSR_VERSION {
        return Err(Error::Checkpoint(format!("unsupported TNSR version {version}")));
    }
    let rank = u32::from_le_bytes(read_exact::<4, _>(r)?) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(read_exact::<8, _>(r)?) as usize);
    }
    let width = u32::from_le_bytes(read_exact::<4, _>(r)?);
    if width != 8 {
        return Err(Error::Checkpoint(format!("unsupported scalar width {width}")));
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_le_bytes(read_exact::<8, _>(r)?));
    }
    Ok((shape, data))
}

pub fn write_tnsr_file(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let mut buf = Vec::new();
    write_tnsr(&mut buf, shape, data)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_tnsr_file(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    read_tnsr(&mut bytes.as_slice())
}

/// Write a checkpoint: VPCK magic, version, a JSON header blob, then named
/// TNSR chunks in sorted-name order.
pub fn save_checkpoint(path: &Path, header: &serde_json::Value, tensors: &TensorMap) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(VPCK_MAGIC);
    buf.extend_from_slice(&VPCK_VERSION.to_le_bytes());
    let header_bytes = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, (shape, data)) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_tnsr(&mut buf, shape, data)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, TensorMap)> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let magic = read_exact::<4, _>(&mut r)?;
    if &magic != VPCK_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad VPCK magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = u32::from_le_bytes(read_exact::<4, _>(&mut r)?);
    if version != VPCK_VERSION {
        return Err(Error::Checkpoint(format!("unsupported VPCK version {version}")));
    }
    let header_len = u64::from_le_bytes(read_exact::<8, _>(&mut r)?) as usize;
    if r.len() < header_len {
        return Err(Error::Checkpoint("truncated header".to_string()));
    }
    let header: serde_json::Value = serde_json::from_slice(&r[..header_len])?;
    r = &r[header_len..];
    let count = u32::from_le_bytes(read_exact::<4, _>(&mut r)?) as usize;
    let mut tensors = TensorMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_exact::<4, _>(&mut r)?) as usize;
        if r.len() < name_len {
            return Err(Error::Checkpoint("truncated tensor name".to_string()));
        }
        let name = String::from_utf8(r[..name_len].to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        r = &r[name_len..];
        let (shape, data) = read_tnsr(&mut r)?;
        tensors.insert(name, (shape, data));
    }
    Ok((header, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tnsr_roundtrip() {
        let shape = vec![2, 3];
        let data = vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 1e300, -0.5];
        let mut buf = Vec::new();
        write_tnsr(&mut buf, &shape, &data).unwrap();
        let (s2, d2) = read_tnsr(&mut buf.as_slice()).unwrap();
        assert_eq!(s2, shape);
        assert_eq!(d2, data);
    }

    #[test]
    fn tnsr_rejects_bad_magic() {
        let bytes = b"XXXX\x01\x00\x00\x00";
        assert!(read_tnsr(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.vpck");
        let p2 = dir.path().join("b.vpck");
        let mut tensors = TensorMap::new();
        tensors.insert("w.0".into(), (vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        tensors.insert("b.0".into(), (vec![2], vec![-1.0, 0.25]));
        let header = serde_json::json!({"d_model": 8, "n_layers": 1});
        save_checkpoint(&p1, &header, &tensors).unwrap();
        let (h2, t2) = load_checkpoint(&p1).unwrap();
        assert_eq!(h2, header);
        save_checkpoint(&p2, &h2, &t2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
