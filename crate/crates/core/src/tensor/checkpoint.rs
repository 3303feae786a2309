//! Weight checkpoint file.
//!
//! Little-endian layout: magic `MFRW`, format version `u32`, tensor count
//! `u32`, then per tensor the name length `u32`, UTF-8 name, rank `u32`,
//! one `u32` per dimension and the `f32` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Float, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFRW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type NamedTensor<T> = (String, Tensor<T>);

pub fn write_checkpoint<T: Float>(path: &Path, tensors: &[NamedTensor<T>]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode(&mut w, tensors).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn encode<W: Write, T: Float>(w: &mut W, tensors: &[NamedTensor<T>]) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<T: Float>(path: &Path) -> Result<Vec<NamedTensor<T>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| fmt(e.to_string()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r).map_err(|e| fmt(e.to_string()))?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r).map_err(|e| fmt(e.to_string()))?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let entry = (|| -> std::io::Result<Result<NamedTensor<T>>> {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let Ok(name) = String::from_utf8(name) else {
                return Ok(Err(fmt("tensor name is not UTF-8".into())));
            };
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            Ok(Tensor::new(&shape, data).map(|t| (name, t)))
        })()
        .map_err(|e| fmt(e.to_string()))??;
        out.push(entry);
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.mfrw");
        let t = Tensor::<f32>::new(&[2], vec![1.5, -2.0]).unwrap();
        write_checkpoint(&path, &[("a.b".to_string(), t.clone())]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expected = b"MFRW".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(3u32.to_le_bytes());
        expected.extend(b"a.b");
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.5f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
        let back: Vec<NamedTensor<f32>> = read_checkpoint(&path).unwrap();
        assert_eq!(back[0].0, "a.b");
        assert_eq!(back[0].1, t);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"XXXX\x01\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_checkpoint::<f32>(&path), Err(Error::Format { .. })));
    }
}
