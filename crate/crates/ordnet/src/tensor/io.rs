//! OTNS1 binary tensor files.
//!
//! Layout: 5-byte magic `OTNS1`, u8 dtype code (0 = f64, 1 = i64), u8 rank,
//! rank x u64 little-endian extents, then the row-major payload.

use super::Tensor;
use crate::error::{OrdError, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 5] = b"OTNS1";
const DTYPE_F64: u8 = 0;
const DTYPE_I64: u8 = 1;

fn write_header(w: &mut impl Write, dtype: u8, shape: &[usize]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(OrdError::Format("rank exceeds u8".into()));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[dtype, shape.len() as u8])?;
    for &e in shape {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<(u8, Vec<usize>)> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(OrdError::Format("bad OTNS1 magic".into()));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let (dtype, rank) = (head[0], head[1] as usize);
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut ext = [0u8; 8];
        r.read_exact(&mut ext)?;
        shape.push(u64::from_le_bytes(ext) as usize);
    }
    Ok((dtype, shape))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DTYPE_F64, t.shape())?;
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let (dtype, shape) = read_header(&mut r)?;
    if dtype != DTYPE_F64 {
        return Err(OrdError::Format(format!(
            "expected f64 tensor, dtype code {}",
            dtype
        )));
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(shape, data)
}

/// Integer tensors carry label masks; dtype code 1.
pub fn write_int_tensor(path: impl AsRef<Path>, shape: &[usize], data: &[i64]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(OrdError::Dimension(format!(
            "shape {:?} vs {} values",
            shape,
            data.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DTYPE_I64, shape)?;
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_int_tensor(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<i64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let (dtype, shape) = read_header(&mut r)?;
    if dtype != DTYPE_I64 {
        return Err(OrdError::Format(format!(
            "expected i64 tensor, dtype code {}",
            dtype
        )));
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        data.push(i64::from_le_bytes(buf));
    }
    Ok((shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.otns");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = Tensor::rand_uniform(&[2, 3, 4], -5.0, 5.0, &mut rng);
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn int_tensor_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.otns");
        let data: Vec<i64> = vec![0, 1, 255, 3, 2, 1];
        write_int_tensor(&path, &[2, 3], &data).unwrap();
        let (shape, back) = read_int_tensor(&path).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(back, data);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"NOTNS-file").unwrap();
        assert!(matches!(read_tensor(&path), Err(OrdError::Format(_))));
    }
}
