//! Versioned binary parameter files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! b"IPPOPARM" | u32 version | u32 count |
//!   count x ( u32 name_len | name utf-8 | u32 ndim | ndim x u64 dim | len x f64 )
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::tensor::Tensor;

const MAGIC: &[u8; 8] = b"IPPOPARM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_tensors<'a, W, I>(mut w: W, tensors: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads every named tensor. Loaded tensors are marked trainable.
pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a parameter file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(shape, data)?.with_grad()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Tensor::new(vec![2, 2], vec![0.1, -1e-300, f64::MAX, 1.0 / 3.0]).unwrap();
        let b = Tensor::scalar(-0.0);
        let mut buf = Vec::new();
        write_tensors(&mut buf, [("a", &a), ("b", &b)]).unwrap();
        let back = read_tensors(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a");
        assert_eq!(back[0].1.shape(), a.shape());
        for (x, y) in back[0].1.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back[1].1.data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(matches!(read_tensors(&b"NOTAFILE\x01\0\0\0"[..]), Err(Error::Checkpoint(_))));
        let mut buf = Vec::new();
        write_tensors(&mut buf, std::iter::empty()).unwrap();
        buf[8] = 9;
        assert!(matches!(read_tensors(buf.as_slice()), Err(Error::Checkpoint(_))));
    }
}
