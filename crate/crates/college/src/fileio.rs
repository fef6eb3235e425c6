//! Little-endian binary read/write helpers for checkpoint and embedding
//! files.

use std::io::{Read, Write};

use crate::error::{CollegeError, Result};
use crate::tensor::Tensor;

pub(crate) fn write_u32(w: &mut impl Write, path: &str, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())
        .map_err(|e| CollegeError::io(path, e))
}

pub(crate) fn read_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| CollegeError::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn write_f64(w: &mut impl Write, path: &str, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())
        .map_err(|e| CollegeError::io(path, e))
}

pub(crate) fn read_f64(r: &mut impl Read, path: &str) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| CollegeError::io(path, e))?;
    Ok(f64::from_le_bytes(buf))
}

pub(crate) fn write_string(w: &mut impl Write, path: &str, s: &str) -> Result<()> {
    write_u32(w, path, s.len() as u32)?;
    w.write_all(s.as_bytes()).map_err(|e| CollegeError::io(path, e))
}

pub(crate) fn read_string(r: &mut impl Read, path: &str) -> Result<String> {
    let len = read_u32(r, path)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| CollegeError::io(path, e))?;
    String::from_utf8(buf).map_err(|e| CollegeError::format(path, e.to_string()))
}

pub(crate) fn write_tensor(w: &mut impl Write, path: &str, t: &Tensor) -> Result<()> {
    write_u32(w, path, t.rows() as u32)?;
    write_u32(w, path, t.cols() as u32)?;
    for v in t.data() {
        write_f64(w, path, *v)?;
    }
    Ok(())
}

pub(crate) fn read_tensor(r: &mut impl Read, path: &str) -> Result<Tensor> {
    let rows = read_u32(r, path)? as usize;
    let cols = read_u32(r, path)? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(read_f64(r, path)?);
    }
    Ok(Tensor::from_vec(rows, cols, data))
}

pub(crate) fn write_f32_slice(w: &mut impl Write, path: &str, vs: &[f32]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())
            .map_err(|e| CollegeError::io(path, e))?;
    }
    Ok(())
}

pub(crate) fn read_f32_vec(r: &mut impl Read, path: &str, n: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut buf).map_err(|e| CollegeError::io(path, e))?;
        out.push(f32::from_le_bytes(buf));
    }
    Ok(out)
}

pub(crate) fn expect_magic(r: &mut impl Read, path: &str, magic: &[u8; 8]) -> Result<()> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| CollegeError::io(path, e))?;
    if &buf != magic {
        return Err(CollegeError::format(
            path,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&buf),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    Ok(())
}
