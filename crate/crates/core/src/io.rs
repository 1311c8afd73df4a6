//! Tensor files: a flat little-endian binary container and a JSON form.
//!
//! Binary layout: the 6 bytes `AMSPT1`, four `u32` dims (b, c, h, w), then
//! `b·c·h·w` `f64` values, all little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 6] = b"AMSPT1";

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    for d in t.shape().dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} does not fit in u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated tensor header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected AMSPT1")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Format("truncated tensor header".into()))?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let shape = Shape::from(dims);
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape} overflows")))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != numel * 8 {
        return Err(Error::Format(format!(
            "shape {shape} needs {} bytes of data, found {}",
            numel * 8,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut v = Vec::with_capacity(30 + t.len() * 8);
    write_tensor(&mut v, t).expect("writing to a Vec cannot fail for in-range dims");
    v
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, to_bytes(t))?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    read_tensor(fs::File::open(path)?)
}

#[derive(Serialize, Deserialize)]
struct JsonTensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

/// `{"shape":[b,c,h,w],"data":[...]}`.
pub fn tensor_to_json(t: &Tensor) -> Result<String> {
    Ok(serde_json::to_string(&JsonTensor {
        shape: t.shape().dims(),
        data: t.data().to_vec(),
    })?)
}

pub fn tensor_from_json(s: &str) -> Result<Tensor> {
    let j: JsonTensor = serde_json::from_str(s)?;
    Tensor::from_vec(j.shape, j.data)
}
