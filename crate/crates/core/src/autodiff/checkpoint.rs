//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     4 bytes  "S2ST"
//! version   u32      1
//! meta_len  u32, then meta_len bytes of UTF-8 metadata (e.g. a config)
//! count     u32
//! count × { name_len u32, name bytes, dtype u8, rank u32, rank × u64 dims }
//! raw values of every tensor in header order, LE f64 or f32
//! ```

use std::io::{self, Read, Write};

use super::Tensor;

const MAGIC: &[u8; 4] = b"S2ST";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn from_code(c: u8) -> io::Result<Self> {
        match c {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            _ => Err(bad(format!("unknown dtype code {}", c))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Writes `tensors` with `dtype`. `F32` narrows values; `F64` is bit-exact.
pub fn write_checkpoint<W: Write>(w: &mut W, meta: &str, tensors: &[(String, Tensor)], dtype: DType) -> io::Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    write_u32(w, meta.len() as u32)?;
    w.write_all(meta.as_bytes())?;
    write_u32(w, tensors.len() as u32)?;
    for (name, t) in tensors {
        write_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[dtype.code()])?;
        write_u32(w, t.rank() as u32)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for (_, t) in tensors {
        match dtype {
            DType::F64 => {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            DType::F32 => {
                for v in t.data() {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> io::Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {:?}", magic)));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {}", version)));
    }
    let meta_len = read_u32(r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta = String::from_utf8(meta).map_err(|e| bad(e.to_string()))?;
    let count = read_u32(r)? as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let n = read_u32(r)? as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let dtype = DType::from_code(code[0])?;
        let rank = read_u32(r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let d = u64::from_le_bytes(b) as usize;
            if d == 0 {
                return Err(bad(format!("tensor {} has a zero dimension", name)));
            }
            dims.push(d);
        }
        headers.push((name, dtype, dims));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, dtype, dims) in headers {
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        match dtype {
            DType::F64 => {
                let mut b = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut b)?;
                    data.push(f64::from_le_bytes(b));
                }
            }
            DType::F32 => {
                let mut b = [0u8; 4];
                for _ in 0..n {
                    r.read_exact(&mut b)?;
                    data.push(f32::from_le_bytes(b) as f64);
                }
            }
        }
        tensors.push((name, Tensor::new(dims, data)));
    }
    Ok(Checkpoint { meta, tensors })
}
