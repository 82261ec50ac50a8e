//! Parameter checkpoints.
//!
//! Byte layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes   "UNIMEMCK"
//! version    u32       1
//! count      u32       number of parameters
//! manifest   count ×   name_len u32, name bytes (UTF-8),
//!                      ndim u32, dims ndim × u64
//! data       count ×   product(dims) × f64, in manifest order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"UNIMEMCK";
pub const VERSION: u32 = 1;

/// Largest element count accepted for one tensor when reading.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn write_params<W: Write>(params: &Params, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for (_, t) in params.iter() {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<Params> {
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, "parameter count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let len = read_u32(&mut r, "name length")? as usize;
        if len > 4096 {
            return Err(Error::Checkpoint(format!("parameter {i}: name length {len} is implausible")));
        }
        let mut name = vec![0u8; len];
        read_exact(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint(format!("parameter {i}: name is not UTF-8")))?;
        let ndim = read_u32(&mut r, "ndim")? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("parameter `{name}`: {ndim} dimensions")));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut elements: u64 = 1;
        for _ in 0..ndim {
            let d = read_u64(&mut r, "dimension")?;
            elements = elements.saturating_mul(d);
            dims.push(d as usize);
        }
        if elements > MAX_ELEMENTS {
            return Err(Error::Checkpoint(format!("parameter `{name}` is too large")));
        }
        manifest.push((name, dims));
    }
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for (name, dims) in manifest {
        let n: usize = dims.iter().product();
        let mut buf = vec![0u8; n * 8];
        read_exact(&mut r, &mut buf, &name)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push(Tensor::new(dims, data)?);
        names.push(name);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
    }
    Params::from_parts(names, tensors)
}

pub fn save(params: &Params, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_params(params, std::io::BufWriter::new(file))
}

pub fn load(path: &Path) -> Result<Params> {
    let file = std::fs::File::open(path)?;
    read_params(std::io::BufReader::new(file))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}
