//! The raw "MMT1" tensor file format.
//!
//! Layout: magic bytes `MMT1`, u32 little-endian rank, `rank` u32
//! little-endian extents, then row-major 32-bit little-endian floats.
//! Used for images, saved parameters, and precomputed feature maps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MMT1";

pub fn write_mmt1<F: Scalar>(path: impl AsRef<Path>, t: &Tensor<F>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_mmt1_to(&mut w, t)
}

pub fn write_mmt1_to<F: Scalar>(w: &mut impl Write, t: &Tensor<F>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.as_f32().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_mmt1<F: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    let mut r = BufReader::new(File::open(&path)?);
    read_mmt1_from(&mut r).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.as_ref().display())),
        other => other,
    })
}

pub fn read_mmt1_from<F: Scalar>(r: &mut impl Read) -> Result<Tensor<F>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("bad magic {magic:?}, expected \"MMT1\"")));
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Data(format!("unsupported tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 4];
    for _ in 0..numel {
        r.read_exact(&mut buf)?;
        data.push(F::from_f32(f32::from_le_bytes(buf)));
    }
    Tensor::new(shape, data).map_err(|e| Error::Data(e.to_string()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
