//! `RAET` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RAET" | version: u32 | count: u32
//! per entry: name_len: u16 | name: utf-8 | dtype: u8 | rank: u8 | extents: u64 × rank | payload
//! ```
//!
//! dtype 0 stores f32 values, dtype 1 stores f64 values. Entries are written
//! in lexicographic name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RAET";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

pub type Checkpoint = BTreeMap<String, Tensor>;

pub fn write_to(w: &mut impl Write, entries: &Checkpoint, dtype: DType) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len()).map_err(|_| Error::Format("too many entries".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[dtype as u8])?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Format(format!("rank too large for {name}")))?;
        w.write_all(&[rank])?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        match dtype {
            DType::F32 => t.data().iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_from(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(r)?;
    let mut out = Checkpoint::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let mut hdr = [0u8; 2];
        r.read_exact(&mut hdr)?;
        let width = match hdr[0] {
            0 => 4,
            1 => 8,
            d => return Err(Error::Format(format!("unknown dtype {d} for `{name}`"))),
        };
        let mut shape = Vec::with_capacity(hdr[1] as usize);
        for _ in 0..hdr[1] {
            let mut e = [0u8; 8];
            r.read_exact(&mut e)?;
            shape.push(u64::from_le_bytes(e) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * width];
        r.read_exact(&mut raw)?;
        let data: Vec<f64> = if width == 4 {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        out.insert(name, Tensor::new(&shape, data)?);
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save(path: &Path, entries: &Checkpoint) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_to(&mut f, entries, DType::F64)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_from(&mut f)
}
