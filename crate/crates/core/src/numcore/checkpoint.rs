//! Binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` entry count, then one
//! manifest record per tensor (`u32` name length, UTF-8 name, `u8` element
//! type, `u32` rank, `u64` dims, `u64` byte offset into the data section),
//! then a `u64` data-section length and the row-major little-endian arrays.
//! Optimizer moments go to a sibling file with the same layout whose entries
//! are `m/<name>` and `v/<name>` plus a one-element `step` tensor.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::NumError;

pub const MAGIC: &[u8; 8] = b"PWCKPT\0\x01";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn moments_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".moments");
    PathBuf::from(p)
}

pub fn write_tensors<W: Write>(mut w: W, entries: &[(String, &Tensor)]) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F64])?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
        offset += 8 * t.len() as u64;
    }
    w.write_all(&offset.to_le_bytes())?;
    for (_, t) in entries {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn bad(msg: impl Into<String>) -> NumError {
    NumError::Checkpoint(msg.into())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, NumError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic header"));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("non-UTF-8 tensor name"))?;
        let mut dtype = [0u8];
        r.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F64 {
            return Err(bad(format!("unsupported element type {}", dtype[0])));
        }
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let offset = read_u64(&mut r)?;
        manifest.push((name, shape, offset));
    }
    let total = read_u64(&mut r)? as usize;
    let mut data = vec![0u8; total];
    r.read_exact(&mut data)?;
    manifest
        .into_iter()
        .map(|(name, shape, offset)| {
            let n: usize = shape.iter().product();
            let start = offset as usize;
            let end = start + 8 * n;
            if end > data.len() {
                return Err(bad(format!("tensor {name} exceeds data section")));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok((name, Tensor::new(shape, values)?))
        })
        .collect()
}

/// Writes parameter values to `path` and optimizer state to its sibling.
pub fn save(store: &ParamStore, path: &Path) -> Result<(), NumError> {
    let values: Vec<(String, &Tensor)> = store.iter().map(|(n, p)| (n.to_string(), &p.value)).collect();
    let mut buf = Vec::new();
    write_tensors(&mut buf, &values)?;
    fs::write(path, buf)?;

    let step = Tensor::scalar(store.step as f64);
    let mut moments: Vec<(String, &Tensor)> = vec![("step".to_string(), &step)];
    for (n, p) in store.iter() {
        moments.push((format!("m/{n}"), &p.m));
        moments.push((format!("v/{n}"), &p.v));
    }
    let mut buf = Vec::new();
    write_tensors(&mut buf, &moments)?;
    fs::write(moments_path(path), buf)?;
    Ok(())
}

/// Loads values (and moments, when the sibling file exists) into an existing
/// store whose names and shapes must match.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<(), NumError> {
    let entries = read_tensors(fs::File::open(path)?)?;
    let mut loaded = ParamStore::new();
    for (name, t) in entries {
        loaded.insert(name, t)?;
    }
    store.load_values_from(&loaded)?;

    let mpath = moments_path(path);
    if mpath.exists() {
        for (name, t) in read_tensors(fs::File::open(mpath)?)? {
            if name == "step" {
                store.step = t.item() as u64;
            } else if let Some(rest) = name.strip_prefix("m/") {
                if let Some(p) = store.get_mut(rest) {
                    p.m = t;
                }
            } else if let Some(rest) = name.strip_prefix("v/") {
                if let Some(p) = store.get_mut(rest) {
                    p.v = t;
                }
            }
        }
    }
    Ok(())
}
