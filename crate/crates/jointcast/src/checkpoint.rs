//! Checkpoint serialization.
//!
//! Layout: the magic string "JCKPT1", a manifest (little-endian u32 entry
//! count; per entry a u32 name length, the UTF-8 name, a u32 rank, and one
//! u32 extent per dimension), then each entry's data as raw little-endian
//! f32 values in manifest order. Optimizer moments ride along under their
//! `<name>.m1` / `<name>.m2` keys.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::store::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"JCKPT1";

pub fn save(store: &ParameterStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let entries: Vec<(&str, &Tensor)> = store.iter().collect();
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in &entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &ext in &t.shape {
            w.write_all(&(ext as u32).to_le_bytes())?;
        }
    }
    for (_, t) in &entries {
        for &v in &t.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn load(path: &Path) -> Result<ParameterStore> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Validation(format!(
            "not a checkpoint: bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Validation(format!("checkpoint entry name not UTF-8: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        manifest.push((name, shape));
    }
    let mut store = ParameterStore::new();
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        store.put(&name, Tensor::new(shape, data)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Validation(
            "checkpoint has trailing bytes after declared data".into(),
        ));
    }
    Ok(store)
}
