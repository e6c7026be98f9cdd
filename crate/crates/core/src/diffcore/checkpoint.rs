//! Binary parameter checkpoints.
//!
//! Layout (all integers and floats little-endian), version 1:
//!
//! ```text
//! magic      8 bytes   "LKAEPARM"
//! version    u32       1
//! meta_len   u32       byte length of the metadata block
//! meta       UTF-8     "key=value\n" lines, keys sorted
//! count      u32       number of parameters
//! repeated count times, in name order:
//!   name_len u32, name UTF-8
//!   trainable u8 (0 or 1)
//!   lr_scale f64
//!   rows u32, cols u32
//!   values   rows*cols f64, row-major
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{DiffError, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"LKAEPARM";
pub const VERSION: u32 = 1;

pub type Metadata = BTreeMap<String, String>;

pub fn write_checkpoint<W: Write>(
    mut w: W,
    store: &ParamStore,
    meta: &Metadata,
) -> Result<(), DiffError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let mut meta_text = String::new();
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(DiffError::Checkpoint(format!("metadata entry {k:?} is not encodable")));
        }
        meta_text.push_str(k);
        meta_text.push('=');
        meta_text.push_str(v);
        meta_text.push('\n');
    }
    write_u32(&mut w, meta_text.len())?;
    w.write_all(meta_text.as_bytes())?;
    write_u32(&mut w, store.len())?;
    for (name, p) in store.iter() {
        write_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[u8::from(p.trainable)])?;
        w.write_all(&p.lr_scale.to_le_bytes())?;
        write_u32(&mut w, p.value.rows())?;
        write_u32(&mut w, p.value.cols())?;
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore, Metadata), DiffError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DiffError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(DiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let meta_text = read_string(&mut r, meta_len)?;
    let mut meta = Metadata::new();
    for line in meta_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DiffError::Checkpoint(format!("malformed metadata line {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, name_len)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let lr_scale = read_f64(&mut r)?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(read_f64(&mut r)?);
        }
        let value = Tensor::new(rows, cols, data)?;
        store.insert(name.clone(), value, flag[0] != 0);
        store.set_lr_scale(&name, lr_scale)?;
    }
    Ok((store, meta))
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<(), DiffError> {
    let v = u32::try_from(v).map_err(|_| DiffError::Checkpoint("length overflows u32".into()))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, DiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, DiffError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String, DiffError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| DiffError::Checkpoint("invalid UTF-8".into()))
}
