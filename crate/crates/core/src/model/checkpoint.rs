//! Binary checkpoints.
//!
//! Layout: magic `DDFR`, u32 version, u32 config length, config JSON, u32
//! tensor count, then per tensor: u32 name length, name, u32 rows, u32 cols,
//! rows·cols f32 values. All integers and floats are little-endian and the
//! tensors appear in lexicographic name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{DualModel, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DDFR";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in 32 bits")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("checkpoint is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn get_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b)
}

pub fn write_checkpoint<W: Write>(model: &DualModel<f32>, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(&mut w, CHECKPOINT_VERSION as usize)?;
    let cfg = serde_json::to_vec(&model.config).map_err(|e| Error::Format(e.to_string()))?;
    put_u32(&mut w, cfg.len())?;
    w.write_all(&cfg)?;
    put_u32(&mut w, model.params.len())?;
    for (_, name, t) in model.params.iter() {
        put_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, t.rows)?;
        put_u32(&mut w, t.cols)?;
        let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<DualModel<f32>> {
    if &get_bytes(&mut r, 4)?[..] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = get_u32(&mut r)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = get_u32(&mut r)?;
    let config: ModelConfig =
        serde_json::from_slice(&get_bytes(&mut r, n)?).map_err(|e| Error::Format(format!("bad config: {e}")))?;
    let count = get_u32(&mut r)?;
    let mut map = BTreeMap::new();
    let mut last: Option<String> = None;
    for _ in 0..count {
        let n = get_u32(&mut r)?;
        let name = String::from_utf8(get_bytes(&mut r, n)?).map_err(|_| Error::Format("bad tensor name".into()))?;
        if last.as_ref().is_some_and(|l| *l >= name) {
            return Err(Error::Format("tensors out of order".into()));
        }
        let (rows, cols) = (get_u32(&mut r)?, get_u32(&mut r)?);
        let bytes = get_bytes(&mut r, rows * cols * 4)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        map.insert(name.clone(), Tensor::from_vec(rows, cols, data));
        last = Some(name);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    DualModel::from_params(config, ParamStore::from_map(map))
}
