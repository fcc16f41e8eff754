//! Versioned checkpoint container: a JSON metadata block (config echo,
//! skeleton description, schedule, text-encoder id — whatever the caller
//! serializes) followed by named f64 parameter tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"SKCK"
//! version  u16 (currently 1)
//! meta_len u32, meta: UTF-8 JSON
//! n_params u32
//! per parameter, sorted by name:
//!   name_len u16, name: UTF-8
//!   ndim u8, dims: u32 each
//!   data: f64 LE, C order
//! ```

use crate::nn::ParamStore;
use crate::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SKCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    meta: &serde_json::Value,
    params: &ParamStore,
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
    let meta_bytes = serde_json::to_vec(meta)
        .map_err(|e| Error::Checkpoint(format!("metadata encode: {e}")))?;
    w.write_u32::<LittleEndian>(meta_bytes.len() as u32)?;
    w.write_all(&meta_bytes)?;
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, tensor) in params.iter() {
        if name.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("parameter name too long: {name}")));
        }
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(tensor.ndim() as u8)?;
        for &d in tensor.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in tensor.as_standard_layout().iter() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let meta_len = r.read_u32::<LittleEndian>()? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("metadata decode: {e}")))?;
    let n_params = r.read_u32::<LittleEndian>()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("parameter name: {e}")))?;
        let ndim = r.read_u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.read_f64::<LittleEndian>()?);
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
        if params.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter '{name}'")));
        }
        params.insert(&name, tensor);
    }
    Ok(Checkpoint { meta, params })
}

pub fn save_checkpoint(path: &Path, meta: &serde_json::Value, params: &ParamStore) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut file, meta, params)?;
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let ckpt = read_checkpoint(&mut file)?;
    let mut rest = [0u8; 1];
    if file.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok(ckpt)
}
