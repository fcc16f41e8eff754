//! Versioned binary archive for captured cross-attention maps.
//!
//! Layout (all integers little-endian):
//! - magic `b"SKAT"`, version `u16` (currently 1)
//! - token count `u16`, then per token: byte length `u16` + UTF-8 bytes
//! - step count `u32`, then per step:
//!   - timestep `u32`, layer count `u16`
//!   - per layer: ndim `u8`, each dim `u32`, then the tensor as `f32`
//!     values in C order.
//!
//! Maps are captured as `f64` but stored as `f32`: the archive is a
//! diagnostic export, not a checkpoint.

use crate::denoiser::AttentionRecord;
use crate::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SKAT";
const VERSION: u16 = 1;

/// Decoded archive contents; tensors come back as the stored `f32`.
pub struct AttnArchive {
    pub tokens: Vec<String>,
    /// Per step: the diffusion timestep and one tensor per layer.
    pub steps: Vec<(usize, Vec<ArrayD<f32>>)>,
}

pub fn write_attention_archive(path: &Path, record: &AttentionRecord) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    w.write_u16::<LittleEndian>(record.tokens.len() as u16)?;
    for tok in &record.tokens {
        let bytes = tok.as_bytes();
        w.write_u16::<LittleEndian>(bytes.len() as u16)?;
        w.write_all(bytes)?;
    }
    w.write_u32::<LittleEndian>(record.steps.len() as u32)?;
    for step in &record.steps {
        w.write_u32::<LittleEndian>(step.t as u32)?;
        w.write_u16::<LittleEndian>(step.layers.len() as u16)?;
        for map in &step.layers {
            w.write_u8(map.ndim() as u8)?;
            for &d in map.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in map.iter() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_attention_archive(path: &Path) -> Result<AttnArchive> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not an attention archive".into()));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
    }
    let n_tokens = r.read_u16::<LittleEndian>()? as usize;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let len = r.read_u16::<LittleEndian>()? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        tokens.push(
            String::from_utf8(buf).map_err(|_| Error::Checkpoint("bad token string".into()))?,
        );
    }
    let n_steps = r.read_u32::<LittleEndian>()? as usize;
    let mut steps = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let t = r.read_u32::<LittleEndian>()? as usize;
        let n_layers = r.read_u16::<LittleEndian>()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let ndim = r.read_u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.read_u32::<LittleEndian>()? as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            layers.push(
                ArrayD::from_shape_vec(IxDyn(&dims), data)
                    .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))?,
            );
        }
        steps.push((t, layers));
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after archive".into()));
    }
    Ok(AttnArchive { tokens, steps })
}
