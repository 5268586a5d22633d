//! Binary checkpoint: magic, a JSON header, then named `f64` blocks.
//!
//! ```text
//! "TPCKPT01" | u64 header_len | header (JSON, UTF-8)
//! repeated: u32 name_len | name | u32 ndim | u64 dims… | f64 values…
//! ```
//! All integers and floats are little-endian. Optimizer accumulators, when
//! present, follow the parameters as blocks named `opt/<param>`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams};
use crate::autodiff::Tensor;

const MAGIC: &[u8; 8] = b"TPCKPT01";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Completed epochs.
    pub epoch: usize,
    /// Free-form settings stored alongside, e.g. the training config.
    pub knobs: serde_json::Value,
    /// Optimizer accumulators, one per parameter in parameter order.
    pub opt: Option<Vec<Tensor>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    epoch: usize,
    knobs: serde_json::Value,
    blocks: usize,
    has_opt: bool,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_block(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
    for &d in t.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in t.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_block(r: &mut impl Read) -> Result<(String, Tensor), ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    let io = |e: std::io::Error| ModelError::Checkpoint(format!("truncated block: {e}"));
    let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if n > 4096 {
        return Err(bad("block name too long"));
    }
    let mut name = vec![0; n];
    r.read_exact(&mut name).map_err(io)?;
    let name = String::from_utf8(name).map_err(|_| bad("block name is not UTF-8"))?;
    let ndim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if ndim > 8 {
        return Err(bad("too many dimensions"));
    }
    let shape = (0..ndim)
        .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io)?;
    let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("block too large"))?;
    let mut data = vec![0.0; len];
    r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
    let t = Tensor::new(shape, data)?;
    Ok((name, t))
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let p = &ckpt.params;
    if let Some(opt) = &ckpt.opt {
        if opt.len() != p.tensors().len() {
            return Err(ModelError::Checkpoint("optimizer state does not match parameters".into()));
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model: p.config().clone(),
        epoch: ckpt.epoch,
        knobs: ckpt.knobs.clone(),
        blocks: p.tensors().len(),
        has_opt: ckpt.opt.is_some(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    let err = io_err(path);
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(&err)?);
        w.write_all(MAGIC).map_err(&err)?;
        w.write_u64::<LittleEndian>(json.len() as u64).map_err(&err)?;
        w.write_all(&json).map_err(&err)?;
        for (name, t) in p.named() {
            write_block(&mut w, name, t).map_err(&err)?;
        }
        if let Some(opt) = &ckpt.opt {
            for (name, t) in p.names().iter().zip(opt) {
                write_block(&mut w, &format!("opt/{name}"), t).map_err(&err)?;
            }
        }
        w.flush().map_err(&err)?;
    }
    std::fs::rename(&tmp, path).map_err(&err)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| ModelError::Checkpoint(format!("{} is too short", path.display())))?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let n = r.read_u64::<LittleEndian>().map_err(io_err(path))? as usize;
    if n > 1 << 24 {
        return Err(ModelError::Checkpoint("header too large".into()));
    }
    let mut json = vec![0; n];
    r.read_exact(&mut json).map_err(io_err(path))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let named = (0..header.blocks).map(|_| read_block(&mut r)).collect::<Result<Vec<_>, _>>()?;
    let params = ModelParams::from_named(header.model, named)?;
    let opt = if header.has_opt {
        let mut opt = Vec::with_capacity(params.tensors().len());
        for (name, t) in params.named() {
            let (got, acc) = read_block(&mut r)?;
            if got != format!("opt/{name}") || acc.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!("optimizer block {got:?} does not match {name}")));
            }
            opt.push(acc);
        }
        Some(opt)
    } else {
        None
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io_err(path))? != 0 {
        return Err(ModelError::Checkpoint("trailing bytes after last block".into()));
    }
    Ok(Checkpoint {
        params,
        epoch: header.epoch,
        knobs: header.knobs,
        opt,
    })
}
