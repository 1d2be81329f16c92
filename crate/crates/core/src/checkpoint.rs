//! Single-file parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "RBXCKPT\0"
//! format_version   u32
//! config_len       u32      followed by the ModelConfig as UTF-8 JSON
//! array_count      u32
//! per array:
//!   name_len       u32      followed by the UTF-8 name
//!   dtype          u8       1 = f64
//!   ndim           u32      followed by ndim × u64 dimensions
//!   byte_len       u64      followed by the row-major raw bytes
//! ```
//!
//! Arrays beyond the model's own parameters (for example optimizer state,
//! stored under an `optim/` prefix) are carried as extras.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Tensor};

pub const MAGIC: &[u8; 8] = b"RBXCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub extras: Vec<Tensor>,
}

pub fn encode(params: &ModelParams, extras: &[Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let config = serde_json::to_vec(params.config())?;
    let io = |e| Error::Format(format!("encode: {e}"));
    out.write_all(MAGIC).map_err(io)?;
    out.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
    out.write_u32::<LittleEndian>(config.len() as u32)
        .map_err(io)?;
    out.write_all(&config).map_err(io)?;
    let arrays: Vec<&Tensor> = params.tensors().iter().chain(extras).collect();
    out.write_u32::<LittleEndian>(arrays.len() as u32)
        .map_err(io)?;
    for t in arrays {
        out.write_u32::<LittleEndian>(t.name.len() as u32)
            .map_err(io)?;
        out.write_all(t.name.as_bytes()).map_err(io)?;
        out.write_u8(DTYPE_F64).map_err(io)?;
        out.write_u32::<LittleEndian>(t.shape.len() as u32)
            .map_err(io)?;
        for &d in &t.shape {
            out.write_u64::<LittleEndian>(d as u64).map_err(io)?;
        }
        out.write_u64::<LittleEndian>((t.data.len() * 8) as u64)
            .map_err(io)?;
        for &v in &t.data {
            out.write_f64::<LittleEndian>(v).map_err(io)?;
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor::new(bytes);
    let bad = |what: &str| Error::Format(format!("truncated or corrupt checkpoint ({what})"));
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic).map_err(|_| bad("magic"))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = cur.read_u32::<LittleEndian>().map_err(|_| bad("version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let config_len = cur.read_u32::<LittleEndian>().map_err(|_| bad("config"))? as usize;
    let config_bytes = take(&mut cur, config_len).ok_or_else(|| bad("config"))?;
    let config: ModelConfig = serde_json::from_slice(config_bytes)?;
    let count = cur.read_u32::<LittleEndian>().map_err(|_| bad("count"))?;
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = cur.read_u32::<LittleEndian>().map_err(|_| bad("name"))? as usize;
        let name = std::str::from_utf8(take(&mut cur, name_len).ok_or_else(|| bad("name"))?)
            .map_err(|_| bad("name"))?
            .to_string();
        let dtype = cur.read_u8().map_err(|_| bad("dtype"))?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!(
                "array {name}: unsupported dtype {dtype}"
            )));
        }
        let ndim = cur.read_u32::<LittleEndian>().map_err(|_| bad("ndim"))?;
        let shape = (0..ndim)
            .map(|_| cur.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|_| bad("shape"))?;
        let byte_len = cur.read_u64::<LittleEndian>().map_err(|_| bad("length"))? as usize;
        if byte_len != shape.iter().product::<usize>() * 8 {
            return Err(Error::Format(format!(
                "array {name}: length does not match shape"
            )));
        }
        let raw = take(&mut cur, byte_len).ok_or_else(|| bad("data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        arrays.push(Tensor { name, shape, data });
    }
    let n_params = config.param_specs().len();
    if arrays.len() < n_params {
        return Err(Error::Format("missing parameter arrays".into()));
    }
    let extras = arrays.split_off(n_params);
    let params = ModelParams::from_tensors(config, arrays)?;
    Ok(Checkpoint { params, extras })
}

fn take<'a>(cur: &mut Cursor<&'a [u8]>, len: usize) -> Option<&'a [u8]> {
    let start = cur.position() as usize;
    let all: &'a [u8] = cur.get_ref();
    let slice = all.get(start..start.checked_add(len)?)?;
    cur.set_position((start + len) as u64);
    Some(slice)
}

pub fn save(path: &Path, params: &ModelParams, extras: &[Tensor]) -> Result<()> {
    let bytes = encode(params, extras)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    save(path, params, &[])
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    load(path).map(|c| c.params)
}
