//! Parameter checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! offset 0   4 bytes  magic "FMPV"
//! offset 4   u32      format version (1)
//! offset 8   u64      number of parameters n
//! offset 16  n x f64  parameter values
//! ```

use std::fs;
use std::path::Path;

use super::ParamVector;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FMPV";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_params(params: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamVector> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Decode(format!("checkpoint too short: {} bytes", bytes.len())));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Decode("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Decode(format!("unsupported checkpoint version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != n * 8 {
        return Err(Error::Decode(format!(
            "checkpoint declares {n} values but carries {} bytes",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ParamVector::new(values))
}

pub fn write_checkpoint(path: &Path, params: &ParamVector) -> Result<()> {
    fs::write(path, encode_params(params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamVector> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}
