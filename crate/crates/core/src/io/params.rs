//! Justifier parameter file.
//!
//! ```text
//! "JPRM"  u16 version
//! u32 grid_channels  u32 conv_channels  u32 hidden  u32 aux[3]  u64 n_weights
//! n_weights f64
//! ```
//!
//! Little-endian throughout; weights in declaration order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::justifier::{Dims, JustifierParams};

pub const PARAMS_MAGIC: &[u8; 4] = b"JPRM";
pub const PARAMS_VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 6 * 4 + 8;

pub fn write_params(path: &Path, params: &JustifierParams) -> Result<()> {
    let d = params.dims();
    let w = params.weights();
    let mut out = Vec::with_capacity(HEADER + w.len() * 8);
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    for v in [
        d.grid_channels,
        d.conv_channels,
        d.hidden,
        d.aux[0],
        d.aux[1],
        d.aux[2],
    ] {
        let v = u32::try_from(v)
            .map_err(|_| Error::InvalidParameter(format!("dimension {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(w.len() as u64).to_le_bytes());
    for x in w {
        out.extend_from_slice(&x.to_le_bytes());
    }
    super::write_atomic(path, &out)
}

pub fn read_params(path: &Path) -> Result<JustifierParams> {
    let bytes = std::fs::read(path)?;
    let err = |m: String| Error::Format {
        path: path.to_path_buf(),
        message: m,
    };
    if bytes.len() < HEADER {
        return Err(err(format!(
            "file too short for header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..4] != PARAMS_MAGIC {
        return Err(err("bad magic, expected JPRM".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PARAMS_VERSION {
        return Err(err(format!(
            "unsupported version {version}, expected {PARAMS_VERSION}"
        )));
    }
    let u32_at = |i: usize| {
        u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    let dims = Dims {
        grid_channels: u32_at(0),
        conv_channels: u32_at(1),
        hidden: u32_at(2),
        aux: [u32_at(3), u32_at(4), u32_at(5)],
    };
    let n = u64::from_le_bytes(bytes[30..38].try_into().expect("8 bytes")) as usize;
    if bytes.len() - HEADER != n.saturating_mul(8) {
        return Err(err(format!(
            "header declares {n} weights but payload has {} bytes",
            bytes.len() - HEADER
        )));
    }
    let weights = bytes[HEADER..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    JustifierParams::from_parts(dims, weights).map_err(|e| err(e.to_string()))
}
