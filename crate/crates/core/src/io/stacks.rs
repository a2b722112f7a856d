//! Attention-stack container.
//!
//! ```text
//! "ATNS"  u16 version  u32 count
//! per stack: u16 layers  u16 heads  u16 tokens  u16 image_tokens
//!            layers*heads*tokens*tokens f32, (layer, head, source, target)
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::data::AttentionStack;
use crate::error::{Error, Result};

pub const STACK_MAGIC: &[u8; 4] = b"ATNS";
pub const STACK_VERSION: u16 = 1;

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn write_stacks<'a>(
    path: &Path,
    stacks: impl IntoIterator<Item = &'a AttentionStack>,
) -> Result<()> {
    let stacks: Vec<&AttentionStack> = stacks.into_iter().collect();
    let count = u32::try_from(stacks.len()).map_err(|_| format_err(path, "too many stacks"))?;
    let mut out = Vec::new();
    out.extend_from_slice(STACK_MAGIC);
    out.extend_from_slice(&STACK_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for s in stacks {
        for dim in [s.layers(), s.heads(), s.tokens(), s.image_tokens()] {
            let d = u16::try_from(dim)
                .map_err(|_| format_err(path, format!("dimension {dim} exceeds u16")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.reserve(s.weights().len() * 4);
        for &w in s.weights() {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
    }
    super::write_atomic(path, &out)
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(format_err(
                self.path,
                format!(
                    "truncated {what}: need {n} bytes at offset {}, file has {}",
                    self.at,
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Reads every stack; sizes must account for the file length exactly.
pub fn read_stacks(path: &Path) -> Result<Vec<AttentionStack>> {
    let bytes = std::fs::read(path)?;
    let mut c = Cursor {
        path,
        bytes: &bytes,
        at: 0,
    };
    if c.take(4, "magic")? != STACK_MAGIC {
        return Err(format_err(path, "bad magic, expected ATNS"));
    }
    let version = c.u16("version")?;
    if version != STACK_VERSION {
        return Err(format_err(
            path,
            format!("unsupported version {version}, expected {STACK_VERSION}"),
        ));
    }
    let count = c.u32("record count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let what = format!("stack {i} header");
        let (l, h, d, k) = (c.u16(&what)?, c.u16(&what)?, c.u16(&what)?, c.u16(&what)?);
        let (l, h, d, k) = (l as usize, h as usize, d as usize, k as usize);
        let n = l * h * d * d;
        let payload = c.take(n * 4, &format!("stack {i} payload"))?;
        let weights = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push(AttentionStack::from_raw(l, h, d, k, weights));
    }
    if c.at != bytes.len() {
        return Err(format_err(
            path,
            format!("{} trailing bytes after {count} stacks", bytes.len() - c.at),
        ));
    }
    Ok(out)
}
