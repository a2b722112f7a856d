//! On-disk formats: line-delimited JSON records, binary attention-stack and
//! parameter files, and JSON/CSV reports. Every writer replaces its target
//! atomically.

mod params;
mod records;
mod report;
mod stacks;

use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub use params::{read_params, write_params, PARAMS_MAGIC, PARAMS_VERSION};
pub use records::{parse_records, read_records, sidecar_path, write_records};
pub use report::{write_csv, write_json};
pub use stacks::{read_stacks, write_stacks, STACK_MAGIC, STACK_VERSION};

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
