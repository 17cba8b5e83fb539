//! Results ledger, the per-dataset comparison tables, and patch overlays.

mod overlay;
mod table;

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{CatxError, Result};
use crate::eval::MetricsReport;
use crate::train::RUN_FORMAT_VERSION;

pub use overlay::{load_image, render_overlay, OverlaySpec, OverlayStyle};
pub use table::{ExpvitCell, PosthocCell, ResultsTable, TableRow, DEFAULT_FRACS};

/// Appends one record as a JSON line.
pub fn append_ledger(path: &Path, report: &MetricsReport) -> Result<()> {
    report.validate()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(report)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Reads every record; a missing ledger reads as empty.
pub fn read_ledger(path: &Path) -> Result<Vec<MetricsReport>> {
    let f = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(CatxError::Ingestion {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| CatxError::format(path, format!("line {}: {e}", i + 1)))?;
        let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != RUN_FORMAT_VERSION {
            return Err(CatxError::Migration {
                path: path.to_path_buf(),
                found,
                expected: RUN_FORMAT_VERSION,
            });
        }
        out.push(serde_json::from_value(value)?);
    }
    Ok(out)
}
