//! Append-only CSV logs whose first line is `# ` followed by a JSON header.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::{CliError, CliResult};

pub struct CsvLog {
    path: PathBuf,
    file: File,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

impl CsvLog {
    /// Starts a new log; an existing file is never overwritten.
    pub fn create(path: &Path, header: &Value, columns: &str) -> CliResult<Self> {
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        writeln!(file, "# {header}\n{columns}").map_err(|e| io_err(path, e))?;
        Ok(CsvLog {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Reopens an existing log for more rows.
    pub fn append(path: &Path) -> CliResult<Self> {
        let file = OpenOptions::new().append(true).open(path).map_err(|e| io_err(path, e))?;
        Ok(CsvLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn row(&mut self, line: &str) -> CliResult<()> {
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| io_err(&self.path, e))
    }
}

/// The JSON header of a log.
pub fn read_header(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let first = text.lines().next().unwrap_or("");
    let json = first
        .strip_prefix("# ")
        .ok_or_else(|| CliError::Runtime(format!("{}: no header line", path.display())))?;
    serde_json::from_str(json).map_err(|e| CliError::Runtime(format!("{}: header: {e}", path.display())))
}

/// Data rows of a log: everything after the header and column lines,
/// skipping `#` comments.
pub fn read_rows(path: &Path) -> CliResult<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

/// One numeric column of a log by header name.
pub fn read_column(path: &Path, name: &str) -> CliResult<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let cols: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let idx = cols
        .iter()
        .position(|c| *c == name)
        .ok_or_else(|| CliError::Runtime(format!("{}: no column {name}", path.display())))?;
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .nth(idx)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::Runtime(format!("{}: bad row {l:?}", path.display())))
        })
        .collect()
}
