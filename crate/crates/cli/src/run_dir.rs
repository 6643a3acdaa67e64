//! Run directories: every training or mining run gets a directory holding
//! the effective config echo, metrics CSVs, logs, and checkpoints.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Use `explicit` when given (tests and deterministic reruns), otherwise
    /// create `out/<command>-<unix_millis>`.
    pub fn create(explicit: Option<PathBuf>, command: &str) -> Result<Self> {
        let root = match explicit {
            Some(p) => p,
            None => {
                let millis = SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_millis();
                PathBuf::from("out").join(format!("{command}-{millis}"))
            }
        };
        std::fs::create_dir_all(&root)
            .with_context(|| format!("creating run dir {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_log(&self, name: &str, lines: &[String]) -> Result<()> {
        std::fs::write(self.path(name), lines.join("\n") + "\n")?;
        Ok(())
    }
}

/// Deterministic CSV: fixed header, rows formatted by the caller.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 32 + header.len() + 1);
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
