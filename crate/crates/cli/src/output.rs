//! Output files: written once through a temporary file in the target
//! directory, then renamed into place.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;

use crate::error::CliError;

/// Where a command writes, and the metadata line every table carries.
pub struct Output {
    dir: PathBuf,
    meta: String,
}

impl Output {
    /// Creates `dir` if needed.
    pub fn new(dir: &Path, command: &str, hash: &str, seed: u64) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta: format!(
                "cvdiff {} command={command} config_sha256={hash} seed={seed}",
                env!("CARGO_PKG_VERSION")
            ),
        })
    }

    /// Comment lines for a table: the metadata line, then `extra`.
    pub fn comment(&self, extra: &[String]) -> Vec<String> {
        std::iter::once(self.meta.clone())
            .chain(extra.iter().cloned())
            .collect()
    }

    /// Runs `fill` on a buffered temporary file and renames it to `name`.
    pub fn write<F>(&self, name: &str, fill: F) -> Result<PathBuf, CliError>
    where
        F: FnOnce(&mut BufWriter<&mut NamedTempFile>) -> cvdiff::Result<()>,
    {
        let target = self.dir.join(name);
        let mut tmp = NamedTempFile::new_in(&self.dir)?;
        {
            let mut w = BufWriter::new(&mut tmp);
            fill(&mut w)?;
            w.flush()?;
        }
        tmp.as_file().sync_all()?;
        tmp.persist(&target).map_err(|e| CliError::Io(e.error))?;
        Ok(target)
    }
}
