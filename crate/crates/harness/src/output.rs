//! Output directory plumbing shared by every command.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use mvacon_core::config::RunConfig;

use crate::error::{IoContext, Result};

/// Creates `dir`, writes the fully materialized config to `config.json`
/// and returns the config hash.
pub fn prepare(dir: &Path, cfg: &RunConfig) -> Result<String> {
    fs::create_dir_all(dir).at(dir)?;
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()? + "\n").at(&path)?;
    Ok(cfg.hash()?)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).at(path)
}

/// Line-oriented text file; every line reaches the file in one write call,
/// so an interrupted run never leaves a partial row.
pub struct LineFile {
    file: File,
    path: PathBuf,
}

impl LineFile {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            file: File::create(path).at(path)?,
            path: path.to_owned(),
        })
    }

    /// Starts with `# config <hash>` followed by `header`.
    pub fn csv(path: &Path, hash: &str, header: &str) -> Result<Self> {
        let mut f = Self::create(path)?;
        f.line(&format!("# config {hash}"))?;
        f.line(header)?;
        Ok(f)
    }

    pub fn line(&mut self, text: &str) -> Result<()> {
        let mut buf = String::with_capacity(text.len() + 1);
        buf.push_str(text);
        buf.push('\n');
        self.file.write_all(buf.as_bytes()).at(&self.path)?;
        self.file.flush().at(&self.path)
    }
}

/// Loads a run config; `None` yields the defaults.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::from_json(&fs::read_to_string(p).at(p)?)?),
        None => Ok(RunConfig::default()),
    }
}

/// Reads the CSV rows of a file written by [`LineFile::csv`], skipping the
/// hash comment and header.
pub fn read_csv_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).at(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect())
}
