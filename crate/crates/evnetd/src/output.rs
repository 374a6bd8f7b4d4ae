use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Destination directory plus console verbosity.
pub struct Output {
    dir: PathBuf,
    quiet: bool,
}

impl Output {
    pub fn new(dir: &Path, quiet: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), quiet })
    }

    /// CSV writer with LF line endings.
    pub fn csv(&self, name: &str) -> Result<csv::Writer<File>> {
        let path = self.dir.join(name);
        csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&path)
            .with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

/// Shortest round-trip form; exponent notation for very small or large magnitudes.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}
