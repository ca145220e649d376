//! Output files. Every file starts with the same provenance block.

use crate::error::{CliError, CliResult};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
}

impl Provenance {
    pub fn new(config_sha256: String, seed: Option<u64>) -> Self {
        Self { tool: "twostage".into(), version: env!("CARGO_PKG_VERSION").into(), config_sha256, seed }
    }

    /// Comment lines for CSV and text files.
    pub fn comment(&self) -> String {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        format!("# tool: {} {}\n# config_sha256: {}\n# seed: {}\n", self.tool, self.version, self.config_sha256, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize)]
struct Table<'a, T: Serialize> {
    provenance: &'a Provenance,
    rows: &'a [T],
}

pub struct Output {
    pub dir: PathBuf,
    pub format: Format,
    pub provenance: Provenance,
}

impl Output {
    pub fn new(dir: &Path, format: Format, provenance: Provenance) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), format, provenance })
    }

    fn write(&self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    /// Rows of flat records, as CSV or as a JSON array.
    pub fn table<T: Serialize>(&self, stem: &str, rows: &[T]) -> CliResult<PathBuf> {
        match self.format {
            Format::Csv => {
                let mut w = csv::Writer::from_writer(self.provenance.comment().into_bytes());
                for r in rows {
                    w.serialize(r).map_err(|e| CliError::Numerical(format!("{stem}: {e}")))?;
                }
                let bytes = w.into_inner().map_err(|e| CliError::Numerical(format!("{stem}: {e}")))?;
                self.write(&format!("{stem}.csv"), &bytes)
            }
            Format::Json => self.json(&format!("{stem}.json"), &Table { provenance: &self.provenance, rows }),
        }
    }

    /// A structured document, always JSON.
    pub fn document<T: Serialize>(&self, name: &str, body: &T) -> CliResult<PathBuf> {
        self.json(name, &Document { provenance: &self.provenance, body })
    }

    pub fn text(&self, name: &str, body: &str) -> CliResult<PathBuf> {
        self.write(name, format!("{}{body}", self.provenance.comment()).as_bytes())
    }

    /// A JSON value that carries its own provenance.
    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(format!("{name}: {e}")))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }
}
