//! Output files with provenance: every artifact embeds the tool version and
//! the config hash so a result can always be traced back to its inputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Version of the JSON output schema.
pub const SCHEMA_VERSION: u32 = 1;

pub struct OutputWriter {
    dir: PathBuf,
    config_hash: String,
}

impl OutputWriter {
    pub fn new(dir: &Path, config_hash: String) -> Result<Self> {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config_hash,
        })
    }

    /// Wraps a payload with schema version, tool version and config hash,
    /// then writes pretty JSON.
    pub fn write_json<T: Serialize>(&self, name: &str, payload: &T) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct Envelope<'a, T> {
            schema_version: u32,
            tool_version: &'a str,
            config_sha256: &'a str,
            #[serde(flatten)]
            payload: &'a T,
        }
        let path = self.dir.join(name);
        let body = serde_json::to_string_pretty(&Envelope {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION,
            config_sha256: &self.config_hash,
            payload,
        })?;
        fs::write(&path, body + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Prepends a provenance comment line to CSV content.
    pub fn write_csv(&self, name: &str, csv_body: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let header = format!(
            "# tool=truncmix/{TOOL_VERSION} config_sha256={}\n",
            self.config_hash
        );
        fs::write(&path, header + csv_body)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
