//! Run manifests: what was run, on which inputs, and what it produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::Command;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub role: String,
    pub path: PathBuf,
    /// SHA-256 of the file, with any volatile columns blanked first.
    pub sha256: String,
    /// Table columns holding wall-clock measurements.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub volatile_columns: Vec<String>,
}

impl Artifact {
    pub fn hash(role: &str, path: &Path, volatile_columns: &[&str]) -> CliResult<Self> {
        let volatile_columns: Vec<String> = volatile_columns.iter().map(|c| c.to_string()).collect();
        Ok(Self {
            role: role.to_string(),
            path: path.to_path_buf(),
            sha256: canonical_sha256(path, &volatile_columns)?,
            volatile_columns,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub seed: Option<u64>,
    /// The fully resolved command, defaults included.
    pub command: Command,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    /// Wall-clock seconds, measured around the sampling or fitting loop only.
    pub timings: BTreeMap<String, f64>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::data("manifest", e))?;
        fs::write(path, text + "\n").map_err(|e| CliError::data(path.display(), e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::data(path.display(), e))?;
        let probe: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::data(path.display(), e))?;
        let found = probe.get("format_version").and_then(|v| v.as_u64());
        if found != Some(MANIFEST_FORMAT_VERSION as u64) {
            return Err(CliError::Data(format!(
                "{}: unsupported manifest format version {found:?} (expected {MANIFEST_FORMAT_VERSION})",
                path.display()
            )));
        }
        serde_json::from_value(probe).map_err(|e| CliError::data(path.display(), e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a file; for tables with volatile columns those cells are emptied
/// before hashing so that reruns compare equal on everything else.
pub fn canonical_sha256(path: &Path, volatile_columns: &[String]) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::data(path.display(), e))?;
    if volatile_columns.is_empty() {
        return Ok(sha256_hex(&bytes));
    }
    Ok(sha256_hex(&blank_columns(&bytes, volatile_columns)?))
}

fn blank_columns(table: &[u8], columns: &[String]) -> CliResult<Vec<u8>> {
    let mut reader = csv::Reader::from_reader(table);
    let headers = reader.headers().map_err(|e| CliError::data("table header", e))?.clone();
    let blank: Vec<bool> = headers.iter().map(|h| columns.iter().any(|c| c == h)).collect();
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(&headers).map_err(|e| CliError::data("table", e))?;
    for record in reader.records() {
        let record = record.map_err(|e| CliError::data("table row", e))?;
        let row: Vec<&str> = record
            .iter()
            .zip(&blank)
            .map(|(cell, &b)| if b { "" } else { cell })
            .collect();
        writer.write_record(&row).map_err(|e| CliError::data("table", e))?;
    }
    writer.into_inner().map_err(|e| CliError::data("table", e))
}

/// `dir/stem.suffix` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blanking_ignores_timings_only() {
        let a = b"gamma,alpha,t_sd\n1,0.5,0.123\n5,0.25,0.456\n";
        let b = b"gamma,alpha,t_sd\n1,0.5,9.9\n5,0.25,1.0\n";
        let c = b"gamma,alpha,t_sd\n1,0.5,9.9\n5,0.26,1.0\n";
        let cols = vec!["t_sd".to_string()];
        let h = |t: &[u8]| sha256_hex(&blank_columns(t, &cols).unwrap());
        assert_eq!(h(a), h(b));
        assert_ne!(h(a), h(c));
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(sibling(Path::new("out/run.jsonl"), "stats.csv"), PathBuf::from("out/run.stats.csv"));
        assert_eq!(sibling(Path::new("x"), "manifest.json"), PathBuf::from("x.manifest.json"));
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
