//! Dataset manifest: JSON Lines, one `{image_path, caption}` record per
//! line, image paths relative to the manifest file.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_path: String,
    pub caption: String,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub base_dir: PathBuf,
}

impl Manifest {
    /// Parse and validate: every image path must resolve, captions must be
    /// non-empty.
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        let base_dir = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| {
                Error::format(format!("manifest line {}: {e}", lineno + 1))
            })?;
            if rec.caption.trim().is_empty() {
                return Err(Error::contract(format!(
                    "manifest line {}: empty caption",
                    lineno + 1
                )));
            }
            if !base_dir.join(&rec.image_path).is_file() {
                return Err(Error::contract(format!(
                    "manifest line {}: image {} not found",
                    lineno + 1,
                    rec.image_path
                )));
            }
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::contract("manifest has no records"));
        }
        Ok(Manifest { records, base_dir })
    }

    pub fn write(path: &Path, records: &[ManifestRecord]) -> Result<()> {
        let mut out = String::new();
        for rec in records {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.base_dir.join(&self.records[index].image_path)
    }
}
