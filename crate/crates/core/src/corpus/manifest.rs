use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_dataset, Dataset, DatasetSpec};
use crate::error::{Error, Result};

/// One raw dataset: its spec plus the JSONL file holding its records.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub path: PathBuf,
    #[serde(flatten)]
    pub spec: DatasetSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub datasets: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    /// Loads every listed dataset in manifest order.
    pub fn load(&self, base: &Path) -> Result<Vec<Dataset>> {
        self.datasets
            .iter()
            .map(|entry| {
                let path = if entry.path.is_absolute() {
                    entry.path.clone()
                } else {
                    base.join(&entry.path)
                };
                Ok(Dataset {
                    spec: entry.spec.clone(),
                    examples: load_dataset(&path, &entry.spec)?,
                })
            })
            .collect()
    }
}

/// Reads a manifest and loads its datasets.
pub fn load_manifest(path: &Path) -> Result<Vec<Dataset>> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    DatasetManifest::read(path)?.load(base)
}
