//! Dataset manifests: a JSON list of container files with split assignments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::GroupKeys;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!(
                "unknown split `{s}` (train, validation, test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub split: Split,
    #[serde(default)]
    pub group_keys: GroupKeys,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub recordings: Vec<ManifestEntry>,
    #[serde(skip)]
    base: PathBuf,
}

impl Manifest {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        Manifest {
            recordings: Vec::new(),
            base: base.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn push(&mut self, path: impl Into<PathBuf>, split: Split, group_keys: GroupKeys) {
        self.recordings.push(ManifestEntry {
            path: path.into(),
            split,
            group_keys,
        });
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base.join(&entry.path)
        }
    }

    /// Resolved paths of one split, in manifest order.
    pub fn paths(&self, split: Split) -> Vec<PathBuf> {
        self.recordings
            .iter()
            .filter(|e| e.split == split)
            .map(|e| self.resolve(e))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new(dir.path());
        m.push("a.slpf", Split::Train, GroupKeys::new());
        m.push("b.slpf", Split::Test, GroupKeys::new());
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.paths(Split::Test), vec![dir.path().join("b.slpf")]);
        assert!(back.paths(Split::Validation).is_empty());
        assert!("VAL".parse::<Split>().is_ok());
        assert!("dev".parse::<Split>().is_err());
    }
}
