//! Versioned checkpoint directory.
//!
//! ```text
//! models/
//!   registry.json      {"versions": [VersionEntry, ...]}
//!   ACTIVE             name of the active version
//!   v0001.idcm         checkpoint + v0001.idcm.json sidecar
//! ```
//!
//! Versions are never rewritten. `ACTIVE` only ever names a version whose file
//! passed a checksum verification, and is replaced by write-then-rename.

use std::path::{Path, PathBuf};

use idc_core::metrics::MetricsReport;
use idc_core::model::{
    load_checkpoint, parse_checkpoint, save_checkpoint, write_atomic, CheckpointMeta, Model,
};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VersionEntry {
    pub version: String,
    pub file: String,
    pub created_unix: u64,
    pub parent: Option<String>,
    pub crc32: u32,
    /// Held-out metrics of this version, when known.
    pub metrics: Option<MetricsReport>,
    #[serde(default)]
    pub corrections_included: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct RegistryFile {
    versions: Vec<VersionEntry>,
}

#[derive(Debug)]
pub struct ModelRegistry {
    dir: PathBuf,
    index: RegistryFile,
}

impl ModelRegistry {
    pub fn open(dir: &Path) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(dir).map_err(|e| ServiceError::io(dir, e))?;
        let path = dir.join("registry.json");
        let index = if path.exists() {
            let text = std::fs::read(&path).map_err(|e| ServiceError::io(&path, e))?;
            serde_json::from_slice(&text).map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))?
        } else {
            RegistryFile::default()
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
        })
    }

    pub fn versions(&self) -> &[VersionEntry] {
        &self.index.versions
    }

    pub fn entry(&self, version: &str) -> Option<&VersionEntry> {
        self.index.versions.iter().find(|v| v.version == version)
    }

    pub fn path_of(&self, version: &str) -> Option<PathBuf> {
        self.entry(version).map(|e| self.dir.join(&e.file))
    }

    fn write_index(&self) -> Result<(), ServiceError> {
        let mut json = serde_json::to_vec_pretty(&self.index).expect("index serializes");
        json.push(b'\n');
        write_atomic(&self.dir.join("registry.json"), &json).map_err(ServiceError::from)
    }

    /// Writes a new immutable version and records it in the index. Does not activate it.
    pub fn register(
        &mut self,
        model: &Model,
        meta: &CheckpointMeta,
        parent: Option<&str>,
        metrics: Option<MetricsReport>,
        corrections_included: usize,
    ) -> Result<VersionEntry, ServiceError> {
        let version = format!("v{:04}", self.index.versions.len() + 1);
        let file = format!("{version}.idcm");
        let path = self.dir.join(&file);
        if path.exists() {
            return Err(ServiceError::Internal(format!("{} already exists", path.display())));
        }
        let written = save_checkpoint(model, meta, &path)?;
        verify(&path)?;
        let entry = VersionEntry {
            version,
            file,
            created_unix: written.created_unix,
            parent: parent.map(str::to_string),
            crc32: written.crc32,
            metrics,
            corrections_included,
        };
        self.index.versions.push(entry.clone());
        self.write_index()?;
        Ok(entry)
    }

    pub fn active_version(&self) -> Result<Option<String>, ServiceError> {
        let path = self.dir.join("ACTIVE");
        match std::fs::read_to_string(&path) {
            Ok(s) => Ok(Some(s.trim().to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ServiceError::io(&path, e)),
        }
    }

    /// Points `ACTIVE` at `version` after re-verifying its checksum.
    pub fn activate(&self, version: &str) -> Result<(), ServiceError> {
        let path = self
            .path_of(version)
            .ok_or_else(|| ServiceError::NotFound(format!("model version {version} is not registered")))?;
        verify(&path)?;
        write_atomic(&self.dir.join("ACTIVE"), format!("{version}\n").as_bytes())?;
        Ok(())
    }

    pub fn load(&self, version: &str) -> Result<(Model, CheckpointMeta), ServiceError> {
        let path = self
            .path_of(version)
            .ok_or_else(|| ServiceError::NotFound(format!("model version {version} is not registered")))?;
        Ok(load_checkpoint(&path)?)
    }
}

fn verify(path: &Path) -> Result<(), ServiceError> {
    let bytes = std::fs::read(path).map_err(|e| ServiceError::io(path, e))?;
    parse_checkpoint(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use idc_core::model::{build_model, ModelConfig};

    #[test]
    fn register_activate_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::feature_file(4);
        let m = build_model(&cfg, 1).unwrap();
        let mut reg = ModelRegistry::open(dir.path()).unwrap();
        assert_eq!(reg.active_version().unwrap(), None);
        let e1 = reg.register(&m, &CheckpointMeta::new(&cfg), None, None, 0).unwrap();
        let e2 = reg.register(&m, &CheckpointMeta::new(&cfg), Some("v0001"), None, 3).unwrap();
        assert_eq!((e1.version.as_str(), e2.version.as_str()), ("v0001", "v0002"));
        reg.activate("v0002").unwrap();
        assert!(matches!(reg.activate("v0009"), Err(ServiceError::NotFound(_))));

        let reg = ModelRegistry::open(dir.path()).unwrap();
        assert_eq!(reg.active_version().unwrap().as_deref(), Some("v0002"));
        assert_eq!(reg.entry("v0002").unwrap().parent.as_deref(), Some("v0001"));
        let (loaded, _) = reg.load("v0002").unwrap();
        assert_eq!(loaded.tensor("head.out.weight"), m.tensor("head.out.weight"));
    }

    #[test]
    fn corrupt_version_cannot_be_activated() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::feature_file(4);
        let m = build_model(&cfg, 1).unwrap();
        let mut reg = ModelRegistry::open(dir.path()).unwrap();
        reg.register(&m, &CheckpointMeta::new(&cfg), None, None, 0).unwrap();
        reg.activate("v0001").unwrap();
        reg.register(&m, &CheckpointMeta::new(&cfg), None, None, 0).unwrap();
        let path = reg.path_of("v0002").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[50] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(reg.activate("v0002").is_err());
        assert_eq!(reg.active_version().unwrap().as_deref(), Some("v0001"));
    }
}
