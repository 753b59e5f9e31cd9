//! Run manifest: which stages completed under which config hash, which
//! artifacts they produced, and how long they took. Artifact digests make
//! integrity checkable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub artifacts: Vec<ArtifactRecord>,
    pub elapsed_secs: f64,
    pub completed_at: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(sha256_bytes(&bytes))
}

impl RunManifest {
    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path_in(dir);
        if !path.exists() {
            return Ok(RunManifest::default());
        }
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(Self::path_in(dir), text)?;
        Ok(())
    }

    /// A stage is current when it completed under the same config hash.
    pub fn is_current(&self, stage: &str, config_hash: &str) -> bool {
        self.stages
            .get(stage)
            .is_some_and(|s| s.config_hash == config_hash)
    }

    pub fn require_stage(&self, stage: &str, config_hash: &str) -> Result<&StageRecord> {
        self.stages
            .get(stage)
            .filter(|s| s.config_hash == config_hash)
            .ok_or_else(|| Error::MissingStage(stage.to_string()))
    }

    /// Record a completed stage, hashing each artifact file.
    pub fn record_stage(
        &mut self,
        dir: &Path,
        stage: &str,
        config_hash: &str,
        artifacts: &[PathBuf],
        elapsed_secs: f64,
    ) -> Result<()> {
        let mut records = Vec::with_capacity(artifacts.len());
        for a in artifacts {
            let rel = a
                .strip_prefix(dir)
                .map(|p| p.to_string_lossy().into_owned())
                .unwrap_or_else(|_| a.to_string_lossy().into_owned());
            records.push(ArtifactRecord {
                path: rel,
                sha256: sha256_file(a)?,
            });
        }
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                config_hash: config_hash.to_string(),
                artifacts: records,
                elapsed_secs,
                completed_at: chrono::Utc::now().to_rfc3339(),
            },
        );
        self.config_hash = config_hash.to_string();
        self.save(dir)
    }

    /// Every referenced artifact must exist and hash to its recorded value.
    pub fn verify_artifacts(&self, dir: &Path) -> Result<()> {
        for (stage, record) in &self.stages {
            for a in &record.artifacts {
                let path = dir.join(&a.path);
                if !path.exists() {
                    return Err(Error::Artifact(format!(
                        "stage '{stage}': missing artifact {}",
                        a.path
                    )));
                }
                let actual = sha256_file(&path)?;
                if actual != a.sha256 {
                    return Err(Error::Artifact(format!(
                        "stage '{stage}': artifact {} hash mismatch",
                        a.path
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn record_verify_and_detect_tampering() {
        let dir = tempdir().unwrap();
        let art = dir.path().join("a.txt");
        std::fs::write(&art, b"artifact body").unwrap();
        let mut m = RunManifest::default();
        m.record_stage(dir.path(), "inject", "hash1", &[art.clone()], 0.5)
            .unwrap();
        assert!(m.is_current("inject", "hash1"));
        assert!(!m.is_current("inject", "hash2"));
        assert!(m.require_stage("train", "hash1").is_err());
        m.verify_artifacts(dir.path()).unwrap();

        std::fs::write(&art, b"tampered").unwrap();
        assert!(matches!(
            m.verify_artifacts(dir.path()),
            Err(Error::Artifact(_))
        ));
    }

    #[test]
    fn manifest_roundtrips() {
        let dir = tempdir().unwrap();
        let art = dir.path().join("x.bin");
        std::fs::write(&art, b"x").unwrap();
        let mut m = RunManifest::default();
        m.record_stage(dir.path(), "train", "h", &[art], 1.25).unwrap();
        let loaded = RunManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
    }
}
