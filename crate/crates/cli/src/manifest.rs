//! Run manifest: content hashes and timings of every produced artifact,
//! used both for provenance and for stage caching.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the configuration sections the stage depends on.
    pub config_hash: String,
    /// Wall-clock duration of the stage (s); 0 when served from cache.
    pub seconds: f64,
    /// File name -> content hash for every artifact of the stage.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_bytes(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(data);
    format!("{:x}", h.finalize())
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let data = std::fs::read(path)
        .map_err(|e| CliError::config(format!("cannot hash {}: {e}", path.display())))?;
    Ok(sha256_bytes(&data))
}

impl Manifest {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self {
                version: 1,
                stages: BTreeMap::new(),
            });
        }
        crate::formats::read_json(&path)
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        crate::formats::write_json(&dir.join(MANIFEST_FILE), self)
    }

    /// True when the stage was already produced from the same configuration
    /// and every recorded artifact is still present and unmodified.
    pub fn stage_is_fresh(&self, stage: &str, config_hash: &str, dir: &Path) -> bool {
        match self.stages.get(stage) {
            Some(rec) if rec.config_hash == config_hash => rec
                .files
                .iter()
                .all(|(name, hash)| sha256_file(&dir.join(name)).is_ok_and(|h| h == *hash)),
            _ => false,
        }
    }

    pub fn record_stage(
        &mut self,
        stage: &str,
        config_hash: &str,
        seconds: f64,
        files: &[PathBuf],
        dir: &Path,
    ) -> CliResult<()> {
        let mut map = BTreeMap::new();
        for f in files {
            let name = f
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| CliError::config("artifact path has no file name"))?;
            map.insert(name.to_string(), sha256_file(f)?);
        }
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                config_hash: config_hash.to_string(),
                seconds,
                files: map,
            },
        );
        self.save(dir)
    }

    /// All files referenced anywhere in the manifest.
    pub fn all_files(&self) -> BTreeMap<&str, &str> {
        self.stages
            .values()
            .flat_map(|r| r.files.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .collect()
    }
}
