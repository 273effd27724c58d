//! Run manifest: config hash, per-phase wall time, and content hashes of
//! every emitted artifact, appended as phases complete.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    #[serde(default)]
    pub config_hash: String,
    /// Phase name -> record, ordered for stable serialization.
    #[serde(default)]
    pub phases: BTreeMap<String, PhaseRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub wall_time_s: f64,
    /// Artifact path (relative to the run dir) -> sha256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
    /// Free-form facts a phase wants to pin (row counts, chosen lambda, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, serde_json::Value>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

impl RunManifest {
    pub fn load_or_default(run_dir: &Path) -> Result<RunManifest> {
        let path = run_dir.join("manifest.json");
        if path.exists() {
            Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
        } else {
            Ok(RunManifest::default())
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(run_dir)?;
        std::fs::write(
            run_dir.join("manifest.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

/// Collects artifacts and timing for one phase, then folds them into the
/// manifest on `finish`.
pub struct PhaseRecorder {
    run_dir: PathBuf,
    phase: &'static str,
    started: Instant,
    artifacts: Vec<PathBuf>,
    notes: BTreeMap<String, serde_json::Value>,
}

impl PhaseRecorder {
    pub fn start(run_dir: &Path, phase: &'static str) -> Self {
        Self {
            run_dir: run_dir.to_path_buf(),
            phase,
            started: Instant::now(),
            artifacts: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    /// Directory this phase writes into: `<run_dir>/<phase>/`.
    pub fn phase_dir(&self) -> PathBuf {
        self.run_dir.join(self.phase)
    }

    pub fn record(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    /// Record every regular file below `dir`, recursively.
    pub fn record_tree(&mut self, dir: &Path) -> Result<()> {
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            let mut entries: Vec<_> =
                std::fs::read_dir(&d)?.collect::<std::io::Result<Vec<_>>>()?;
            entries.sort_by_key(|e| e.file_name());
            for entry in entries {
                let path = entry.path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    self.artifacts.push(path);
                }
            }
        }
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.notes.insert(
            key.to_string(),
            serde_json::to_value(value).expect("serializable note"),
        );
    }

    pub fn finish(self, config_bytes: &[u8]) -> Result<()> {
        let mut manifest = RunManifest::load_or_default(&self.run_dir)?;
        manifest.config_hash = sha256_hex(config_bytes);
        let mut artifacts = BTreeMap::new();
        for path in &self.artifacts {
            let rel = path
                .strip_prefix(&self.run_dir)
                .unwrap_or(path)
                .to_string_lossy()
                .into_owned();
            artifacts.insert(rel, sha256_hex(&std::fs::read(path)?));
        }
        manifest.phases.insert(
            self.phase.to_string(),
            PhaseRecord {
                wall_time_s: self.started.elapsed().as_secs_f64(),
                artifacts,
                notes: self.notes,
            },
        );
        manifest.save(&self.run_dir)
    }
}
