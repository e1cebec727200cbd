//! Run-directory manifest: which stages completed under which configuration
//! digest. A stage may run only when every upstream stage completed under
//! the same digest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Run,
    Parse,
    Eval,
    Partition,
    Emit,
    Report,
    Outliers,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Run => "run",
            Stage::Parse => "parse",
            Stage::Eval => "eval",
            Stage::Partition => "partition",
            Stage::Emit => "emit",
            Stage::Report => "report",
            Stage::Outliers => "outliers",
        }
    }

    /// Direct upstream stages.
    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Run => &[Stage::Ingest],
            Stage::Parse => &[Stage::Run],
            Stage::Eval => &[Stage::Ingest, Stage::Parse],
            Stage::Partition => &[Stage::Ingest, Stage::Parse],
            Stage::Emit => &[Stage::Partition],
            Stage::Report => &[Stage::Ingest, Stage::Eval],
            Stage::Outliers => &[Stage::Eval],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Stage-gating violations, mapped to dedicated exit codes by the binary.
#[derive(Debug)]
pub enum GateError {
    MissingStage(String),
    DigestMismatch(String),
}

impl fmt::Display for GateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateError::MissingStage(stage) => write!(f, "missing upstream stage: {stage}"),
            GateError::DigestMismatch(stage) => {
                write!(f, "config digest mismatch at stage: {stage} (re-run it with the current config)")
            }
        }
    }
}

impl std::error::Error for GateError {}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_digest: String,
    pub completed_unix: u64,
}

/// The manifest file at the run-directory root.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn load(run_dir: &Path) -> Result<RunManifest> {
        let path = Self::path(run_dir);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .with_context(|| format!("cannot parse manifest {}", path.display())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(RunManifest::default()),
            Err(e) => Err(e).with_context(|| format!("cannot read manifest {}", path.display())),
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(run_dir)?;
        let path = Self::path(run_dir);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n")
            .with_context(|| format!("cannot write manifest {}", path.display()))
    }

    /// Errors unless every dependency of `stage` completed under `digest`.
    pub fn check_dependencies(&self, stage: Stage, digest: &str) -> Result<(), GateError> {
        for dependency in stage.dependencies() {
            match self.stages.get(dependency.name()) {
                None => return Err(GateError::MissingStage(dependency.name().to_string())),
                Some(record) if record.config_digest != digest => {
                    return Err(GateError::DigestMismatch(dependency.name().to_string()))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn mark_complete(&mut self, stage: Stage, digest: &str) {
        self.run_id = digest.chars().take(12).collect();
        self.stages.insert(
            stage.name().to_string(),
            StageRecord {
                config_digest: digest.to_string(),
                completed_unix: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            },
        );
    }

    pub fn is_complete(&self, stage: Stage, digest: &str) -> bool {
        self.stages
            .get(stage.name())
            .is_some_and(|record| record.config_digest == digest)
    }
}
