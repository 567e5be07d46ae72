//! Run manifests: everything needed to reproduce a run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use recon_core::config::TrainConfig;
use recon_core::data::{sidecar_path, CORPUS_VERSION};
use recon_core::model::CHECKPOINT_VERSION;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const PARTITIONS_FILE: &str = "partitions.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRef {
    pub path: PathBuf,
    pub sha256: String,
    /// Digest of the JSON sidecar, when there is one.
    pub sidecar_sha256: Option<String>,
}

impl CorpusRef {
    /// Records the canonical path so a manifest can be replayed from any directory.
    pub fn hash(path: &Path) -> Result<Self, CliError> {
        let path = fs::canonicalize(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let sidecar = sidecar_path(&path);
        Ok(Self {
            sha256: file_digest(&path)?,
            sidecar_sha256: if sidecar.exists() {
                Some(file_digest(&sidecar)?)
            } else {
                None
            },
            path,
        })
    }

    /// Fails when the file on disk no longer matches the recorded digests.
    pub fn verify(&self) -> Result<(), CliError> {
        let now = Self::hash(&self.path)?;
        if now.sha256 != self.sha256 || now.sidecar_sha256 != self.sidecar_sha256 {
            return Err(CliError::Usage(format!(
                "{} changed since the manifest was written",
                self.path.display()
            )));
        }
        Ok(())
    }
}

/// Paths relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub initial_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub epochs: PathBuf,
    pub timings: PathBuf,
    pub partitions: PathBuf,
    pub summary: PathBuf,
}

impl Default for Artifacts {
    fn default() -> Self {
        Self {
            initial_checkpoint: "checkpoints/initial.rcmd".into(),
            best_checkpoint: "checkpoints/best.rcmd".into(),
            final_checkpoint: "checkpoints/final.rcmd".into(),
            epochs: EPOCHS_FILE.into(),
            timings: TIMINGS_FILE.into(),
            partitions: PARTITIONS_FILE.into(),
            summary: SUMMARY_FILE.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub recon: String,
    pub corpus_format: u32,
    pub checkpoint_format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            recon: env!("CARGO_PKG_VERSION").to_string(),
            corpus_format: CORPUS_VERSION,
            checkpoint_format: CHECKPOINT_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub corpus: CorpusRef,
    pub val_corpus: Option<CorpusRef>,
    pub artifacts: Artifacts,
    pub versions: Versions,
}

impl RunManifest {
    pub fn new(config: TrainConfig, corpus: CorpusRef, val_corpus: Option<CorpusRef>) -> Self {
        Self {
            seed: config.seed,
            config,
            corpus,
            val_corpus,
            artifacts: Artifacts::default(),
            versions: Versions::default(),
        }
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path)
            .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Usage(format!("bad manifest {}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Short digest of the config and corpus contents, used to name run directories.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.corpus.sha256.as_bytes());
        if let Some(v) = &self.val_corpus {
            h.update(v.sha256.as_bytes());
        }
        hex(&h.finalize()[..4])
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}
