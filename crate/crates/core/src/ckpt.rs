//! Persisted model artifacts: JSON checkpoints with content digests.
//!
//! Every checkpoint embeds the digest of the manifest that produced it, so a
//! run directory can refuse artifacts from a different experiment. JSON
//! serialization round-trips floating-point values bitwise, making stored
//! models byte-faithful to the trained ones.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asv::{Arch, EmbedderConfig, SpeakerEmbedder, VerificationThreshold};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::nrs::{LossConfig, NrsEpochStats, NrsModel};
use crate::scalar::Scalar;

/// Hex-encoded SHA-256 of a byte string.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    let mut h = Sha256::new();
    h.update(bytes.as_ref());
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Digest of an ordered list of string keys (for dataset identity).
pub fn digest_keys<'a>(keys: impl IntoIterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for k in keys {
        h.update(k.as_bytes());
        h.update([0u8]);
    }
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Serialize a value as JSON at `path`.
pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let body = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Checkpoint(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Load a JSON artifact written by [`save_json`].
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let body = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&body)
        .map_err(|e| Error::Checkpoint(format!("parse {}: {e}", path.display())))
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let body = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(body))
}

/// Fail with a diagnostic when an artifact belongs to a different manifest.
pub fn require_manifest_match(found: &str, expected: &str, what: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!(
            "{what} was produced by manifest {found}, this run uses {expected}"
        )))
    }
}

/// A trained, calibrated verification system.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AsvCheckpoint<S: Scalar> {
    pub manifest_digest: String,
    pub system_id: String,
    pub config: EmbedderConfig,
    pub threshold: VerificationThreshold,
    pub holdout_eer: f64,
    pub loss_history: Vec<f64>,
    pub arch: Arch,
    pub params: ParamSet<S>,
}

impl<S: Scalar> AsvCheckpoint<S> {
    /// Reassemble the embedder these weights belong to.
    pub fn embedder(&self) -> Result<SpeakerEmbedder<S>> {
        SpeakerEmbedder::from_parts(self.config.clone(), self.params.clone(), self.arch.clone())
    }
}

/// A trained replay simulator plus its training record. The adversarial
/// discriminators are training-time scaffolding and are not persisted.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct NrsCheckpoint<S: Scalar> {
    pub manifest_digest: String,
    pub loss: LossConfig,
    /// Identity of the replay-pair dataset the simulator was fitted on.
    pub dataset_digest: String,
    pub identity_val_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub history: Vec<NrsEpochStats>,
    pub model: NrsModel<S>,
}
