//! Experiment manifests: one structured text file that fully determines a
//! run.
//!
//! The manifest carries a single global seed; every stage derives its own
//! stream from (seed, stage name, index), so stages can rerun independently
//! without drifting. The manifest's digest — taken over its canonical
//! serialization, not the file bytes — names the run directory and is
//! embedded in every artifact the run produces.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::asv::{ArchitectureId, AsvTrainConfig};
use crate::attack::AttackConfig;
use crate::audio::SpectralConfig;
use crate::channel::ChannelParams;
use crate::ckpt::sha256_hex;
use crate::corpus::{SplitSpec, SynthCorpusConfig, MIN_UTTERANCE_SECS};
use crate::error::{Error, Result};
use crate::eval::Framework;
use crate::nrs::{LossConfig, LossKind, NrsConfig, NrsTrainConfig};
use crate::rng::derive_seed;

/// What audio the replay pairs are built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplaySource {
    /// Digital adversarial examples synthesized with the direct attack.
    BaselineAdversarial,
    /// Raw clean speech.
    Bonafide,
}

/// Where the corpus lives and how it is split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSection {
    /// Root of the `<speaker>/<utterance>.wav` tree.
    pub path: PathBuf,
    /// Generate this synthetic corpus at `path` when the tree is missing.
    pub synth: Option<SynthCorpusConfig>,
    pub splits: SplitSpec,
}

/// One verification system to train and evaluate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemSpec {
    pub id: String,
    pub architecture: ArchitectureId,
    /// Pinned checkpoint digest, verified when present.
    pub checkpoint_digest: Option<String>,
    pub train: AsvTrainConfig,
}

/// Replay-simulator architecture, loss, and training knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NrsSpec {
    pub replay_source: ReplaySource,
    /// Pinned checkpoint digest, verified when present.
    pub checkpoint_digest: Option<String>,
    pub arch: NrsConfig,
    pub loss: LossConfig,
    pub train: NrsTrainConfig,
}

/// What the evaluation stages run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationSpec {
    pub frameworks: Vec<Framework>,
    /// Attack trials per (framework, system) cell.
    pub trials: usize,
    /// Length the attack sources are center-cropped to, in seconds.
    pub attack_secs: f64,
}

/// Everything a run needs, in one serializable document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub version: String,
    /// Global seed; all stage seeds derive from it.
    pub seed: u64,
    pub spectral: SpectralConfig,
    pub channel: ChannelParams,
    pub corpus: CorpusSection,
    pub attack: AttackConfig,
    pub evaluation: EvaluationSpec,
    pub nrs: NrsSpec,
    pub systems: Vec<SystemSpec>,
}

impl ExperimentManifest {
    /// Desk-scale default experiment: a generated 16-speaker corpus, two toy
    /// systems, a small simulator, and 100 trials per cell.
    pub fn default_desk(seed: u64) -> Self {
        ExperimentManifest {
            version: "1".into(),
            seed,
            spectral: SpectralConfig::default(),
            channel: ChannelParams::default_desk(seed),
            corpus: CorpusSection {
                path: PathBuf::from("corpus"),
                synth: Some(SynthCorpusConfig {
                    seed,
                    ..SynthCorpusConfig::default()
                }),
                splits: SplitSpec::default(),
            },
            attack: AttackConfig {
                seed,
                ..AttackConfig::default()
            },
            evaluation: EvaluationSpec {
                frameworks: Framework::ALL.to_vec(),
                trials: 100,
                attack_secs: 0.5,
            },
            nrs: NrsSpec {
                replay_source: ReplaySource::BaselineAdversarial,
                checkpoint_digest: None,
                arch: NrsConfig {
                    depth: 3,
                    base_channels: 8,
                    channel_growth: 4,
                    ..NrsConfig::default()
                },
                loss: LossConfig::new(LossKind::MelL1),
                train: NrsTrainConfig {
                    max_epochs: 30,
                    patience: 5,
                    batch_size: 8,
                    crop_secs: 0.5,
                    ..NrsTrainConfig::default()
                },
            },
            systems: vec![
                SystemSpec {
                    id: "mel_net".into(),
                    architecture: ArchitectureId::MelNet,
                    checkpoint_digest: None,
                    train: AsvTrainConfig::default(),
                },
                SystemSpec {
                    id: "raw_net".into(),
                    architecture: ArchitectureId::RawNet,
                    checkpoint_digest: None,
                    train: AsvTrainConfig::default(),
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version.trim().is_empty() {
            return Err(Error::Manifest("version tag is empty".into()));
        }
        self.channel.validate().map_err(wrap("channel"))?;
        self.corpus.splits.validate().map_err(wrap("corpus.splits"))?;
        if let Some(synth) = &self.corpus.synth {
            synth.validate().map_err(wrap("corpus.synth"))?;
        }
        self.attack.validate().map_err(wrap("attack"))?;
        self.nrs.arch.validate().map_err(wrap("nrs.arch"))?;
        self.nrs.loss.validate().map_err(wrap("nrs.loss"))?;
        self.nrs.train.validate().map_err(wrap("nrs.train"))?;
        if self.systems.is_empty() {
            return Err(Error::Manifest("no systems declared".into()));
        }
        let mut ids: Vec<&str> = self.systems.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Manifest("duplicate system id".into()));
        }
        for s in &self.systems {
            if s.id.is_empty()
                || !s
                    .id
                    .chars()
                    .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
            {
                return Err(Error::Manifest(format!(
                    "system id `{}` must be lowercase [a-z0-9_]",
                    s.id
                )));
            }
        }
        if self.evaluation.trials == 0 {
            return Err(Error::Manifest("evaluation.trials must be positive".into()));
        }
        if self.evaluation.frameworks.is_empty() {
            return Err(Error::Manifest("no frameworks to evaluate".into()));
        }
        let mut fs = self.evaluation.frameworks.clone();
        fs.sort_by_key(|f| f.as_str());
        fs.dedup();
        if fs.len() != self.evaluation.frameworks.len() {
            return Err(Error::Manifest("duplicate framework".into()));
        }
        if self.evaluation.attack_secs < MIN_UTTERANCE_SECS {
            return Err(Error::Manifest(format!(
                "evaluation.attack_secs {} below the {} s utterance minimum",
                self.evaluation.attack_secs, MIN_UTTERANCE_SECS
            )));
        }
        Ok(())
    }

    /// Canonical serialization; the digest is taken over this, so two
    /// manifests with the same content share a digest no matter how their
    /// files were formatted.
    pub fn canonical_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Manifest(format!("serialize: {e}")))
    }

    /// Hex digest identifying this experiment.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.canonical_toml()?))
    }

    /// Seed for a named stage (and index within it).
    pub fn stage_seed(&self, stage: &str, idx: u64) -> u64 {
        derive_seed(self.seed, stage, idx)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.canonical_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ExperimentManifest = toml::from_str(&body)
            .map_err(|e| Error::Manifest(format!("parse {}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    /// Corpus root, resolved against the manifest's directory when relative.
    pub fn corpus_root(&self, manifest_dir: &Path) -> PathBuf {
        if self.corpus.path.is_absolute() {
            self.corpus.path.clone()
        } else {
            manifest_dir.join(&self.corpus.path)
        }
    }
}

fn wrap(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Manifest(format!("{section}: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_manifest_validates_and_digests_stably() {
        let m = ExperimentManifest::default_desk(7);
        m.validate().unwrap();
        let d1 = m.digest().unwrap();
        let d2 = m.digest().unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1.len(), 64);

        let mut other = ExperimentManifest::default_desk(7);
        other.evaluation.trials = 50;
        assert_ne!(other.digest().unwrap(), d1, "content changes move the digest");
        assert_ne!(
            ExperimentManifest::default_desk(8).digest().unwrap(),
            d1,
            "the global seed is part of the experiment identity"
        );
    }

    #[test]
    fn toml_roundtrip_preserves_the_digest() {
        let m = ExperimentManifest::default_desk(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("experiment.toml");
        m.save(&path).unwrap();
        let back = ExperimentManifest::load(&path).unwrap();
        assert_eq!(m.digest().unwrap(), back.digest().unwrap());

        // Reformatting the file (extra whitespace/comments) does not change
        // the canonical digest.
        let body = std::fs::read_to_string(&path).unwrap();
        let reformatted = format!("# a comment\n\n{}", body.replace("\n[", "\n\n["));
        let path2 = dir.path().join("reformatted.toml");
        std::fs::write(&path2, reformatted).unwrap();
        let back2 = ExperimentManifest::load(&path2).unwrap();
        assert_eq!(m.digest().unwrap(), back2.digest().unwrap());
    }

    #[test]
    fn stage_seeds_are_distinct_streams() {
        let m = ExperimentManifest::default_desk(7);
        let a = m.stage_seed("train-asv", 0);
        let b = m.stage_seed("train-nrs", 0);
        let c = m.stage_seed("train-asv", 1);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, m.stage_seed("train-asv", 0));
    }

    #[test]
    fn bad_manifests_are_rejected() {
        let mut m = ExperimentManifest::default_desk(1);
        m.systems.clear();
        assert!(matches!(m.validate(), Err(Error::Manifest(_))));

        let mut m = ExperimentManifest::default_desk(1);
        m.systems[1].id = "mel_net".into();
        assert!(m.validate().is_err());

        let mut m = ExperimentManifest::default_desk(1);
        m.systems[0].id = "Mel Net".into();
        assert!(m.validate().is_err());

        let mut m = ExperimentManifest::default_desk(1);
        m.evaluation.trials = 0;
        assert!(m.validate().is_err());

        let mut m = ExperimentManifest::default_desk(1);
        m.evaluation.attack_secs = 0.2;
        assert!(m.validate().is_err());

        let mut m = ExperimentManifest::default_desk(1);
        m.evaluation.frameworks = vec![Framework::Baseline, Framework::Baseline];
        assert!(m.validate().is_err());

        let mut m = ExperimentManifest::default_desk(1);
        m.attack.epsilon = -1.0;
        assert!(m.validate().is_err());

        let mut m = ExperimentManifest::default_desk(1);
        m.nrs.arch.depth = 0;
        assert!(m.validate().is_err());
    }
}
