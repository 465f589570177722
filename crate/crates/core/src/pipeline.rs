//! End-to-end experiment orchestration: one manifest in, corpus splits,
//! trained systems, a replay simulator, attack artifacts, and evaluation
//! reports out.
//!
//! A run lives in a directory named by the manifest digest and is built in
//! sequential stages (`prepare-data`, `train-asv`, `gen-replay-pairs`,
//! `train-nrs`, `attack`, `evaluate`, `report`). Every persisted artifact
//! embeds the digest of the manifest that produced it: stages skip work that
//! is already on disk for this manifest and refuse artifacts written by a
//! different one. A stage whose upstream artifacts are missing fails with an
//! error naming the stage to run first.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asv::{
    calibrate_threshold, decide, train_embedder, SpeakerEmbedder, Trial, TrialLabel, TrialList,
    TrainUtterance,
};
use crate::attack::{ensemble_pgd, SurrogateModel};
use crate::audio::{load_wav, save_wav_32, Waveform, SAMPLE_RATE};
use crate::channel::{generate_paired_dataset, PairedReplayDataset, ReplayPair};
use crate::ckpt::{
    digest_keys, file_digest, load_json, require_manifest_match, save_json, AsvCheckpoint,
    NrsCheckpoint,
};
use crate::corpus::{generate_corpus, prepare_corpus, CorpusIndex, Split, SynthCorpusConfig};
use crate::error::{Error, Result};
use crate::eval::{
    emit_report, evaluate_attack, surrogates_for, synthesize_attacks, AttackPair, AttackPath,
    EvalSystem, EvaluationRun, Framework, ReportPaths, TrialOutcome,
};
use crate::manifest::{ExperimentManifest, ReplaySource};
use crate::nrs::{AsvLossResources, LossConfig, LossKind};
use crate::rng::{derive_seed, rng_for};
use crate::scalar::Scalar;
use crate::F;

pub const STAGE_PREPARE_DATA: &str = "prepare-data";
pub const STAGE_TRAIN_ASV: &str = "train-asv";
pub const STAGE_GEN_REPLAY_PAIRS: &str = "gen-replay-pairs";
pub const STAGE_TRAIN_NRS: &str = "train-nrs";
pub const STAGE_ATTACK: &str = "attack";
pub const STAGE_EVALUATE: &str = "evaluate";
pub const STAGE_REPORT: &str = "report";

/// How many passes over the attack set the pair builder may take before
/// giving up on filling the trial count with impostor pairs.
const MAX_PAIR_ROUNDS: u64 = 20;

/// Filesystem layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path, digest: &str) -> Self {
        let prefix = &digest[..16.min(digest.len())];
        RunPaths {
            root: out_dir.join(prefix),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.toml")
    }

    pub fn corpus_index(&self) -> PathBuf {
        self.root.join("corpus").join("index.csv")
    }

    pub fn corpus_stamp(&self) -> PathBuf {
        self.root.join("corpus").join("stamp.json")
    }

    pub fn asv_checkpoint(&self, system_id: &str) -> PathBuf {
        self.root.join("asv").join(format!("{system_id}.json"))
    }

    pub fn replay_dir(&self) -> PathBuf {
        self.root.join("replay")
    }

    pub fn replay_index(&self) -> PathBuf {
        self.replay_dir().join("pairs.csv")
    }

    pub fn replay_meta(&self) -> PathBuf {
        self.replay_dir().join("meta.json")
    }

    pub fn nrs_checkpoint(&self) -> PathBuf {
        self.root.join("nrs").join("model.json")
    }

    pub fn attack_pairs(&self) -> PathBuf {
        self.root.join("attack").join("pairs.csv")
    }

    pub fn attack_pairs_stamp(&self) -> PathBuf {
        self.root.join("attack").join("pairs_meta.json")
    }

    pub fn attack_cell_dir(&self, framework: Framework, system_id: &str) -> PathBuf {
        self.root
            .join("attack")
            .join(framework.as_str())
            .join(system_id)
    }

    pub fn attack_records(&self, framework: Framework, system_id: &str) -> PathBuf {
        self.attack_cell_dir(framework, system_id).join("records.json")
    }

    pub fn eval_runs(&self) -> PathBuf {
        self.root.join("eval").join("runs.json")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn ablation_dir(&self) -> PathBuf {
        self.root.join("ablation")
    }

    pub fn ablation_nrs(&self, kind: LossKind) -> PathBuf {
        self.ablation_dir().join(format!("nrs_{}.json", kind.as_str()))
    }

    pub fn ablation_report(&self) -> PathBuf {
        self.ablation_dir().join("report.json")
    }

    pub fn ablation_csv(&self) -> PathBuf {
        self.ablation_dir().join("ablation.csv")
    }
}

/// Digest stamp accompanying artifacts whose main body is not JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageStamp {
    manifest_digest: String,
}

/// What the replay-pair generation stage produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayPairsMeta {
    pub manifest_digest: String,
    pub replay_source: ReplaySource,
    /// Identity of the source utterances (order-sensitive key digest).
    pub dataset_digest: String,
    pub n_train: usize,
    pub n_val: usize,
}

/// One row of the persisted replay-pair index.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReplayPairRow {
    clean_path: String,
    replayed_path: String,
    split: String,
    trial_seed: u64,
}

/// One attack trial's data sources, by utterance key.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackPairRow {
    pub trial_id: usize,
    pub source_speaker: String,
    pub source_utterance: String,
    /// Center-crop offset into the source, in samples.
    pub crop_start: usize,
    pub crop_len: usize,
    pub enroll_speaker: String,
    pub enroll_utterance: String,
}

/// One persisted adversarial example and its synthesis stats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackTrialRecord {
    pub trial_id: usize,
    /// Adversarial waveform file, relative to the records file.
    pub wav: String,
    pub iterations_used: usize,
    pub succeeded: bool,
    /// Final per-surrogate scores, in `surrogate_kinds` order.
    pub final_scores: Vec<f64>,
    pub perturbation_linf: f64,
}

/// All synthesized attacks for one (framework, system) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRecords {
    pub manifest_digest: String,
    pub framework: Framework,
    pub system_id: String,
    /// Which surrogate each `final_scores` column belongs to.
    pub surrogate_kinds: Vec<String>,
    pub trials: Vec<AttackTrialRecord>,
}

/// The evaluation stage's persisted output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRuns {
    pub manifest_digest: String,
    pub runs: Vec<EvaluationRun>,
}

/// One cell of the attack-side loss ablation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub loss: LossKind,
    pub system_id: String,
    pub n_trials: usize,
    pub digital_rate: f64,
    pub ota_rate: f64,
    pub identity_val_loss: f64,
    pub best_val_loss: f64,
}

/// Replayed-path white-box success per simulator training loss, desk-scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub manifest_digest: String,
    pub n_trials: usize,
    /// Loss-major, system-minor.
    pub cells: Vec<AblationCell>,
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn utterance_key(index: &CorpusIndex, idx: usize) -> String {
    let u = &index.utterances[idx];
    format!("{}/{}", u.speaker_id, u.utterance_id)
}

/// Order-insensitive identity of a split's utterances.
fn split_digest(index: &CorpusIndex, split: Split) -> String {
    let mut keys: Vec<String> = index
        .split_ids(split)
        .iter()
        .map(|&i| utterance_key(index, i))
        .collect();
    keys.sort();
    digest_keys(keys.iter().map(String::as_str))
}

fn key_map(index: &CorpusIndex) -> BTreeMap<(&str, &str), usize> {
    index
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| ((u.speaker_id.as_str(), u.utterance_id.as_str()), i))
        .collect()
}

/// A staged experiment run rooted at `out_dir/<digest prefix>`.
#[derive(Debug)]
pub struct Pipeline {
    manifest: ExperimentManifest,
    digest: String,
    corpus_root: PathBuf,
    paths: RunPaths,
}

impl Pipeline {
    /// Bind a manifest to its run directory, creating the directory and its
    /// canonical manifest copy on first use. `manifest_dir` anchors the
    /// manifest's relative corpus path.
    pub fn new(
        manifest: ExperimentManifest,
        manifest_dir: &Path,
        out_dir: &Path,
    ) -> Result<Self> {
        manifest.validate()?;
        let digest = manifest.digest()?;
        let paths = RunPaths::new(out_dir, &digest);
        std::fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;
        let copy = paths.manifest();
        if copy.exists() {
            let found = ExperimentManifest::load(&copy)?;
            require_manifest_match(&found.digest()?, &digest, "run directory manifest copy")?;
        } else {
            manifest.save(&copy)?;
        }
        Ok(Pipeline {
            corpus_root: manifest.corpus_root(manifest_dir),
            manifest,
            digest,
            paths,
        })
    }

    /// Load a manifest from disk and bind it to its run directory.
    pub fn open(manifest_path: &Path, out_dir: &Path) -> Result<Self> {
        let manifest = ExperimentManifest::load(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        Pipeline::new(manifest, dir, out_dir)
    }

    pub fn manifest(&self) -> &ExperimentManifest {
        &self.manifest
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn run_dir(&self) -> &Path {
        &self.paths.root
    }

    pub fn paths(&self) -> &RunPaths {
        &self.paths
    }

    fn write_stamp(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        save_json(
            &StageStamp {
                manifest_digest: self.digest.clone(),
            },
            path,
        )
    }

    fn check_stamp(&self, path: &Path, what: &str) -> Result<()> {
        let stamp: StageStamp = load_json(path)?;
        require_manifest_match(&stamp.manifest_digest, &self.digest, what)
    }

    fn check_pin(&self, pin: Option<&str>, path: &Path, what: &str) -> Result<()> {
        if let Some(expected) = pin {
            let found = file_digest(path)?;
            if found != expected {
                return Err(Error::Checkpoint(format!(
                    "checkpoint for {what} at {} has digest {found} but the manifest pins {expected}",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Stage: prepare-data
    // -----------------------------------------------------------------------

    /// Materialize the corpus (generating the synthetic tree if configured
    /// and absent) and write the split index.
    pub fn prepare_data(&self) -> Result<CorpusIndex> {
        let index_path = self.paths.corpus_index();
        if index_path.exists() {
            self.check_stamp(&self.paths.corpus_stamp(), "corpus index")?;
            return CorpusIndex::load_csv(&index_path, &self.corpus_root);
        }
        self.ensure_corpus_audio()?;
        let index = prepare_corpus(
            &self.corpus_root,
            &self.manifest.corpus.splits,
            self.manifest.stage_seed(STAGE_PREPARE_DATA, 0),
        )?;
        ensure_parent(&index_path)?;
        index.save_csv(&index_path)?;
        self.write_stamp(&self.paths.corpus_stamp())?;
        Ok(index)
    }

    /// Generate the configured synthetic corpus tree if it is absent,
    /// returning the corpus root the manifest resolves to.
    pub fn ensure_corpus_audio(&self) -> Result<&Path> {
        if let Some(synth) = &self.manifest.corpus.synth {
            self.ensure_synth_corpus(synth)?;
        }
        if !self.corpus_root.is_dir() {
            return Err(Error::InvalidParam(format!(
                "corpus root {} does not exist and the manifest configures no synthetic corpus",
                self.corpus_root.display()
            )));
        }
        Ok(&self.corpus_root)
    }

    fn ensure_synth_corpus(&self, synth: &SynthCorpusConfig) -> Result<()> {
        let marker = self.corpus_root.join("synth.json");
        if self.corpus_root.is_dir() {
            if marker.exists() {
                let found: SynthCorpusConfig = load_json(&marker)?;
                if found != *synth {
                    return Err(Error::Manifest(format!(
                        "generated corpus at {} was built from a different synthesis config; \
                         delete it or point the manifest elsewhere",
                        self.corpus_root.display()
                    )));
                }
            }
            return Ok(());
        }
        generate_corpus(synth, &self.corpus_root)?;
        save_json(synth, &marker)
    }

    fn require_corpus(&self) -> Result<CorpusIndex> {
        let path = self.paths.corpus_index();
        if !path.exists() {
            return Err(Error::MissingStage {
                stage: STAGE_PREPARE_DATA.into(),
                detail: format!("no corpus index at {}", path.display()),
            });
        }
        self.check_stamp(&self.paths.corpus_stamp(), "corpus index")?;
        CorpusIndex::load_csv(&path, &self.corpus_root)
    }

    // -----------------------------------------------------------------------
    // Stage: train-asv
    // -----------------------------------------------------------------------

    /// Train every system in the manifest and calibrate its decision
    /// threshold on the shared enrollment-pool trial protocol.
    pub fn train_asv(&self) -> Result<Vec<AsvCheckpoint<F>>> {
        let index = self.require_corpus()?;
        let mut train_utts: Option<Vec<TrainUtterance<F>>> = None;
        let mut pool: Option<Vec<Waveform<F>>> = None;
        let mut trials: Option<TrialList> = None;
        let mut out = Vec::with_capacity(self.manifest.systems.len());
        for (k, spec) in self.manifest.systems.iter().enumerate() {
            let path = self.paths.asv_checkpoint(&spec.id);
            if path.exists() {
                let ckpt: AsvCheckpoint<F> = load_json(&path)?;
                require_manifest_match(
                    &ckpt.manifest_digest,
                    &self.digest,
                    &format!("system `{}` checkpoint", spec.id),
                )?;
                self.check_pin(spec.checkpoint_digest.as_deref(), &path, &spec.id)?;
                out.push(ckpt);
                continue;
            }
            if train_utts.is_none() {
                train_utts = Some(
                    index
                        .split_ids(Split::EmbedderTrain)
                        .iter()
                        .map(|&i| {
                            Ok(TrainUtterance {
                                speaker: index.speaker_number(i),
                                wave: index.load_waveform(i)?,
                            })
                        })
                        .collect::<Result<_>>()?,
                );
            }
            let trained = train_embedder(
                train_utts.as_deref().expect("just filled"),
                spec.architecture,
                &spec.train,
                self.manifest.stage_seed(STAGE_TRAIN_ASV, k as u64),
            )?;
            if pool.is_none() {
                pool = Some(index.load_split(Split::EnrollPool)?);
                trials = Some(calibration_trials(
                    &index,
                    self.manifest.stage_seed("calibrate", 0),
                )?);
            }
            let threshold = calibrate_threshold(
                &trained.model,
                pool.as_deref().expect("just filled"),
                trials.as_ref().expect("just filled"),
            )?;
            let ckpt = AsvCheckpoint {
                manifest_digest: self.digest.clone(),
                system_id: spec.id.clone(),
                config: trained.model.cfg.clone(),
                threshold,
                holdout_eer: trained.holdout_eer,
                loss_history: trained.loss_history.clone(),
                arch: trained.model.arch.clone(),
                params: trained.model.params.clone(),
            };
            ensure_parent(&path)?;
            save_json(&ckpt, &path)?;
            self.check_pin(spec.checkpoint_digest.as_deref(), &path, &spec.id)?;
            out.push(ckpt);
        }
        Ok(out)
    }

    fn require_asv(&self) -> Result<Vec<AsvCheckpoint<F>>> {
        self.manifest
            .systems
            .iter()
            .map(|spec| {
                let path = self.paths.asv_checkpoint(&spec.id);
                if !path.exists() {
                    return Err(Error::MissingStage {
                        stage: STAGE_TRAIN_ASV.into(),
                        detail: format!("no checkpoint for system `{}`", spec.id),
                    });
                }
                let ckpt: AsvCheckpoint<F> = load_json(&path)?;
                require_manifest_match(
                    &ckpt.manifest_digest,
                    &self.digest,
                    &format!("system `{}` checkpoint", spec.id),
                )?;
                self.check_pin(spec.checkpoint_digest.as_deref(), &path, &spec.id)?;
                Ok(ckpt)
            })
            .collect()
    }

    // -----------------------------------------------------------------------
    // Stage: gen-replay-pairs
    // -----------------------------------------------------------------------

    /// Build the simulator's training corpus by pushing source utterances
    /// (raw, or first turned into baseline digital adversarial examples)
    /// through the ground-truth channel.
    pub fn gen_replay_pairs(&self) -> Result<ReplayPairsMeta> {
        let meta_path = self.paths.replay_meta();
        if meta_path.exists() {
            let meta: ReplayPairsMeta = load_json(&meta_path)?;
            require_manifest_match(&meta.manifest_digest, &self.digest, "replay-pair dataset")?;
            return Ok(meta);
        }
        let index = self.require_corpus()?;
        let seed = self.manifest.stage_seed(STAGE_GEN_REPLAY_PAIRS, 0);

        // A seeded order decorrelates the train/val boundary from the
        // speaker-grouped index order.
        let mut order = index.split_ids(Split::NrsSource).to_vec();
        order.shuffle(&mut rng_for(seed, "replay-order", 0));

        let mut sources: Vec<Waveform<F>> = Vec::with_capacity(order.len());
        match self.manifest.nrs.replay_source {
            ReplaySource::Bonafide => {
                for &i in &order {
                    sources.push(index.load_waveform(i)?);
                }
            }
            ReplaySource::BaselineAdversarial => {
                let checkpoints = self.require_asv()?;
                let first = &checkpoints[0];
                let embedder = first.embedder()?;
                let surrogate = SurrogateModel::asv_only(&embedder, first.threshold);
                let pool = index.split_ids(Split::EnrollPool);
                for (n, &i) in order.iter().enumerate() {
                    let wave: Waveform<F> = index.load_waveform(i)?;
                    let enroll_idx = draw_distinct_speaker(
                        &index,
                        pool,
                        i,
                        rng_for(seed, "replay-enroll", n as u64),
                    )?;
                    let enroll: Waveform<F> = index.load_waveform(enroll_idx)?;
                    let res = ensemble_pgd(&[surrogate], &enroll, &wave, &self.manifest.attack)?;
                    sources.push(res.adversarial);
                }
            }
        }

        let n_val = (order.len() / 5).max(1);
        let n_train = order.len().checked_sub(n_val).filter(|&n| n >= 1).ok_or_else(|| {
            Error::InsufficientData(format!(
                "{} replay sources cannot fill train and validation splits",
                order.len()
            ))
        })?;
        let dataset = generate_paired_dataset(&sources, &self.manifest.channel, n_train, n_val)?;

        let dir = self.paths.replay_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let index_path = self.paths.replay_index();
        let mut writer = csv::Writer::from_path(&index_path).map_err(|e| csv_io(&index_path, e))?;
        let rows = dataset
            .train
            .iter()
            .map(|p| (p, "train"))
            .chain(dataset.val.iter().map(|p| (p, "val")));
        for (i, (pair, split)) in rows.enumerate() {
            let clean_path = format!("clean_{i:04}.wav");
            let replayed_path = format!("replayed_{i:04}.wav");
            save_wav_32(&pair.clean, dir.join(&clean_path))?;
            save_wav_32(&pair.replayed, dir.join(&replayed_path))?;
            writer
                .serialize(ReplayPairRow {
                    clean_path,
                    replayed_path,
                    split: split.into(),
                    trial_seed: pair.trial_seed,
                })
                .map_err(|e| csv_io(&index_path, e))?;
        }
        writer.flush().map_err(|e| Error::io(&index_path, e))?;

        let meta = ReplayPairsMeta {
            manifest_digest: self.digest.clone(),
            replay_source: self.manifest.nrs.replay_source,
            dataset_digest: split_digest(&index, Split::NrsSource),
            n_train,
            n_val,
        };
        save_json(&meta, &meta_path)?;
        Ok(meta)
    }

    fn require_replay(&self) -> Result<(ReplayPairsMeta, PairedReplayDataset<F>)> {
        let meta_path = self.paths.replay_meta();
        if !meta_path.exists() {
            return Err(Error::MissingStage {
                stage: STAGE_GEN_REPLAY_PAIRS.into(),
                detail: "no replay-pair dataset".into(),
            });
        }
        let meta: ReplayPairsMeta = load_json(&meta_path)?;
        require_manifest_match(&meta.manifest_digest, &self.digest, "replay-pair dataset")?;
        let index_path = self.paths.replay_index();
        let dir = self.paths.replay_dir();
        let mut reader = csv::Reader::from_path(&index_path).map_err(|e| csv_io(&index_path, e))?;
        let mut dataset = PairedReplayDataset {
            train: Vec::new(),
            val: Vec::new(),
        };
        for row in reader.deserialize::<ReplayPairRow>() {
            let row = row.map_err(|e| csv_io(&index_path, e))?;
            let pair = ReplayPair {
                clean: load_wav(dir.join(&row.clean_path))?,
                replayed: load_wav(dir.join(&row.replayed_path))?,
                trial_seed: row.trial_seed,
            };
            match row.split.as_str() {
                "train" => dataset.train.push(pair),
                "val" => dataset.val.push(pair),
                other => {
                    return Err(Error::Checkpoint(format!(
                        "replay index has unknown split `{other}`"
                    )))
                }
            }
        }
        Ok((meta, dataset))
    }

    // -----------------------------------------------------------------------
    // Stage: train-nrs
    // -----------------------------------------------------------------------

    /// Fit the replay simulator on the persisted pairs.
    pub fn train_nrs(&self) -> Result<NrsCheckpoint<F>> {
        let path = self.paths.nrs_checkpoint();
        if path.exists() {
            let ckpt: NrsCheckpoint<F> = load_json(&path)?;
            require_manifest_match(&ckpt.manifest_digest, &self.digest, "simulator checkpoint")?;
            self.check_pin(
                self.manifest.nrs.checkpoint_digest.as_deref(),
                &path,
                "the replay simulator",
            )?;
            return Ok(ckpt);
        }
        let (meta, dataset) = self.require_replay()?;
        let spec = &self.manifest.nrs;
        let seed = self.manifest.stage_seed(STAGE_TRAIN_NRS, 0);
        let trained = if spec.loss.kind == LossKind::MelL1PlusAsv {
            let checkpoints = self.require_asv()?;
            let embedder = checkpoints[0].embedder()?;
            let index = self.require_corpus()?;
            let pool: Vec<Waveform<F>> = index.load_split(Split::EnrollPool)?;
            crate::nrs::train_nrs(
                &dataset,
                &spec.arch,
                &spec.loss,
                &spec.train,
                Some(AsvLossResources {
                    embedder: &embedder,
                    enroll_pool: &pool,
                }),
                seed,
            )?
        } else {
            crate::nrs::train_nrs(&dataset, &spec.arch, &spec.loss, &spec.train, None, seed)?
        };
        let ckpt = NrsCheckpoint {
            manifest_digest: self.digest.clone(),
            loss: spec.loss.clone(),
            dataset_digest: meta.dataset_digest,
            identity_val_loss: trained.identity_val_loss,
            best_val_loss: trained.best_val_loss,
            best_epoch: trained.best_epoch,
            history: trained.history,
            model: trained.model,
        };
        ensure_parent(&path)?;
        save_json(&ckpt, &path)?;
        self.check_pin(
            self.manifest.nrs.checkpoint_digest.as_deref(),
            &path,
            "the replay simulator",
        )?;
        Ok(ckpt)
    }

    fn require_nrs(&self) -> Result<NrsCheckpoint<F>> {
        let path = self.paths.nrs_checkpoint();
        if !path.exists() {
            return Err(Error::MissingStage {
                stage: STAGE_TRAIN_NRS.into(),
                detail: "no replay-simulator checkpoint".into(),
            });
        }
        let ckpt: NrsCheckpoint<F> = load_json(&path)?;
        require_manifest_match(&ckpt.manifest_digest, &self.digest, "simulator checkpoint")?;
        self.check_pin(
            self.manifest.nrs.checkpoint_digest.as_deref(),
            &path,
            "the replay simulator",
        )?;
        Ok(ckpt)
    }

    /// The simulator checkpoint, with the guard that its training data stays
    /// disjoint from the attack sources.
    fn require_nrs_for_attack(&self, index: &CorpusIndex) -> Result<NrsCheckpoint<F>> {
        let ckpt = self.require_nrs()?;
        if ckpt.dataset_digest == split_digest(index, Split::AttackSet) {
            return Err(Error::Checkpoint(
                "the replay simulator was fitted on the attack set; simulator training data \
                 must stay disjoint from attack sources"
                    .into(),
            ));
        }
        Ok(ckpt)
    }

    // -----------------------------------------------------------------------
    // Stage: attack
    // -----------------------------------------------------------------------

    /// Synthesize adversarial examples for the requested (framework, system)
    /// cells — all of them by default — persisting waveforms and synthesis
    /// records under the run directory.
    pub fn attack(&self, framework: Option<Framework>, system: Option<&str>) -> Result<()> {
        let index = self.require_corpus()?;
        let checkpoints = self.require_asv()?;
        let frameworks = self.select_frameworks(framework)?;
        let selected = self.select_systems(system)?;
        let needs_nrs = frameworks.iter().any(|f| *f != Framework::Baseline);
        let nrs_ckpt = if needs_nrs {
            Some(self.require_nrs_for_attack(&index)?)
        } else {
            None
        };
        let nrs_model = nrs_ckpt.as_ref().map(|c| &c.model);
        let rows = self.ensure_attack_pairs(&index, &checkpoints)?;
        let pairs = materialize_attack_pairs(&index, &rows)?;
        let embedders: Vec<SpeakerEmbedder<F>> = checkpoints
            .iter()
            .map(|c| c.embedder())
            .collect::<Result<_>>()?;

        for &fw in &frameworks {
            for &k in &selected {
                let spec = &self.manifest.systems[k];
                let records_path = self.paths.attack_records(fw, &spec.id);
                if records_path.exists() {
                    let rec: AttackRecords = load_json(&records_path)?;
                    require_manifest_match(
                        &rec.manifest_digest,
                        &self.digest,
                        &format!("attack records for {fw}/{}", spec.id),
                    )?;
                    continue;
                }
                let sys = EvalSystem {
                    id: &spec.id,
                    embedder: &embedders[k],
                    tau: checkpoints[k].threshold,
                };
                let surrogate_kinds: Vec<String> = surrogates_for(fw, &sys, nrs_model)?
                    .iter()
                    .map(|m| m.kind.as_str().to_string())
                    .collect();
                let results = synthesize_attacks(fw, &sys, nrs_model, &pairs, &self.manifest.attack)?;
                let dir = self.paths.attack_cell_dir(fw, &spec.id);
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let mut trials = Vec::with_capacity(results.len());
                for (t, r) in results.iter().enumerate() {
                    let wav = format!("trial_{t:04}.wav");
                    save_wav_32(&r.adversarial, dir.join(&wav))?;
                    trials.push(AttackTrialRecord {
                        trial_id: t,
                        wav,
                        iterations_used: r.iterations_used,
                        succeeded: r.succeeded,
                        final_scores: r.final_scores.clone(),
                        perturbation_linf: r.perturbation_linf,
                    });
                }
                save_json(
                    &AttackRecords {
                        manifest_digest: self.digest.clone(),
                        framework: fw,
                        system_id: spec.id.clone(),
                        surrogate_kinds,
                        trials,
                    },
                    &records_path,
                )?;
            }
        }
        Ok(())
    }

    fn select_frameworks(&self, only: Option<Framework>) -> Result<Vec<Framework>> {
        match only {
            None => Ok(self.manifest.evaluation.frameworks.clone()),
            Some(f) if self.manifest.evaluation.frameworks.contains(&f) => Ok(vec![f]),
            Some(f) => Err(Error::InvalidParam(format!(
                "framework {f} is not part of this experiment"
            ))),
        }
    }

    fn select_systems(&self, only: Option<&str>) -> Result<Vec<usize>> {
        match only {
            None => Ok((0..self.manifest.systems.len()).collect()),
            Some(id) => self
                .manifest
                .systems
                .iter()
                .position(|s| s.id == id)
                .map(|k| vec![k])
                .ok_or_else(|| Error::InvalidParam(format!("unknown system `{id}`"))),
        }
    }

    /// The per-trial (source, enrollment) pairs shared by every framework
    /// and system, built once per run.
    fn ensure_attack_pairs(
        &self,
        index: &CorpusIndex,
        checkpoints: &[AsvCheckpoint<F>],
    ) -> Result<Vec<AttackPairRow>> {
        let path = self.paths.attack_pairs();
        if path.exists() {
            return self.load_attack_rows();
        }
        let rows = build_attack_pairs(index, checkpoints, &self.manifest)?;
        ensure_parent(&path)?;
        let mut writer = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
        for row in &rows {
            writer.serialize(row).map_err(|e| csv_io(&path, e))?;
        }
        writer.flush().map_err(|e| Error::io(&path, e))?;
        self.write_stamp(&self.paths.attack_pairs_stamp())?;
        Ok(rows)
    }

    /// Read back the run's persisted trial-pair index.
    pub fn load_attack_rows(&self) -> Result<Vec<AttackPairRow>> {
        let path = self.paths.attack_pairs();
        if !path.exists() {
            return Err(Error::MissingStage {
                stage: STAGE_ATTACK.into(),
                detail: "no attack-pair index".into(),
            });
        }
        self.check_stamp(&self.paths.attack_pairs_stamp(), "attack-pair index")?;
        let mut reader = csv::Reader::from_path(&path).map_err(|e| csv_io(&path, e))?;
        let mut rows = Vec::new();
        for row in reader.deserialize::<AttackPairRow>() {
            rows.push(row.map_err(|e| csv_io(&path, e))?);
        }
        Ok(rows)
    }

    // -----------------------------------------------------------------------
    // Stage: evaluate
    // -----------------------------------------------------------------------

    /// Score every persisted attack cell on its own system along the digital
    /// and replayed paths.
    pub fn evaluate(&self) -> Result<Vec<EvaluationRun>> {
        let runs_path = self.paths.eval_runs();
        if runs_path.exists() {
            let art: EvalRuns = load_json(&runs_path)?;
            require_manifest_match(&art.manifest_digest, &self.digest, "evaluation runs")?;
            return Ok(art.runs);
        }
        // The direct upstream is checked first so a fresh directory names the
        // attack stage, not its transitive inputs.
        let mut missing = Vec::new();
        for &fw in &self.manifest.evaluation.frameworks {
            for spec in &self.manifest.systems {
                if !self.paths.attack_records(fw, &spec.id).exists() {
                    missing.push(format!("{fw}/{}", spec.id));
                }
            }
        }
        if !self.paths.attack_pairs().exists() {
            missing.push("trial pairs".into());
        }
        if !missing.is_empty() {
            return Err(Error::MissingStage {
                stage: STAGE_ATTACK.into(),
                detail: format!("missing attack artifacts: {}", missing.join(", ")),
            });
        }
        let index = self.require_corpus()?;
        let checkpoints = self.require_asv()?;
        let rows = self.load_attack_rows()?;
        let pairs = materialize_attack_pairs(&index, &rows)?;
        let eval_seed = self.manifest.stage_seed(STAGE_EVALUATE, 0);

        let mut runs = Vec::new();
        for &fw in &self.manifest.evaluation.frameworks {
            for (k, spec) in self.manifest.systems.iter().enumerate() {
                let records_path = self.paths.attack_records(fw, &spec.id);
                let rec: AttackRecords = load_json(&records_path)?;
                require_manifest_match(
                    &rec.manifest_digest,
                    &self.digest,
                    &format!("attack records for {fw}/{}", spec.id),
                )?;
                if rec.trials.len() != pairs.len() {
                    return Err(Error::Checkpoint(format!(
                        "attack records for {fw}/{} hold {} trials but the trial index has {}",
                        spec.id,
                        rec.trials.len(),
                        pairs.len()
                    )));
                }
                let embedder = checkpoints[k].embedder()?;
                let target = SurrogateModel::asv_only(&embedder, checkpoints[k].threshold);
                let dir = self.paths.attack_cell_dir(fw, &spec.id);
                let advs: Vec<Waveform<F>> = rec
                    .trials
                    .iter()
                    .map(|t| load_wav(dir.join(&t.wav)))
                    .collect::<Result<_>>()?;
                let mean_iterations = rec
                    .trials
                    .iter()
                    .map(|t| t.iterations_used as f64)
                    .sum::<f64>()
                    / rec.trials.len() as f64;
                let cap_failures = rec.trials.iter().filter(|t| !t.succeeded).count();
                let label = format!("ota:{fw}:{}", spec.id);
                for path in [AttackPath::Digital, AttackPath::Ota] {
                    let mut trial_results = Vec::with_capacity(advs.len());
                    for (t, adv) in advs.iter().enumerate() {
                        let (success, score) = match path {
                            AttackPath::Digital => evaluate_attack(
                                adv,
                                &pairs[t].enroll,
                                &target,
                                AttackPath::Digital,
                                None,
                                0,
                            )?,
                            AttackPath::Ota => evaluate_attack(
                                adv,
                                &pairs[t].enroll,
                                &target,
                                AttackPath::Ota,
                                Some(&self.manifest.channel),
                                derive_seed(eval_seed, &label, t as u64),
                            )?,
                        };
                        trial_results.push(TrialOutcome {
                            trial_id: t,
                            success,
                            score,
                        });
                    }
                    let run = EvaluationRun {
                        framework: fw,
                        surrogate_ids: vec![spec.id.clone()],
                        target_id: spec.id.clone(),
                        attack_path: path,
                        trial_results,
                        channel: (path == AttackPath::Ota)
                            .then(|| self.manifest.channel.clone()),
                        mean_iterations,
                        cap_failures,
                    };
                    run.validate()?;
                    runs.push(run);
                }
            }
        }
        ensure_parent(&runs_path)?;
        save_json(
            &EvalRuns {
                manifest_digest: self.digest.clone(),
                runs: runs.clone(),
            },
            &runs_path,
        )?;
        Ok(runs)
    }

    // -----------------------------------------------------------------------
    // Stage: report
    // -----------------------------------------------------------------------

    /// Render the evaluation runs into CSV, text summaries, and a chart.
    /// Emission is deterministic, so rerunning rewrites identical bytes.
    pub fn report(&self) -> Result<ReportPaths> {
        let runs_path = self.paths.eval_runs();
        if !runs_path.exists() {
            return Err(Error::MissingStage {
                stage: STAGE_EVALUATE.into(),
                detail: "no evaluation runs".into(),
            });
        }
        let art: EvalRuns = load_json(&runs_path)?;
        require_manifest_match(&art.manifest_digest, &self.digest, "evaluation runs")?;
        emit_report(&art.runs, &self.digest, &self.paths.report_dir())
    }

    /// All stages in order. Simulator stages are skipped when no requested
    /// framework uses the simulator.
    pub fn run_all(&self) -> Result<ReportPaths> {
        self.prepare_data()?;
        self.train_asv()?;
        if self
            .manifest
            .evaluation
            .frameworks
            .iter()
            .any(|f| *f != Framework::Baseline)
        {
            self.gen_replay_pairs()?;
            self.train_nrs()?;
        }
        self.attack(None, None)?;
        self.evaluate()?;
        self.report()
    }

    // -----------------------------------------------------------------------
    // Loss ablation
    // -----------------------------------------------------------------------

    /// Train one simulator per loss kind — on the same replay pairs and seed
    /// as the main simulator stage — and measure simulator-in-loop attacks
    /// against every system over the first `trials` attack pairs, reporting
    /// digital and replayed-path white-box success.
    pub fn run_loss_ablation(&self, trials: usize) -> Result<AblationReport> {
        let report_path = self.paths.ablation_report();
        if report_path.exists() {
            let report: AblationReport = load_json(&report_path)?;
            require_manifest_match(&report.manifest_digest, &self.digest, "loss-ablation report")?;
            return Ok(report);
        }
        if trials == 0 {
            return Err(Error::InvalidParam("ablation needs at least one trial".into()));
        }
        let index = self.require_corpus()?;
        let checkpoints = self.require_asv()?;
        let (meta, dataset) = self.require_replay()?;
        let rows = self.ensure_attack_pairs(&index, &checkpoints)?;
        let n = trials.min(rows.len());
        let pairs = materialize_attack_pairs(&index, &rows[..n])?;
        let embedders: Vec<SpeakerEmbedder<F>> = checkpoints
            .iter()
            .map(|c| c.embedder())
            .collect::<Result<_>>()?;
        let pool: Vec<Waveform<F>> = index.load_split(Split::EnrollPool)?;
        let train_seed = self.manifest.stage_seed(STAGE_TRAIN_NRS, 0);
        let eval_seed = self.manifest.stage_seed("ablation", 0);

        let mut cells = Vec::new();
        for kind in LossKind::ALL {
            let ckpt = self.ablation_nrs(kind, &meta, &dataset, &embedders[0], &pool, train_seed)?;
            for (k, spec) in self.manifest.systems.iter().enumerate() {
                let sys = EvalSystem {
                    id: &spec.id,
                    embedder: &embedders[k],
                    tau: checkpoints[k].threshold,
                };
                let results = synthesize_attacks(
                    Framework::NrsOnly,
                    &sys,
                    Some(&ckpt.model),
                    &pairs,
                    &self.manifest.attack,
                )?;
                let target = SurrogateModel::asv_only(&embedders[k], checkpoints[k].threshold);
                let label = format!("ablation-ota:{}:{}", kind.as_str(), spec.id);
                let mut digital = 0usize;
                let mut ota = 0usize;
                for (t, r) in results.iter().enumerate() {
                    let (d, _) = evaluate_attack(
                        &r.adversarial,
                        &pairs[t].enroll,
                        &target,
                        AttackPath::Digital,
                        None,
                        0,
                    )?;
                    let (o, _) = evaluate_attack(
                        &r.adversarial,
                        &pairs[t].enroll,
                        &target,
                        AttackPath::Ota,
                        Some(&self.manifest.channel),
                        derive_seed(eval_seed, &label, t as u64),
                    )?;
                    digital += usize::from(d);
                    ota += usize::from(o);
                }
                cells.push(AblationCell {
                    loss: kind,
                    system_id: spec.id.clone(),
                    n_trials: n,
                    digital_rate: digital as f64 / n as f64,
                    ota_rate: ota as f64 / n as f64,
                    identity_val_loss: ckpt.identity_val_loss,
                    best_val_loss: ckpt.best_val_loss,
                });
            }
        }
        let report = AblationReport {
            manifest_digest: self.digest.clone(),
            n_trials: n,
            cells,
        };
        ensure_parent(&report_path)?;
        save_json(&report, &report_path)?;
        self.write_ablation_csv(&report)?;
        Ok(report)
    }

    fn ablation_nrs(
        &self,
        kind: LossKind,
        meta: &ReplayPairsMeta,
        dataset: &PairedReplayDataset<F>,
        asv_embedder: &SpeakerEmbedder<F>,
        pool: &[Waveform<F>],
        seed: u64,
    ) -> Result<NrsCheckpoint<F>> {
        // The manifest's own loss kind reuses the main simulator when it
        // exists; training it here would produce the identical model anyway.
        if kind == self.manifest.nrs.loss.kind && self.paths.nrs_checkpoint().exists() {
            return self.require_nrs();
        }
        let path = self.paths.ablation_nrs(kind);
        if path.exists() {
            let ckpt: NrsCheckpoint<F> = load_json(&path)?;
            require_manifest_match(
                &ckpt.manifest_digest,
                &self.digest,
                &format!("ablation simulator ({})", kind.as_str()),
            )?;
            return Ok(ckpt);
        }
        let cfg = if kind == self.manifest.nrs.loss.kind {
            self.manifest.nrs.loss.clone()
        } else {
            LossConfig::new(kind)
        };
        let asv = (kind == LossKind::MelL1PlusAsv).then(|| AsvLossResources {
            embedder: asv_embedder,
            enroll_pool: pool,
        });
        let trained =
            crate::nrs::train_nrs(dataset, &self.manifest.nrs.arch, &cfg, &self.manifest.nrs.train, asv, seed)?;
        let ckpt = NrsCheckpoint {
            manifest_digest: self.digest.clone(),
            loss: cfg,
            dataset_digest: meta.dataset_digest.clone(),
            identity_val_loss: trained.identity_val_loss,
            best_val_loss: trained.best_val_loss,
            best_epoch: trained.best_epoch,
            history: trained.history,
            model: trained.model,
        };
        ensure_parent(&path)?;
        save_json(&ckpt, &path)?;
        Ok(ckpt)
    }

    fn write_ablation_csv(&self, report: &AblationReport) -> Result<()> {
        let path = self.paths.ablation_csv();
        let mut body =
            String::from("loss,system,n_trials,digital_rate,ota_rate,identity_val_loss,best_val_loss\n");
        for c in &report.cells {
            body.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.loss.as_str(),
                c.system_id,
                c.n_trials,
                c.digital_rate,
                c.ota_rate,
                c.identity_val_loss,
                c.best_val_loss
            ));
        }
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }
}

/// Build the threshold-calibration protocol from the enrollment pool: every
/// same-speaker pair plus an equal-sized seeded sample of different-speaker
/// pairs. The protocol is shared by all systems so thresholds are comparable.
fn calibration_trials(index: &CorpusIndex, seed: u64) -> Result<TrialList> {
    let pool = index.split_ids(Split::EnrollPool);
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (pos, &idx) in pool.iter().enumerate() {
        by_speaker
            .entry(index.utterances[idx].speaker_id.as_str())
            .or_default()
            .push(pos);
    }
    let mut trials = Vec::new();
    for positions in by_speaker.values() {
        for i in 0..positions.len() {
            for j in i + 1..positions.len() {
                trials.push(Trial {
                    enroll: positions[i],
                    test: positions[j],
                    label: TrialLabel::Same,
                });
            }
        }
    }
    let n_same = trials.len();
    let groups: Vec<&Vec<usize>> = by_speaker.values().collect();
    let mut different = Vec::new();
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            for &i in groups[a] {
                for &j in groups[b] {
                    different.push(Trial {
                        enroll: i,
                        test: j,
                        label: TrialLabel::Different,
                    });
                }
            }
        }
    }
    different.shuffle(&mut rng_for(seed, "calibration-trials", 0));
    different.truncate(n_same);
    trials.extend(different);
    Ok(TrialList { trials })
}

/// Draw an enrollment-pool utterance whose speaker differs from the source's.
fn draw_distinct_speaker(
    index: &CorpusIndex,
    pool: &[usize],
    source_idx: usize,
    mut rng: impl Rng,
) -> Result<usize> {
    let source_speaker = &index.utterances[source_idx].speaker_id;
    for _ in 0..200 {
        let cand = pool[rng.gen_range(0..pool.len())];
        if index.utterances[cand].speaker_id != *source_speaker {
            return Ok(cand);
        }
    }
    Err(Error::InsufficientData(
        "enrollment pool has no utterance from a different speaker".into(),
    ))
}

/// Draw the run's trial pairs: seeded passes over the attack set, each source
/// paired with a seeded enrollment draw, kept only when no system verifies
/// the cropped source against the enrollment (a genuine impostor trial).
fn build_attack_pairs(
    index: &CorpusIndex,
    checkpoints: &[AsvCheckpoint<F>],
    m: &ExperimentManifest,
) -> Result<Vec<AttackPairRow>> {
    let crop_len = (m.evaluation.attack_secs * SAMPLE_RATE as f64).round() as usize;
    let wanted = m.evaluation.trials;
    let seed = m.stage_seed(STAGE_ATTACK, 0);
    let attack_ids = index.split_ids(Split::AttackSet);
    let pool = index.split_ids(Split::EnrollPool);

    let embedders: Vec<SpeakerEmbedder<F>> = checkpoints
        .iter()
        .map(|c| c.embedder())
        .collect::<Result<_>>()?;
    let surrogates: Vec<SurrogateModel<'_, F>> = embedders
        .iter()
        .zip(checkpoints)
        .map(|(e, c)| SurrogateModel::asv_only(e, c.threshold))
        .collect();

    let mut sources: BTreeMap<usize, (Waveform<F>, usize)> = BTreeMap::new();
    let mut enrolls: BTreeMap<usize, Waveform<F>> = BTreeMap::new();
    let mut enroll_embs: BTreeMap<(usize, usize), Vec<F>> = BTreeMap::new();
    let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut chosen: Vec<AttackPairRow> = Vec::new();
    let mut candidates = 0usize;

    'rounds: for round in 0..MAX_PAIR_ROUNDS {
        let mut order = attack_ids.to_vec();
        order.shuffle(&mut rng_for(seed, "source-order", round));
        for (i, &src) in order.iter().enumerate() {
            if chosen.len() == wanted {
                break 'rounds;
            }
            if !sources.contains_key(&src) {
                let w: Waveform<F> = index.load_waveform(src)?;
                if w.len() < crop_len {
                    return Err(Error::TooShort {
                        actual: w.len(),
                        required: crop_len,
                    });
                }
                let start = (w.len() - crop_len) / 2;
                let crop = Waveform::new(w.samples[start..start + crop_len].to_vec())?;
                sources.insert(src, (crop, start));
            }
            let mut rng = rng_for(seed, "enroll-draw", (round << 32) | i as u64);
            let enroll_idx = pool[rng.gen_range(0..pool.len())];
            if !seen.insert((src, enroll_idx)) {
                continue;
            }
            candidates += 1;
            if !enrolls.contains_key(&enroll_idx) {
                enrolls.insert(enroll_idx, index.load_waveform(enroll_idx)?);
            }
            let enroll = &enrolls[&enroll_idx];
            let (source, crop_start) = &sources[&src];
            let mut verified_somewhere = false;
            for (s, surrogate) in surrogates.iter().enumerate() {
                if !enroll_embs.contains_key(&(s, enroll_idx)) {
                    enroll_embs.insert((s, enroll_idx), surrogate.enroll_embedding(enroll)?);
                }
                let score = surrogate.score_against(source, &enroll_embs[&(s, enroll_idx)])?;
                if decide(score, F::of_f64(surrogate.tau.tau)) {
                    verified_somewhere = true;
                    break;
                }
            }
            if verified_somewhere {
                continue;
            }
            chosen.push(AttackPairRow {
                trial_id: chosen.len(),
                source_speaker: index.utterances[src].speaker_id.clone(),
                source_utterance: index.utterances[src].utterance_id.clone(),
                crop_start: *crop_start,
                crop_len,
                enroll_speaker: index.utterances[enroll_idx].speaker_id.clone(),
                enroll_utterance: index.utterances[enroll_idx].utterance_id.clone(),
            });
        }
    }
    if chosen.len() < wanted {
        return Err(Error::InsufficientData(format!(
            "found only {} impostor trial pairs from {candidates} candidate draws (needed \
             {wanted}); the corpus may be too small or the thresholds too permissive",
            chosen.len()
        )));
    }
    Ok(chosen)
}

/// Load the waveforms behind a trial-pair index.
pub fn materialize_attack_pairs(
    index: &CorpusIndex,
    rows: &[AttackPairRow],
) -> Result<Vec<AttackPair<F>>> {
    let keys = key_map(index);
    let lookup = |speaker: &str, utterance: &str| -> Result<usize> {
        keys.get(&(speaker, utterance)).copied().ok_or_else(|| {
            Error::Checkpoint(format!(
                "trial-pair index references unknown utterance {speaker}/{utterance}"
            ))
        })
    };
    let mut enroll_cache: BTreeMap<usize, Waveform<F>> = BTreeMap::new();
    rows.iter()
        .map(|row| {
            let src = lookup(&row.source_speaker, &row.source_utterance)?;
            let enr = lookup(&row.enroll_speaker, &row.enroll_utterance)?;
            let w: Waveform<F> = index.load_waveform(src)?;
            if row.crop_start + row.crop_len > w.len() {
                return Err(Error::Checkpoint(format!(
                    "trial-pair crop [{}, {}) exceeds source {}/{} of {} samples",
                    row.crop_start,
                    row.crop_start + row.crop_len,
                    row.source_speaker,
                    row.source_utterance,
                    w.len()
                )));
            }
            let source =
                Waveform::new(w.samples[row.crop_start..row.crop_start + row.crop_len].to_vec())?;
            if !enroll_cache.contains_key(&enr) {
                enroll_cache.insert(enr, index.load_waveform(enr)?);
            }
            Ok(AttackPair {
                source,
                enroll: enroll_cache[&enr].clone(),
            })
        })
        .collect()
}
