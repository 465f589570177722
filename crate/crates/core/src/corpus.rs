//! Corpus management: synthetic speaker generation, WAV-tree indexing, and
//! seeded split assignment.
//!
//! A corpus is a directory tree `<root>/<speaker>/<utterance>.wav`. Indexing
//! assigns every utterance to at most one of four roles — embedder training,
//! replay-pair sources, attack sources, and the enrollment pool — with attack
//! speakers held out from every other role so attack trials are impostor
//! pairs by construction. The synthetic generator produces harmonically
//! structured voices (per-speaker pitch, formants, and spectral tilt) so that
//! same-speaker utterances genuinely resemble each other.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, save_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::{rng_for, shuffle};
use crate::scalar::Scalar;

/// Shortest utterance the pipeline accepts.
pub const MIN_UTTERANCE_SECS: f64 = 0.5;

/// Size the enrollment pool must have.
pub const ENROLL_POOL_SIZE: usize = 100;

/// A deterministic synthetic voice: pitch, three formant resonances, and
/// spectral tilt, all drawn from a seeded range.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    /// Fundamental frequency in Hz.
    pub f0: f64,
    /// (center Hz, bandwidth Hz) of three vowel-like resonances.
    pub formants: [(f64, f64); 3],
    /// Harmonic rolloff exponent: amplitude of harmonic k falls as k^-tilt.
    pub tilt: f64,
    /// Vibrato rate in Hz and fractional depth.
    pub vibrato_rate: f64,
    pub vibrato_depth: f64,
}

/// The voice of speaker `speaker_idx` under a given corpus seed.
pub fn speaker_profile(corpus_seed: u64, speaker_idx: usize) -> SpeakerProfile {
    let mut rng = rng_for(corpus_seed, "speaker-profile", speaker_idx as u64);
    let f0 = 85.0 * (240.0f64 / 85.0).powf(rng.gen::<f64>());
    let formants = [
        (rng.gen_range(320.0..850.0), rng.gen_range(80.0..200.0)),
        (rng.gen_range(950.0..2400.0), rng.gen_range(120.0..280.0)),
        (rng.gen_range(2500.0..3400.0), rng.gen_range(180.0..380.0)),
    ];
    SpeakerProfile {
        f0,
        formants,
        tilt: rng.gen_range(0.6..1.4),
        vibrato_rate: rng.gen_range(4.0..7.0),
        vibrato_depth: rng.gen_range(0.004..0.015),
    }
}

impl SpeakerProfile {
    /// Spectral envelope gain at frequency `f`, from the formant resonances.
    fn envelope_gain(&self, f: f64) -> f64 {
        let mut g = 0.05;
        for &(center, bw) in &self.formants {
            let d = (f - center) / bw;
            g += (-0.5 * d * d).exp();
        }
        g
    }

    /// Synthesize one utterance: harmonic stack with per-utterance pitch
    /// contour, vibrato, syllabic amplitude modulation, and breath noise.
    pub fn utterance(&self, n_samples: usize, rng: &mut impl Rng) -> Waveform<f64> {
        let sr = SAMPLE_RATE as f64;
        let n_harm = ((7800.0 / (self.f0 * 1.12)) as usize).clamp(3, 40);
        let amps: Vec<f64> = (1..=n_harm)
            .map(|k| (k as f64).powf(-self.tilt) * self.envelope_gain(k as f64 * self.f0))
            .collect();
        let mut phases: Vec<f64> = (0..n_harm)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        let pitch_offset = rng.gen_range(-0.04..0.04);
        let pitch_drift = rng.gen_range(-0.06..0.06);
        let vibrato_phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let syllable_rate = rng.gen_range(2.5..4.5);
        let syllable_phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let peak_target = rng.gen_range(0.35..0.5);

        let mut samples = vec![0.0f64; n_samples];
        for (i, s) in samples.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let vib = 1.0
                + self.vibrato_depth
                    * (std::f64::consts::TAU * self.vibrato_rate * t + vibrato_phase).sin();
            let f0_t = self.f0 * (1.0 + pitch_offset + pitch_drift * t) * vib;
            let mut v = 0.0;
            for (k, (amp, phase)) in amps.iter().zip(phases.iter_mut()).enumerate() {
                *phase += std::f64::consts::TAU * (k + 1) as f64 * f0_t / sr;
                v += amp * phase.sin();
            }
            let attack = (t / 0.03).min(1.0);
            let release = ((n_samples - 1 - i) as f64 / sr / 0.05).min(1.0);
            let syllabic = 1.0
                - 0.35
                    * (0.5
                        + 0.5 * (std::f64::consts::TAU * syllable_rate * t + syllable_phase).sin());
            *s = v * attack * release * syllabic + 0.004 * rng.gen_range(-1.0..1.0);
        }
        let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        if peak > 0.0 {
            let scale = peak_target / peak;
            for s in &mut samples {
                *s *= scale;
            }
        }
        Waveform::new(samples).expect("synthesized samples are finite")
    }
}

/// Layout and size of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpusConfig {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub duration_secs: f64,
    pub seed: u64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        SynthCorpusConfig {
            speakers: 16,
            utterances_per_speaker: 30,
            duration_secs: 1.0,
            seed: 0,
        }
    }
}

impl SynthCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speakers < 2 {
            return Err(Error::InvalidParam(
                "a corpus needs at least 2 speakers".into(),
            ));
        }
        if self.utterances_per_speaker == 0 {
            return Err(Error::InvalidParam(
                "utterances_per_speaker must be positive".into(),
            ));
        }
        if self.duration_secs < MIN_UTTERANCE_SECS {
            return Err(Error::InvalidParam(format!(
                "utterance duration {} s below the {} s minimum",
                self.duration_secs, MIN_UTTERANCE_SECS
            )));
        }
        Ok(())
    }
}

/// Generate a synthetic corpus tree under `out_dir`, returning the number of
/// WAV files written. Fully deterministic per config.
pub fn generate_corpus(cfg: &SynthCorpusConfig, out_dir: &Path) -> Result<usize> {
    cfg.validate()?;
    let n = (cfg.duration_secs * SAMPLE_RATE as f64).round() as usize;
    let mut written = 0;
    for spk in 0..cfg.speakers {
        let profile = speaker_profile(cfg.seed, spk);
        let dir = out_dir.join(format!("spk{spk:03}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        for utt in 0..cfg.utterances_per_speaker {
            let mut rng = rng_for(
                cfg.seed,
                "synth-utterance",
                (spk as u64) * 1_000_000 + utt as u64,
            );
            let wave = profile.utterance(n, &mut rng);
            save_wav(&wave, dir.join(format!("utt{utt:03}.wav")))?;
            written += 1;
        }
    }
    Ok(written)
}

/// Roles an utterance can play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Speaker-classification training for the embedders.
    EmbedderTrain,
    /// Clean sources for replay-pair generation.
    NrsSource,
    /// Impostor utterances the attacks perturb.
    AttackSet,
    /// Enrollment utterances of registered speakers.
    EnrollPool,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::EmbedderTrain,
        Split::NrsSource,
        Split::AttackSet,
        Split::EnrollPool,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::EmbedderTrain => "embedder_train",
            Split::NrsSource => "nrs_source",
            Split::AttackSet => "attack_set",
            Split::EnrollPool => "enroll_pool",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedder_train" => Ok(Split::EmbedderTrain),
            "nrs_source" => Ok(Split::NrsSource),
            "attack_set" => Ok(Split::AttackSet),
            "enroll_pool" => Ok(Split::EnrollPool),
            other => Err(Error::InvalidParam(format!("unknown split `{other}`"))),
        }
    }
}

/// One indexed utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMeta {
    pub speaker_id: String,
    pub utterance_id: String,
    /// Path relative to the corpus root.
    pub path: PathBuf,
    pub duration_secs: f64,
}

/// How many utterances each split takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub embedder_train: usize,
    pub nrs_source: usize,
    pub attack_set: usize,
    pub enroll_pool: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            embedder_train: 240,
            nrs_source: 20,
            attack_set: 100,
            enroll_pool: ENROLL_POOL_SIZE,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embedder_train == 0 || self.nrs_source == 0 || self.attack_set == 0 {
            return Err(Error::InvalidParam("every split must be non-empty".into()));
        }
        if self.enroll_pool != ENROLL_POOL_SIZE {
            return Err(Error::InvalidParam(format!(
                "enrollment pool is fixed at {ENROLL_POOL_SIZE} utterances, got {}",
                self.enroll_pool
            )));
        }
        Ok(())
    }
}

/// Indexed corpus: all utterances plus the split assignment (indices into
/// `utterances`). Utterances outside every split are spares.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIndex {
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
    pub utterances: Vec<UtteranceMeta>,
    pub embedder_train: Vec<usize>,
    pub nrs_source: Vec<usize>,
    pub attack_set: Vec<usize>,
    pub enroll_pool: Vec<usize>,
}

impl CorpusIndex {
    pub fn split_ids(&self, split: Split) -> &[usize] {
        match split {
            Split::EmbedderTrain => &self.embedder_train,
            Split::NrsSource => &self.nrs_source,
            Split::AttackSet => &self.attack_set,
            Split::EnrollPool => &self.enroll_pool,
        }
    }

    pub fn abs_path(&self, idx: usize) -> PathBuf {
        self.root.join(&self.utterances[idx].path)
    }

    /// Dense speaker number (sorted order over all speaker ids).
    pub fn speaker_number(&self, idx: usize) -> usize {
        let mut ids: Vec<&str> = self
            .utterances
            .iter()
            .map(|u| u.speaker_id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids.binary_search(&self.utterances[idx].speaker_id.as_str())
            .expect("indexed utterance has a known speaker")
    }

    pub fn load_waveform<S: Scalar>(&self, idx: usize) -> Result<Waveform<S>> {
        load_wav(self.abs_path(idx))
    }

    pub fn load_split<S: Scalar>(&self, split: Split) -> Result<Vec<Waveform<S>>> {
        self.split_ids(split)
            .iter()
            .map(|&i| self.load_waveform(i))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        // No duplicate utterance keys.
        let mut keys: Vec<(&str, &str)> = self
            .utterances
            .iter()
            .map(|u| (u.speaker_id.as_str(), u.utterance_id.as_str()))
            .collect();
        keys.sort_unstable();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParam(
                "duplicate (speaker, utterance) key in index".into(),
            ));
        }
        for u in &self.utterances {
            if u.duration_secs < MIN_UTTERANCE_SECS {
                return Err(Error::InvalidAudio(format!(
                    "{}/{} lasts {:.3} s, below the {} s minimum",
                    u.speaker_id, u.utterance_id, u.duration_secs, MIN_UTTERANCE_SECS
                )));
            }
        }
        // Split indices valid and pairwise disjoint.
        let mut seen = vec![false; self.utterances.len()];
        for split in Split::ALL {
            let ids = self.split_ids(split);
            if ids.is_empty() {
                return Err(Error::InvalidParam(format!("split {split} is empty")));
            }
            for &i in ids {
                if i >= self.utterances.len() {
                    return Err(Error::InvalidParam(format!(
                        "split {split} references utterance {i} of {}",
                        self.utterances.len()
                    )));
                }
                if seen[i] {
                    return Err(Error::InvalidParam(format!(
                        "utterance {}/{} assigned to two splits",
                        self.utterances[i].speaker_id, self.utterances[i].utterance_id
                    )));
                }
                seen[i] = true;
            }
        }
        if self.enroll_pool.len() != ENROLL_POOL_SIZE {
            return Err(Error::InvalidParam(format!(
                "enrollment pool has {} utterances, must have {ENROLL_POOL_SIZE}",
                self.enroll_pool.len()
            )));
        }
        // Attack speakers never feed a model-side split.
        let speakers_of = |ids: &[usize]| -> Vec<&str> {
            let mut s: Vec<&str> = ids
                .iter()
                .map(|&i| self.utterances[i].speaker_id.as_str())
                .collect();
            s.sort_unstable();
            s.dedup();
            s
        };
        let attack_speakers = speakers_of(&self.attack_set);
        for split in [Split::EmbedderTrain, Split::NrsSource, Split::EnrollPool] {
            for spk in speakers_of(self.split_ids(split)) {
                if attack_speakers.binary_search(&spk).is_ok() {
                    return Err(Error::InvalidParam(format!(
                        "attack speaker {spk} also appears in split {split}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Serialize the index as CSV (one row per utterance, with its split).
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut split_of: Vec<Option<Split>> = vec![None; self.utterances.len()];
        for split in Split::ALL {
            for &i in self.split_ids(split) {
                split_of[i] = Some(split);
            }
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
        w.write_record(["speaker_id", "utterance_id", "path", "duration_secs", "split"])
            .and_then(|()| {
                for (u, s) in self.utterances.iter().zip(&split_of) {
                    w.write_record([
                        u.speaker_id.as_str(),
                        u.utterance_id.as_str(),
                        &u.path.display().to_string(),
                        &u.duration_secs.to_string(),
                        s.map_or("unused", Split::as_str),
                    ])?;
                }
                w.flush().map_err(csv::Error::from)
            })
            .map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e.to_string()),
            })
    }

    /// Load and re-validate an index; `root` is where the audio lives.
    pub fn load_csv(path: &Path, root: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
        let mut index = CorpusIndex {
            root: root.to_path_buf(),
            utterances: Vec::new(),
            embedder_train: Vec::new(),
            nrs_source: Vec::new(),
            attack_set: Vec::new(),
            enroll_pool: Vec::new(),
        };
        for record in r.records() {
            let record = record.map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e.to_string()),
            })?;
            if record.len() != 5 {
                return Err(Error::InvalidParam(format!(
                    "index row has {} fields, expected 5",
                    record.len()
                )));
            }
            let duration_secs: f64 = record[3].parse().map_err(|_| {
                Error::InvalidParam(format!("bad duration `{}` in index", &record[3]))
            })?;
            let idx = index.utterances.len();
            match &record[4] {
                "unused" => {}
                s => match s.parse::<Split>()? {
                    Split::EmbedderTrain => index.embedder_train.push(idx),
                    Split::NrsSource => index.nrs_source.push(idx),
                    Split::AttackSet => index.attack_set.push(idx),
                    Split::EnrollPool => index.enroll_pool.push(idx),
                },
            }
            index.utterances.push(UtteranceMeta {
                speaker_id: record[0].to_string(),
                utterance_id: record[1].to_string(),
                path: PathBuf::from(&record[2]),
                duration_secs,
            });
        }
        index.validate()?;
        Ok(index)
    }
}

/// Pop one utterance per speaker in turn until `count` are taken.
fn draw_round_robin<'a>(
    queues: &mut BTreeMap<&'a str, Vec<usize>>,
    speakers: &[&'a str],
    count: usize,
) -> Vec<usize> {
    let mut taken = Vec::with_capacity(count);
    while taken.len() < count {
        let mut progressed = false;
        for spk in speakers {
            if taken.len() == count {
                break;
            }
            if let Some(i) = queues.get_mut(spk).and_then(Vec::pop) {
                taken.push(i);
                progressed = true;
            }
        }
        assert!(progressed, "split sizes were validated against totals");
    }
    taken.sort_unstable();
    taken
}

/// Read WAV duration in seconds without decoding samples.
fn wav_duration_secs(path: &Path) -> Result<f64> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Wav {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let spec = reader.spec();
    Ok(reader.duration() as f64 / spec.sample_rate as f64)
}

/// Scan a `<root>/<speaker>/<utterance>.wav` tree in sorted order.
fn scan_tree(root: &Path) -> Result<Vec<UtteranceMeta>> {
    let io_err = |e: std::io::Error| Error::Io {
        path: root.display().to_string(),
        source: e,
    };
    let mut speakers: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    speakers.sort();
    let mut utterances = Vec::new();
    for dir in &speakers {
        let speaker_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::InvalidParam(format!("unreadable directory name {dir:?}")))?
            .to_string();
        let mut wavs: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .collect();
        wavs.sort();
        for wav in wavs {
            let utterance_id = wav
                .file_stem()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::InvalidParam(format!("unreadable file name {wav:?}")))?
                .to_string();
            utterances.push(UtteranceMeta {
                duration_secs: wav_duration_secs(&wav)?,
                path: wav
                    .strip_prefix(root)
                    .expect("scanned path is under root")
                    .to_path_buf(),
                speaker_id: speaker_id.clone(),
                utterance_id,
            });
        }
    }
    if utterances.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no <speaker>/<utterance>.wav files under {}",
            root.display()
        )));
    }
    Ok(utterances)
}

/// Index a corpus tree and assign splits by seeded shuffle.
///
/// Speakers are first partitioned into attack speakers (who only supply
/// attack-set utterances) and model speakers (who supply training, replay
/// sources, and the enrollment pool, drawn round-robin so every model speaker
/// contributes evenly).
pub fn prepare_corpus(root: &Path, spec: &SplitSpec, seed: u64) -> Result<CorpusIndex> {
    spec.validate()?;
    let utterances = scan_tree(root)?;
    for u in &utterances {
        if u.duration_secs < MIN_UTTERANCE_SECS {
            return Err(Error::InvalidAudio(format!(
                "{}/{} lasts {:.3} s, below the {} s minimum",
                u.speaker_id, u.utterance_id, u.duration_secs, MIN_UTTERANCE_SECS
            )));
        }
    }
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in utterances.iter().enumerate() {
        by_speaker.entry(&u.speaker_id).or_default().push(i);
    }
    if by_speaker.len() < 2 {
        return Err(Error::InsufficientData(
            "a corpus with one speaker admits no impostor pairs".into(),
        ));
    }

    let mut rng = rng_for(seed, "corpus-split", 0);
    let mut speaker_order: Vec<&str> = by_speaker.keys().copied().collect();
    shuffle(&mut speaker_order, &mut rng);

    // Attack speakers: the fewest shuffled speakers covering the attack set.
    let mut attack_speakers = Vec::new();
    let mut covered = 0;
    for spk in &speaker_order {
        if covered >= spec.attack_set {
            break;
        }
        covered += by_speaker[spk].len();
        attack_speakers.push(*spk);
    }
    let model_speakers: Vec<&str> = speaker_order
        .iter()
        .copied()
        .filter(|s| !attack_speakers.contains(s))
        .collect();
    if covered < spec.attack_set {
        return Err(Error::InsufficientData(format!(
            "corpus has {covered} utterances for an attack set of {}",
            spec.attack_set
        )));
    }
    if model_speakers.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} speakers remain for model training after holding out {} attack speakers; need \
             at least 2",
            model_speakers.len(),
            attack_speakers.len()
        )));
    }
    let model_total: usize = model_speakers.iter().map(|s| by_speaker[s].len()).sum();
    let model_needed = spec.embedder_train + spec.nrs_source + spec.enroll_pool;
    if model_total < model_needed {
        return Err(Error::InsufficientData(format!(
            "model speakers supply {model_total} utterances, splits need {model_needed}"
        )));
    }

    // Per-speaker shuffled queues, drawn round-robin.
    let mut queues: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (spk, ids) in &by_speaker {
        let mut q = ids.clone();
        shuffle(&mut q, &mut rng);
        queues.insert(spk, q);
    }
    let attack_set = draw_round_robin(&mut queues, &attack_speakers, spec.attack_set);
    let embedder_train = draw_round_robin(&mut queues, &model_speakers, spec.embedder_train);
    let enroll_pool = draw_round_robin(&mut queues, &model_speakers, spec.enroll_pool);
    let nrs_source = draw_round_robin(&mut queues, &model_speakers, spec.nrs_source);

    let index = CorpusIndex {
        root: root.to_path_buf(),
        utterances,
        embedder_train,
        nrs_source,
        attack_set,
        enroll_pool,
    };
    index.validate()?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{mel_spectrogram, SpectralConfig};

    fn toy_tree(dir: &Path, speakers: usize, utts: usize, secs: f64, seed: u64) -> usize {
        generate_corpus(
            &SynthCorpusConfig {
                speakers,
                utterances_per_speaker: utts,
                duration_secs: secs,
                seed,
            },
            dir,
        )
        .unwrap()
    }

    fn toy_spec() -> SplitSpec {
        SplitSpec {
            embedder_train: 60,
            nrs_source: 30,
            attack_set: 20,
            enroll_pool: 100,
        }
    }

    #[test]
    fn generation_is_deterministic_and_well_formed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert_eq!(toy_tree(a.path(), 3, 2, 0.6, 7), 6);
        toy_tree(b.path(), 3, 2, 0.6, 7);
        for rel in ["spk000/utt000.wav", "spk002/utt001.wav"] {
            let x = std::fs::read(a.path().join(rel)).unwrap();
            let y = std::fs::read(b.path().join(rel)).unwrap();
            assert_eq!(x, y, "{rel} differs between identically seeded runs");
        }
        let w: Waveform<f64> = load_wav(a.path().join("spk000/utt000.wav")).unwrap();
        assert_eq!(w.len(), 9600);
        assert!(w.samples.iter().all(|v| v.abs() <= 0.55));
        // Different speakers produce different audio under the same seed.
        let x = std::fs::read(a.path().join("spk000/utt000.wav")).unwrap();
        let y = std::fs::read(a.path().join("spk001/utt000.wav")).unwrap();
        assert_ne!(x, y);
    }

    #[test]
    fn same_speaker_utterances_resemble_each_other() {
        let dir = tempfile::tempdir().unwrap();
        toy_tree(dir.path(), 4, 3, 0.6, 11);
        let cfg = SpectralConfig::default();
        let mels: Vec<Vec<crate::tensor::Tensor<f64>>> = (0..4)
            .map(|s| {
                (0..3)
                    .map(|u| {
                        let w: Waveform<f64> = load_wav(
                            dir.path().join(format!("spk{s:03}/utt{u:03}.wav")),
                        )
                        .unwrap();
                        mel_spectrogram(&w, &cfg).unwrap().values
                    })
                    .collect()
            })
            .collect();
        let dist = |a: &crate::tensor::Tensor<f64>, b: &crate::tensor::Tensor<f64>| -> f64 {
            a.data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / a.data.len() as f64
        };
        let mut within = Vec::new();
        let mut across = Vec::new();
        for s in 0..4 {
            for u in 0..3 {
                for v in (u + 1)..3 {
                    within.push(dist(&mels[s][u], &mels[s][v]));
                }
                for t in (s + 1)..4 {
                    across.push(dist(&mels[s][u], &mels[t][u]));
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&within) < mean(&across),
            "same-speaker mel distance {} should undercut cross-speaker {}",
            mean(&within),
            mean(&across)
        );
    }

    #[test]
    fn split_assignment_honors_sizes_and_speaker_holdout() {
        let dir = tempfile::tempdir().unwrap();
        toy_tree(dir.path(), 20, 12, 0.6, 3);
        let index = prepare_corpus(dir.path(), &toy_spec(), 42).unwrap();
        assert_eq!(index.embedder_train.len(), 60);
        assert_eq!(index.nrs_source.len(), 30);
        assert_eq!(index.attack_set.len(), 20);
        assert_eq!(index.enroll_pool.len(), 100);
        index.validate().unwrap();

        let speakers = |ids: &[usize]| -> Vec<String> {
            let mut s: Vec<String> = ids
                .iter()
                .map(|&i| index.utterances[i].speaker_id.clone())
                .collect();
            s.sort();
            s.dedup();
            s
        };
        let attack = speakers(&index.attack_set);
        for split in [Split::EmbedderTrain, Split::NrsSource, Split::EnrollPool] {
            for spk in speakers(index.split_ids(split)) {
                assert!(!attack.contains(&spk), "{spk} leaked into {split}");
            }
        }

        // Same seed reproduces the assignment; another seed moves it.
        let again = prepare_corpus(dir.path(), &toy_spec(), 42).unwrap();
        assert_eq!(index, again);
        let other = prepare_corpus(dir.path(), &toy_spec(), 43).unwrap();
        assert_ne!(index.attack_set, other.attack_set);
    }

    #[test]
    fn csv_roundtrip_preserves_and_revalidates() {
        let dir = tempfile::tempdir().unwrap();
        toy_tree(dir.path(), 20, 12, 0.6, 3);
        let index = prepare_corpus(dir.path(), &toy_spec(), 42).unwrap();
        let csv_path = dir.path().join("index.csv");
        index.save_csv(&csv_path).unwrap();
        let back = CorpusIndex::load_csv(&csv_path, dir.path()).unwrap();
        assert_eq!(index, back);

        // Re-saving produces identical bytes.
        let csv2 = dir.path().join("index2.csv");
        back.save_csv(&csv2).unwrap();
        assert_eq!(
            std::fs::read(&csv_path).unwrap(),
            std::fs::read(&csv2).unwrap()
        );

        // A duplicated utterance row is caught at load.
        let mut body = std::fs::read_to_string(&csv_path).unwrap();
        let dup = body.lines().nth(1).unwrap().to_string();
        body.push_str(&dup);
        body.push('\n');
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, &body).unwrap();
        assert!(CorpusIndex::load_csv(&bad, dir.path()).is_err());

        // A truncated enrollment pool is caught at load.
        let shrunk = std::fs::read_to_string(&csv_path)
            .unwrap()
            .replacen("enroll_pool", "unused", 1);
        let bad2 = dir.path().join("bad2.csv");
        std::fs::write(&bad2, shrunk).unwrap();
        assert!(CorpusIndex::load_csv(&bad2, dir.path()).is_err());
    }

    #[test]
    fn degenerate_corpora_are_rejected() {
        // One speaker: impostor pairs impossible.
        let dir = tempfile::tempdir().unwrap();
        let profile = speaker_profile(1, 0);
        let spk = dir.path().join("only");
        std::fs::create_dir_all(&spk).unwrap();
        for u in 0..300 {
            let mut rng = rng_for(1, "one-speaker", u);
            save_wav(
                &profile.utterance(8000, &mut rng),
                spk.join(format!("utt{u:03}.wav")),
            )
            .unwrap();
        }
        assert!(matches!(
            prepare_corpus(dir.path(), &toy_spec(), 1),
            Err(Error::InsufficientData(_))
        ));

        // Too few utterances for the requested splits.
        let dir = tempfile::tempdir().unwrap();
        toy_tree(dir.path(), 4, 10, 0.6, 5);
        assert!(matches!(
            prepare_corpus(dir.path(), &toy_spec(), 1),
            Err(Error::InsufficientData(_))
        ));

        // A sub-minimum-duration utterance is rejected.
        let dir = tempfile::tempdir().unwrap();
        toy_tree(dir.path(), 20, 12, 0.6, 3);
        let mut rng = rng_for(9, "short", 0);
        save_wav(
            &speaker_profile(9, 0).utterance(4000, &mut rng),
            dir.path().join("spk000/short.wav"),
        )
        .unwrap();
        assert!(matches!(
            prepare_corpus(dir.path(), &toy_spec(), 1),
            Err(Error::InvalidAudio(_))
        ));

        // An empty tree has nothing to index.
        let dir = tempfile::tempdir().unwrap();
        assert!(prepare_corpus(dir.path(), &toy_spec(), 1).is_err());

        // The pool size is not negotiable.
        let mut spec = toy_spec();
        spec.enroll_pool = 10;
        assert!(spec.validate().is_err());
    }
}
