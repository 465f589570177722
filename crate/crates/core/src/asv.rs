//! Toy speaker-verification systems: differentiable embedders, cosine
//! scoring, EER computation, and threshold calibration.
//!
//! Two small architectures cover the two input modalities: `mel_net`
//! (convolutions over mel frames with temporal pooling) and `raw_net`
//! (strided convolutions on raw samples). Both embed into a fixed-dimension
//! space scored by cosine similarity against an enrollment utterance.

use serde::{Deserialize, Serialize};

use crate::audio::{MelBuilder, SpectralConfig, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Adam, Bound, Conv1d, Linear, ParamSet};
use crate::rng::{rng_for, shuffle};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Minimum utterance length accepted by `embed`, in samples (0.5 s).
pub const MIN_EMBED_SAMPLES: usize = SAMPLE_RATE as usize / 2;

/// Minimum length the network itself can process (one analysis window).
pub const MIN_FORWARD_SAMPLES: usize = 1024;

const LEAK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureId {
    MelNet,
    RawNet,
}

impl ArchitectureId {
    pub fn input_modality(self) -> InputModality {
        match self {
            ArchitectureId::MelNet => InputModality::Mel,
            ArchitectureId::RawNet => InputModality::Waveform,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArchitectureId::MelNet => "mel_net",
            ArchitectureId::RawNet => "raw_net",
        }
    }
}

impl std::str::FromStr for ArchitectureId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mel_net" => Ok(ArchitectureId::MelNet),
            "raw_net" => Ok(ArchitectureId::RawNet),
            other => Err(Error::InvalidParam(format!("unknown architecture {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputModality {
    Mel,
    Waveform,
}

/// Static shape of an embedder, enough to rebuild it from a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub architecture_id: ArchitectureId,
    pub embedding_dim: usize,
    /// Channel width of the convolutional trunk.
    pub width: usize,
    pub spectral: SpectralConfig,
}

impl EmbedderConfig {
    pub fn new(architecture_id: ArchitectureId) -> Self {
        EmbedderConfig {
            architecture_id,
            embedding_dim: 128,
            width: match architecture_id {
                ArchitectureId::MelNet => 48,
                ArchitectureId::RawNet => 32,
            },
            spectral: SpectralConfig::default(),
        }
    }
}

/// Layer handles (ParamIds plus hyperparameters) for either architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Arch {
    Mel {
        c1: Conv1d,
        c2: Conv1d,
        c3: Conv1d,
        proj: Linear,
    },
    Raw {
        c1: Conv1d,
        c2: Conv1d,
        c3: Conv1d,
        c4: Conv1d,
        proj: Linear,
    },
}

/// A speaker embedder: configuration, weights, and the mel front-end.
#[derive(Debug, Clone)]
pub struct SpeakerEmbedder<S: Scalar> {
    pub cfg: EmbedderConfig,
    pub params: ParamSet<S>,
    pub arch: Arch,
    mel: MelBuilder<S>,
}

impl<S: Scalar> SpeakerEmbedder<S> {
    /// Freshly initialized, untrained embedder.
    pub fn init(cfg: EmbedderConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, "embedder-init", 0);
        let mut params = ParamSet::new();
        let w = cfg.width;
        let arch = match cfg.architecture_id {
            ArchitectureId::MelNet => Arch::Mel {
                c1: Conv1d::new(&mut params, &mut rng, "c1", cfg.spectral.n_mels, w, 5, 1, 2),
                c2: Conv1d::new(&mut params, &mut rng, "c2", w, w, 5, 2, 2),
                c3: Conv1d::new(&mut params, &mut rng, "c3", w, w, 3, 1, 1),
                proj: Linear::new(&mut params, &mut rng, "proj", w, cfg.embedding_dim),
            },
            ArchitectureId::RawNet => Arch::Raw {
                c1: Conv1d::new(&mut params, &mut rng, "c1", 1, 16, 32, 8, 12),
                c2: Conv1d::new(&mut params, &mut rng, "c2", 16, 24, 16, 4, 6),
                c3: Conv1d::new(&mut params, &mut rng, "c3", 24, w, 8, 4, 3),
                c4: Conv1d::new(&mut params, &mut rng, "c4", w, w, 4, 2, 1),
                proj: Linear::new(&mut params, &mut rng, "proj", w, cfg.embedding_dim),
            },
        };
        Self::from_parts(cfg, params, arch)
    }

    /// Reassemble an embedder from checkpointed parts.
    pub fn from_parts(cfg: EmbedderConfig, params: ParamSet<S>, arch: Arch) -> Result<Self> {
        let mel = MelBuilder::new(cfg.spectral)?;
        Ok(SpeakerEmbedder {
            cfg,
            params,
            arch,
            mel,
        })
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Differentiable forward pass: waveform [1 × len] → embedding [dim × 1].
    pub fn forward(&self, g: &mut Graph<S>, bound: &Bound, x: Var) -> Result<Var> {
        let (rows, len) = g.shape(x);
        if rows != 1 {
            return Err(Error::ShapeMismatch(format!(
                "embedder expects [1 × len] input, got [{rows} × {len}]"
            )));
        }
        if len < MIN_FORWARD_SAMPLES {
            return Err(Error::TooShort {
                actual: len,
                required: MIN_FORWARD_SAMPLES,
            });
        }
        let leak = S::of_f64(LEAK);
        let pooled = match &self.arch {
            Arch::Mel { c1, c2, c3, proj: _ } => {
                let mel = self.mel.build(g, x)?;
                let h = g.transpose(mel);
                let h = c1.forward(g, bound, h);
                let h = g.leaky_relu(h, leak);
                let h = c2.forward(g, bound, h);
                let h = g.leaky_relu(h, leak);
                let h = c3.forward(g, bound, h);
                let h = g.leaky_relu(h, leak);
                g.mean_cols(h)
            }
            Arch::Raw { c1, c2, c3, c4, .. } => {
                let h = c1.forward(g, bound, x);
                let h = g.leaky_relu(h, leak);
                let h = c2.forward(g, bound, h);
                let h = g.leaky_relu(h, leak);
                let h = c3.forward(g, bound, h);
                let h = g.leaky_relu(h, leak);
                let h = c4.forward(g, bound, h);
                let h = g.leaky_relu(h, leak);
                g.mean_cols(h)
            }
        };
        let proj = match &self.arch {
            Arch::Mel { proj, .. } | Arch::Raw { proj, .. } => proj,
        };
        Ok(proj.forward(g, bound, pooled))
    }

    /// Embed a waveform (inference path, enforces the 0.5 s minimum).
    pub fn embed(&self, w: &Waveform<S>) -> Result<Vec<S>> {
        if w.len() < MIN_EMBED_SAMPLES {
            return Err(Error::TooShort {
                actual: w.len(),
                required: MIN_EMBED_SAMPLES,
            });
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(Tensor::row(w.samples.clone()));
        let e = self.forward(&mut g, &bound, x)?;
        Ok(g.value(e).data.clone())
    }
}

/// Cosine similarity between two embeddings.
pub fn cosine_score<S: Scalar>(e1: &[S], e2: &[S]) -> Result<S> {
    if e1.len() != e2.len() {
        return Err(Error::ShapeMismatch(format!(
            "embedding lengths {} vs {}",
            e1.len(),
            e2.len()
        )));
    }
    let dot = e1.iter().zip(e2).fold(S::zero(), |a, (&x, &y)| a + x * y);
    let n1 = e1.iter().fold(S::zero(), |a, &x| a + x * x).sqrt();
    let n2 = e2.iter().fold(S::zero(), |a, &x| a + x * x).sqrt();
    if n1 == S::zero() || n2 == S::zero() {
        return Err(Error::Degenerate("zero-norm embedding".into()));
    }
    Ok(dot / (n1 * n2))
}

/// The acceptance rule: positive iff score ≥ τ (ties accept).
pub fn decide<S: Scalar>(score: S, tau: S) -> bool {
    score >= tau
}

/// Verification outcome of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verification<S> {
    pub accepted: bool,
    pub score: S,
}

/// Score a test utterance against an enrollment utterance.
pub fn verify<S: Scalar>(
    m: &SpeakerEmbedder<S>,
    x: &Waveform<S>,
    x_enroll: &Waveform<S>,
    tau: S,
) -> Result<Verification<S>> {
    let e_test = m.embed(x)?;
    let e_enroll = m.embed(x_enroll)?;
    let score = cosine_score(&e_test, &e_enroll)?;
    Ok(Verification {
        accepted: decide(score, tau),
        score,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialLabel {
    Same,
    Different,
}

/// One verification trial: indices into an utterance list.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Trial {
    pub enroll: usize,
    pub test: usize,
    pub label: TrialLabel,
}

/// Trial protocol for calibration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn validate(&self) -> Result<()> {
        let same = self.trials.iter().filter(|t| t.label == TrialLabel::Same).count();
        let diff = self.trials.len() - same;
        if same == 0 || diff == 0 {
            return Err(Error::Degenerate(
                "trial list must contain both same and different trials".into(),
            ));
        }
        if self.trials.iter().any(|t| t.enroll == t.test) {
            return Err(Error::InvalidParam(
                "trial pairs an utterance with itself".into(),
            ));
        }
        Ok(())
    }
}

/// How a threshold was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    EerPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationThreshold {
    pub tau: f64,
    pub calibration: Calibration,
    pub trial_count: usize,
}

/// Equal error rate and its threshold via linear interpolation between
/// achievable operating points.
///
/// `labels[i] = true` marks a same-speaker trial. Returns `(eer, tau)`.
pub fn compute_eer<S: Scalar>(scores: &[S], labels: &[bool]) -> Result<(f64, f64)> {
    assert_eq!(scores.len(), labels.len(), "scores/labels length mismatch");
    let mut same: Vec<f64> = Vec::new();
    let mut diff: Vec<f64> = Vec::new();
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            same.push(s.as_f64());
        } else {
            diff.push(s.as_f64());
        }
    }
    if same.is_empty() || diff.is_empty() {
        return Err(Error::Degenerate(
            "EER needs both same and different trials".into(),
        ));
    }
    same.sort_by(|a, b| a.partial_cmp(b).expect("non-finite score"));
    diff.sort_by(|a, b| a.partial_cmp(b).expect("non-finite score"));

    // Candidate thresholds realizing every operating point: one below all
    // scores, midpoints between consecutive distinct scores, one above all.
    let mut all: Vec<f64> = same.iter().chain(diff.iter()).copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();
    let mut candidates = Vec::with_capacity(all.len() + 1);
    candidates.push(all[0] - 1.0);
    for w in all.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.push(all[all.len() - 1] + 1.0);

    let far = |t: f64| {
        // fraction of different-speaker scores accepted (score ≥ t)
        let idx = diff.partition_point(|&s| s < t);
        (diff.len() - idx) as f64 / diff.len() as f64
    };
    let frr = |t: f64| {
        // fraction of same-speaker scores rejected (score < t)
        same.partition_point(|&s| s < t) as f64 / same.len() as f64
    };

    let mut prev = {
        let t = candidates[0];
        (t, far(t), frr(t))
    };
    for &t in &candidates[1..] {
        let (fa, fr) = (far(t), frr(t));
        let d_prev = prev.1 - prev.2;
        let d = fa - fr;
        if d <= 0.0 {
            // FAR − FRR is non-increasing in t; interpolate the crossing
            let lambda = if (d_prev - d).abs() < f64::EPSILON {
                1.0
            } else {
                d_prev / (d_prev - d)
            };
            let eer = prev.1 + lambda * (fa - prev.1);
            let tau = prev.0 + lambda * (t - prev.0);
            return Ok((eer, tau));
        }
        prev = (t, fa, fr);
    }
    unreachable!("FAR − FRR always reaches −1 above the top score")
}

/// Quadratic reference implementation of [`compute_eer`]: counts FAR/FRR by
/// direct enumeration at every midpoint threshold. Kept public so tests can
/// verify the fast path against it.
pub fn eer_reference_sweep(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let same: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let diff: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    if same.is_empty() || diff.is_empty() {
        return Err(Error::Degenerate(
            "EER needs both same and different trials".into(),
        ));
    }
    let mut all = scores.iter().map(|s| s.to_owned()).collect::<Vec<_>>();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();
    let mut candidates = vec![all[0] - 1.0];
    for w in all.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.push(all[all.len() - 1] + 1.0);

    let mut prev: Option<(f64, f64, f64)> = None;
    for &t in &candidates {
        let fa = diff.iter().filter(|&&s| s >= t).count() as f64 / diff.len() as f64;
        let fr = same.iter().filter(|&&s| s < t).count() as f64 / same.len() as f64;
        if fa - fr <= 0.0 {
            let (pt, pfa, pfr) = prev.expect("first candidate sits below every score");
            let d_prev = pfa - pfr;
            let d = fa - fr;
            let lambda = if (d_prev - d).abs() < f64::EPSILON {
                1.0
            } else {
                d_prev / (d_prev - d)
            };
            return Ok((pfa + lambda * (fa - pfa), pt + lambda * (t - pt)));
        }
        prev = Some((t, fa, fr));
    }
    unreachable!("sweep always crosses the diagonal")
}

/// Calibrate τ at the EER operating point over a trial list.
pub fn calibrate_threshold<S: Scalar>(
    m: &SpeakerEmbedder<S>,
    utterances: &[Waveform<S>],
    trials: &TrialList,
) -> Result<VerificationThreshold> {
    trials.validate()?;
    let same = trials.trials.iter().filter(|t| t.label == TrialLabel::Same).count();
    let diff = trials.trials.len() - same;
    if same < 50 || diff < 50 {
        return Err(Error::InsufficientData(format!(
            "calibration needs ≥ 50 trials per class, got {same} same / {diff} different"
        )));
    }
    // embed each referenced utterance once
    let mut cache: Vec<Option<Vec<S>>> = vec![None; utterances.len()];
    let embedding = |idx: usize, cache: &mut Vec<Option<Vec<S>>>| -> Result<Vec<S>> {
        if cache[idx].is_none() {
            cache[idx] = Some(m.embed(&utterances[idx])?);
        }
        Ok(cache[idx].clone().expect("just cached"))
    };
    let mut scores = Vec::with_capacity(trials.trials.len());
    let mut labels = Vec::with_capacity(trials.trials.len());
    for t in &trials.trials {
        let e1 = embedding(t.enroll, &mut cache)?;
        let e2 = embedding(t.test, &mut cache)?;
        scores.push(cosine_score(&e1, &e2)?);
        labels.push(t.label == TrialLabel::Same);
    }
    let lo = scores.iter().fold(f64::INFINITY, |a, s| a.min(s.as_f64()));
    let hi = scores.iter().fold(f64::NEG_INFINITY, |a, s| a.max(s.as_f64()));
    if hi - lo < 1e-12 {
        return Err(Error::Degenerate(
            "all trial scores are equal; threshold would be arbitrary".into(),
        ));
    }
    let (_, tau) = compute_eer(&scores, &labels)?;
    Ok(VerificationThreshold {
        tau,
        calibration: Calibration::EerPoint,
        trial_count: trials.trials.len(),
    })
}

/// One labeled training utterance.
#[derive(Debug, Clone)]
pub struct TrainUtterance<S> {
    pub speaker: usize,
    pub wave: Waveform<S>,
}

/// Knobs for embedder training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsvTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Random crop length used during training, in seconds.
    pub crop_secs: f64,
    /// Held-out utterances per speaker for the EER gate.
    pub holdout_per_speaker: usize,
    /// Highest acceptable held-out EER.
    pub max_eer: f64,
}

impl Default for AsvTrainConfig {
    fn default() -> Self {
        AsvTrainConfig {
            epochs: 6,
            lr: 1e-3,
            crop_secs: 0.5,
            holdout_per_speaker: 3,
            max_eer: 0.15,
        }
    }
}

/// Outcome of [`train_embedder`].
#[derive(Debug, Clone)]
pub struct TrainedEmbedder<S: Scalar> {
    pub model: SpeakerEmbedder<S>,
    pub holdout_eer: f64,
    pub loss_history: Vec<f64>,
}

/// Train an embedder by speaker classification; the embedding is the
/// penultimate layer. Fails if the held-out EER does not beat the gate.
pub fn train_embedder<S: Scalar>(
    corpus: &[TrainUtterance<S>],
    architecture_id: ArchitectureId,
    cfg: &AsvTrainConfig,
    seed: u64,
) -> Result<TrainedEmbedder<S>> {
    // contiguous speaker ids
    let mut speakers: Vec<usize> = corpus.iter().map(|u| u.speaker).collect();
    speakers.sort_unstable();
    speakers.dedup();
    let spk_index = |s: usize| speakers.binary_search(&s).expect("speaker present");
    if speakers.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "need ≥ 10 speakers, got {}",
            speakers.len()
        )));
    }
    let mut per_speaker: Vec<Vec<usize>> = vec![Vec::new(); speakers.len()];
    for (i, u) in corpus.iter().enumerate() {
        per_speaker[spk_index(u.speaker)].push(i);
    }
    if let Some(thin) = per_speaker.iter().position(|v| v.len() < 20) {
        return Err(Error::InsufficientData(format!(
            "speaker {} has {} utterances, need ≥ 20",
            speakers[thin],
            per_speaker[thin].len()
        )));
    }
    let crop_len = ((cfg.crop_secs * SAMPLE_RATE as f64) as usize).max(MIN_FORWARD_SAMPLES);
    if let Some(short) = corpus.iter().find(|u| u.wave.len() < crop_len) {
        return Err(Error::TooShort {
            actual: short.wave.len(),
            required: crop_len,
        });
    }

    // split off holdout utterances per speaker (the last few of each)
    let mut train_idx: Vec<usize> = Vec::new();
    let mut holdout: Vec<Vec<usize>> = vec![Vec::new(); speakers.len()];
    for (s, utts) in per_speaker.iter().enumerate() {
        let cut = utts.len() - cfg.holdout_per_speaker.min(utts.len() / 4).max(2);
        train_idx.extend_from_slice(&utts[..cut]);
        holdout[s].extend_from_slice(&utts[cut..]);
    }

    let emb_cfg = EmbedderConfig::new(architecture_id);
    let mut model = SpeakerEmbedder::init(emb_cfg, seed)?;
    let mut rng = rng_for(seed, "embedder-train", 0);
    let mut head_rng = rng_for(seed, "embedder-head", 0);
    let head = Linear::new(
        &mut model.params,
        &mut head_rng,
        "head",
        model.cfg.embedding_dim,
        speakers.len(),
    );

    let mut opt = Adam::new(S::of_f64(cfg.lr));
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.clone();
    for _epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let utt = &corpus[i];
            let start = random_below(&mut rng, utt.wave.len() - crop_len + 1);
            let crop: Vec<S> = utt.wave.samples[start..start + crop_len].to_vec();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let x = g.constant(Tensor::row(crop));
            let e = model.forward(&mut g, &bound, x)?;
            let logits = head.forward(&mut g, &bound, e);
            let loss = g.cross_entropy(logits, spk_index(utt.speaker));
            epoch_loss += g.value(loss).item().as_f64();
            let mut grads = g.backward(loss);
            opt.step(&mut model.params, &bound, &mut grads);
        }
        loss_history.push(epoch_loss / order.len() as f64);
    }
    if !model.params.all_finite() {
        return Err(Error::Training("non-finite weights after training".into()));
    }

    // EER gate on held-out utterances
    let mut scores: Vec<S> = Vec::new();
    let mut labels: Vec<bool> = Vec::new();
    let mut embeddings: Vec<(usize, Vec<S>)> = Vec::new();
    for (s, utts) in holdout.iter().enumerate() {
        for &i in utts {
            embeddings.push((s, model.embed(&corpus[i].wave)?));
        }
    }
    for a in 0..embeddings.len() {
        for b in (a + 1)..embeddings.len() {
            scores.push(cosine_score(&embeddings[a].1, &embeddings[b].1)?);
            labels.push(embeddings[a].0 == embeddings[b].0);
        }
    }
    let (eer, _) = compute_eer(&scores, &labels)?;
    if eer >= cfg.max_eer {
        return Err(Error::Training(format!(
            "held-out EER {:.3} did not beat the {:.2} gate for {}",
            eer,
            cfg.max_eer,
            architecture_id.as_str()
        )));
    }
    Ok(TrainedEmbedder {
        model,
        holdout_eer: eer,
        loss_history,
    })
}

/// Fisher–Yates shuffle driven by our deterministic generator.
fn random_below(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> usize {
    use rand::Rng;
    rng.gen_range(0..n)
}
