//! Neural replay simulator: a 1-D U-Net that maps a clean waveform to its
//! predicted loudspeaker/microphone re-recording, together with the loss
//! functions and training loop used to fit it on paired clean/replayed audio.
//!
//! The network is residual — it predicts a correction added to its input and
//! its output layer starts at zero, so an untrained simulator is exactly the
//! identity mapping. Training supports plain reconstruction losses (waveform
//! L1/L2, log-mel L1), a least-squares GAN with multi-period and multi-scale
//! STFT discriminators, and combined losses that mix log-mel reconstruction
//! with a waveform or speaker-similarity term.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asv::{cosine_score, SpeakerEmbedder};
use crate::audio::{MelBuilder, SpectralConfig, Waveform, SAMPLE_RATE};
use crate::channel::PairedReplayDataset;
use crate::dsp::StftBuilder;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Adam, Bound, Conv1d, ParamId, ParamSet};
use crate::rng::{derive_seed, rng_for, shuffle};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LEAK: f64 = 0.2;

/// Architecture hyperparameters for the simulator U-Net.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NrsConfig {
    /// Number of down/up-sampling levels.
    pub depth: usize,
    /// Channel count at the first level.
    pub base_channels: usize,
    /// Additional channels per level going down.
    pub channel_growth: usize,
    /// Per-level resampling factor (only 2 is supported).
    pub downsample_factor: usize,
    /// Kernel size of every convolution (odd, so lengths are preserved).
    pub kernel: usize,
}

impl Default for NrsConfig {
    fn default() -> Self {
        NrsConfig {
            depth: 6,
            base_channels: 16,
            channel_growth: 8,
            downsample_factor: 2,
            kernel: 5,
        }
    }
}

impl NrsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 12 {
            return Err(Error::InvalidParam(format!(
                "simulator depth must be in 1..=12, got {}",
                self.depth
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidParam("base_channels must be positive".into()));
        }
        if self.downsample_factor != 2 {
            return Err(Error::InvalidParam(format!(
                "only a per-level resampling factor of 2 is supported, got {}",
                self.downsample_factor
            )));
        }
        if self.kernel < 3 || self.kernel % 2 == 0 {
            return Err(Error::InvalidParam(format!(
                "kernel must be odd and >= 3, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Shortest input the network accepts; shorter signals cannot be
    /// decimated `depth` times.
    pub fn min_input_len(&self) -> usize {
        self.downsample_factor.pow(self.depth as u32)
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels + self.channel_growth * level
    }
}

/// Layer handles of the U-Net, in parameter-creation order.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct NrsLayers {
    down: Vec<Conv1d>,
    bottleneck: Conv1d,
    up: Vec<Conv1d>,
    out: Conv1d,
}

fn build_layers<S: Scalar>(
    cfg: &NrsConfig,
    params: &mut ParamSet<S>,
    rng: &mut ChaCha8Rng,
) -> NrsLayers {
    let k = cfg.kernel;
    let pad = k / 2;
    let down = (0..cfg.depth)
        .map(|i| {
            let in_ch = if i == 0 { 1 } else { cfg.channels(i - 1) };
            Conv1d::new(params, rng, &format!("down{i}"), in_ch, cfg.channels(i), k, 1, pad)
        })
        .collect();
    let bottleneck = Conv1d::new(
        params,
        rng,
        "bottleneck",
        cfg.channels(cfg.depth - 1),
        cfg.channels(cfg.depth),
        k,
        1,
        pad,
    );
    let up = (0..cfg.depth)
        .rev()
        .map(|lvl| {
            let in_ch = cfg.channels(lvl + 1) + cfg.channels(lvl);
            Conv1d::new(params, rng, &format!("up{lvl}"), in_ch, cfg.channels(lvl), k, 1, pad)
        })
        .collect();
    // Zero-initialized output: the residual starts at zero, so the untrained
    // simulator is exactly the identity mapping.
    let out = Conv1d::new_zeroed(params, "residual_out", cfg.channels(0), 1, k, 1, pad);
    NrsLayers {
        down,
        bottleneck,
        up,
        out,
    }
}

/// Waveform-to-waveform replay simulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct NrsModel<S: Scalar> {
    pub cfg: NrsConfig,
    pub params: ParamSet<S>,
    /// Set once training finishes; a frozen model's weights are fixed, but
    /// input gradients still flow through it.
    pub frozen: bool,
    layers: NrsLayers,
}

impl<S: Scalar> NrsModel<S> {
    /// Freshly initialized simulator (an exact identity mapping).
    pub fn init(cfg: NrsConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, "nrs-init", 0);
        let mut params = ParamSet::new();
        let layers = build_layers(&cfg, &mut params, &mut rng);
        Ok(NrsModel {
            cfg,
            params,
            frozen: false,
            layers,
        })
    }

    /// Rebuild a model from checkpointed configuration and weights.
    pub fn from_parts(cfg: NrsConfig, params: ParamSet<S>, frozen: bool) -> Result<Self> {
        cfg.validate()?;
        let mut shadow = ParamSet::<S>::new();
        let mut rng = rng_for(0, "nrs-shadow", 0);
        let layers = build_layers(&cfg, &mut shadow, &mut rng);
        if shadow.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "weight count does not match architecture: expected {} tensors, got {}",
                shadow.len(),
                params.len()
            )));
        }
        for k in 0..shadow.len() {
            let want = shadow.get(ParamId(k)).shape();
            let got = params.get(ParamId(k)).shape();
            if want != got {
                return Err(Error::Checkpoint(format!(
                    "weight tensor {k} has shape {got:?}, architecture expects {want:?}"
                )));
            }
        }
        Ok(NrsModel {
            cfg,
            params,
            frozen,
            layers,
        })
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Run the U-Net on a `[1 x len]` signal node. Inputs whose length is not
    /// a multiple of 2^depth are zero-padded internally and trimmed back, so
    /// the output length always equals the input length.
    pub fn forward(&self, g: &mut Graph<S>, bound: &Bound, x: Var) -> Result<Var> {
        let (rows, len) = g.shape(x);
        if rows != 1 {
            return Err(Error::ShapeMismatch(format!(
                "simulator expects a [1 x len] input, got [{rows} x {len}]"
            )));
        }
        let mult = self.cfg.min_input_len();
        if len < mult {
            return Err(Error::TooShort {
                actual: len,
                required: mult,
            });
        }
        let pad = (mult - len % mult) % mult;
        let x0 = if pad > 0 { g.pad_zero_cols(x, 0, pad) } else { x };
        let alpha = S::of_f64(LEAK);
        let mut h = x0;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for conv in &self.layers.down {
            h = conv.forward(g, bound, h);
            h = g.leaky_relu(h, alpha);
            skips.push(h);
            h = g.decimate2(h);
        }
        h = self.layers.bottleneck.forward(g, bound, h);
        h = g.leaky_relu(h, alpha);
        for (conv, &skip) in self.layers.up.iter().zip(skips.iter().rev()) {
            h = g.repeat2(h);
            h = g.concat_rows(skip, h);
            h = conv.forward(g, bound, h);
            h = g.leaky_relu(h, alpha);
        }
        let r = self.layers.out.forward(g, bound, h);
        let y = g.add(x0, r);
        Ok(if pad > 0 { g.slice_cols(y, 0, len) } else { y })
    }

    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }
}

/// Apply the simulator to a waveform (weights fixed).
pub fn nrs_forward<S: Scalar>(m: &NrsModel<S>, w: &Waveform<S>) -> Result<Waveform<S>> {
    let mut g = Graph::new();
    let bound = m.bind(&mut g, false);
    let x = g.constant(Tensor::row(w.samples.clone()));
    let y = m.forward(&mut g, &bound, x)?;
    Waveform::new(g.value(y).data.clone())
}

/// Training objective for the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MelL1,
    WavL1,
    WavL2,
    Gan,
    MelL1PlusWavL1,
    MelL1PlusAsv,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::MelL1,
        LossKind::WavL1,
        LossKind::WavL2,
        LossKind::Gan,
        LossKind::MelL1PlusWavL1,
        LossKind::MelL1PlusAsv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::MelL1 => "mel_l1",
            LossKind::WavL1 => "wav_l1",
            LossKind::WavL2 => "wav_l2",
            LossKind::Gan => "gan",
            LossKind::MelL1PlusWavL1 => "mel_l1_plus_wav_l1",
            LossKind::MelL1PlusAsv => "mel_l1_plus_asv",
        }
    }

    /// Names of the logged loss terms, in reporting order.
    pub fn term_names(self) -> &'static [&'static str] {
        match self {
            LossKind::MelL1 => &["mel_l1"],
            LossKind::WavL1 => &["wav_l1"],
            LossKind::WavL2 => &["wav_l2"],
            LossKind::Gan => &["mel_l1", "mpd", "msstft"],
            LossKind::MelL1PlusWavL1 => &["mel_l1", "wav_l1"],
            LossKind::MelL1PlusAsv => &["mel_l1", "asv"],
        }
    }

    fn needs_mel(self) -> bool {
        !matches!(self, LossKind::WavL1 | LossKind::WavL2)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown loss kind `{s}`")))
    }
}

/// Loss selection plus the weights of its terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// (λ1, λ2, λ3): log-mel reconstruction, multi-period discriminator, and
    /// multi-scale STFT discriminator weights of the GAN composite.
    pub gan_weights: (f64, f64, f64),
    /// Per-term weights of the two-term combined losses, in `term_names` order.
    pub combo_weights: (f64, f64),
}

impl LossConfig {
    /// Default weights for a kind (combined-loss weights are balanced so each
    /// term carries a non-trivial share of the total at initialization).
    pub fn new(kind: LossKind) -> Self {
        let combo_weights = match kind {
            LossKind::MelL1PlusWavL1 => (1.0, 20.0),
            LossKind::MelL1PlusAsv => (1.0, 4.0),
            _ => (1.0, 1.0),
        };
        LossConfig {
            kind,
            gan_weights: (3.0, 1.0, 1.0),
            combo_weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |x: f64| x.is_finite();
        let (l1, l2, l3) = self.gan_weights;
        let (w1, w2) = self.combo_weights;
        if ![l1, l2, l3, w1, w2].iter().all(|&x| finite(x)) {
            return Err(Error::InvalidParam("loss weights must be finite".into()));
        }
        match self.kind {
            LossKind::Gan => {
                if l1 <= 0.0 || l2 < 0.0 || l3 < 0.0 {
                    return Err(Error::InvalidParam(
                        "GAN weights need λ1 > 0 and λ2, λ3 >= 0".into(),
                    ));
                }
            }
            LossKind::MelL1PlusWavL1 | LossKind::MelL1PlusAsv => {
                if w1 <= 0.0 || w2 <= 0.0 {
                    return Err(Error::InvalidParam(
                        "combined-loss weights must be positive".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scalar loss functions
// ---------------------------------------------------------------------------

fn check_equal_lengths<S: Scalar>(pred: &Waveform<S>, target: &Waveform<S>) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "pred has {} samples, target has {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

fn mel_l1_term<S: Scalar>(
    g: &mut Graph<S>,
    mb: &MelBuilder<S>,
    pred: Var,
    target: Var,
) -> Result<Var> {
    let a = mb.build(g, pred)?;
    let b = mb.build(g, target)?;
    let d = g.sub(a, b);
    let d = g.abs(d);
    Ok(g.mean(d))
}

fn wav_l1_term<S: Scalar>(g: &mut Graph<S>, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let d = g.abs(d);
    g.mean(d)
}

fn wav_l2_term<S: Scalar>(g: &mut Graph<S>, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let d2 = g.mul(d, d);
    g.mean(d2)
}

/// Mean absolute difference of log-mel features under custom settings.
pub fn loss_mel_l1_with<S: Scalar>(
    pred: &Waveform<S>,
    target: &Waveform<S>,
    cfg: SpectralConfig,
) -> Result<S> {
    check_equal_lengths(pred, target)?;
    let mb = MelBuilder::new(cfg)?;
    let mut g = Graph::new();
    let p = g.constant(Tensor::row(pred.samples.clone()));
    let t = g.constant(Tensor::row(target.samples.clone()));
    let v = mel_l1_term(&mut g, &mb, p, t)?;
    Ok(g.value(v).item())
}

/// Mean absolute difference of 80-band log-mel features.
pub fn loss_mel_l1<S: Scalar>(pred: &Waveform<S>, target: &Waveform<S>) -> Result<S> {
    loss_mel_l1_with(pred, target, SpectralConfig::default())
}

/// Mean absolute sample difference.
pub fn loss_wav_l1<S: Scalar>(pred: &Waveform<S>, target: &Waveform<S>) -> Result<S> {
    check_equal_lengths(pred, target)?;
    let n = S::of_usize(pred.len());
    let sum = pred
        .samples
        .iter()
        .zip(&target.samples)
        .fold(S::zero(), |a, (&p, &t)| a + (p - t).abs());
    Ok(sum / n)
}

/// Mean squared sample difference.
pub fn loss_wav_l2<S: Scalar>(pred: &Waveform<S>, target: &Waveform<S>) -> Result<S> {
    check_equal_lengths(pred, target)?;
    let n = S::of_usize(pred.len());
    let sum = pred
        .samples
        .iter()
        .zip(&target.samples)
        .fold(S::zero(), |a, (&p, &t)| a + (p - t) * (p - t));
    Ok(sum / n)
}

/// Absolute difference of the verification scores that `pred` and `target`
/// reach against one enrollment utterance drawn (seeded) from the pool.
pub fn loss_asv<S: Scalar>(
    pred: &Waveform<S>,
    target: &Waveform<S>,
    embedder: &SpeakerEmbedder<S>,
    enroll_pool: &[Waveform<S>],
    step_seed: u64,
) -> Result<S> {
    check_equal_lengths(pred, target)?;
    if enroll_pool.is_empty() {
        return Err(Error::InvalidParam("enrollment pool is empty".into()));
    }
    let idx = rng_for(step_seed, "asv-loss-enroll", 0).gen_range(0..enroll_pool.len());
    let e_enroll = embedder.embed(&enroll_pool[idx])?;
    let e_target = embedder.embed(target)?;
    let e_pred = embedder.embed(pred)?;
    let s_target = cosine_score(&e_target, &e_enroll)?;
    let s_pred = cosine_score(&e_pred, &e_enroll)?;
    Ok((s_target - s_pred).abs())
}

// ---------------------------------------------------------------------------
// Discriminators
// ---------------------------------------------------------------------------

/// Signal periods of the default multi-period discriminators.
pub const DEFAULT_MPD_PERIODS: [usize; 5] = [2, 3, 5, 7, 11];

/// STFT settings of the default multi-scale spectrogram discriminators.
pub fn default_msstft_scales() -> Vec<SpectralConfig> {
    [512usize, 1024, 2048]
        .into_iter()
        .map(|s| SpectralConfig {
            n_fft: s,
            win_length: s,
            hop_length: s / 4,
            ..SpectralConfig::default()
        })
        .collect()
}

const DISC_WIDTH1: usize = 16;
const DISC_WIDTH2: usize = 32;

/// One small convolutional discriminator (two feature layers + logit map).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DiscConvs {
    c1: Conv1d,
    c2: Conv1d,
    out: Conv1d,
}

impl DiscConvs {
    /// Returns the two post-activation feature maps and the logit map.
    fn forward<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, x: Var) -> (Var, Var, Var) {
        let alpha = S::of_f64(LEAK);
        let a = self.c1.forward(g, bound, x);
        let a = g.leaky_relu(a, alpha);
        let b = self.c2.forward(g, bound, a);
        let b = g.leaky_relu(b, alpha);
        let o = self.out.forward(g, bound, b);
        (a, b, o)
    }
}

/// Period-folding and spectrogram discriminators trained jointly against the
/// simulator under a least-squares adversarial objective.
#[derive(Debug, Clone)]
pub struct DiscriminatorBank<S: Scalar> {
    pub mpd_periods: Vec<usize>,
    pub msstft_scales: Vec<SpectralConfig>,
    pub params: ParamSet<S>,
    mpd: Vec<DiscConvs>,
    msstft: Vec<DiscConvs>,
    stfts: Vec<StftBuilder<S>>,
}

impl<S: Scalar> DiscriminatorBank<S> {
    pub fn init(periods: &[usize], scales: &[SpectralConfig], seed: u64) -> Result<Self> {
        if periods.len() < 2 {
            return Err(Error::InvalidParam(
                "need at least two period discriminators".into(),
            ));
        }
        if scales.len() < 2 {
            return Err(Error::InvalidParam(
                "need at least two spectrogram discriminators".into(),
            ));
        }
        if periods.iter().any(|&p| p == 0) {
            return Err(Error::InvalidParam("periods must be positive".into()));
        }
        for sc in scales {
            sc.validate()?;
        }
        let mut rng = rng_for(seed, "disc-init", 0);
        let mut params = ParamSet::new();
        let mpd = periods
            .iter()
            .enumerate()
            .map(|(i, &p)| DiscConvs {
                c1: Conv1d::new(&mut params, &mut rng, &format!("mpd{i}.c1"), p, DISC_WIDTH1, 5, 3, 2),
                c2: Conv1d::new(
                    &mut params,
                    &mut rng,
                    &format!("mpd{i}.c2"),
                    DISC_WIDTH1,
                    DISC_WIDTH2,
                    5,
                    3,
                    2,
                ),
                out: Conv1d::new(&mut params, &mut rng, &format!("mpd{i}.out"), DISC_WIDTH2, 1, 3, 1, 1),
            })
            .collect();
        let msstft = scales
            .iter()
            .enumerate()
            .map(|(i, sc)| {
                let bins = sc.n_fft / 2 + 1;
                DiscConvs {
                    c1: Conv1d::new(&mut params, &mut rng, &format!("msstft{i}.c1"), bins, DISC_WIDTH1, 3, 1, 1),
                    c2: Conv1d::new(
                        &mut params,
                        &mut rng,
                        &format!("msstft{i}.c2"),
                        DISC_WIDTH1,
                        DISC_WIDTH2,
                        3,
                        1,
                        1,
                    ),
                    out: Conv1d::new(&mut params, &mut rng, &format!("msstft{i}.out"), DISC_WIDTH2, 1, 3, 1, 1),
                }
            })
            .collect();
        let stfts = scales
            .iter()
            .map(|sc| StftBuilder::new(sc.n_fft, sc.win_length, sc.hop_length))
            .collect();
        Ok(DiscriminatorBank {
            mpd_periods: periods.to_vec(),
            msstft_scales: scales.to_vec(),
            params,
            mpd,
            msstft,
            stfts,
        })
    }

    /// Bank with the default periods {2, 3, 5, 7, 11} and scales 512/1024/2048.
    pub fn default_bank(seed: u64) -> Result<Self> {
        Self::init(&DEFAULT_MPD_PERIODS, &default_msstft_scales(), seed)
    }

    /// Shortest waveform all spectrogram discriminators can analyze.
    pub fn min_input_len(&self) -> usize {
        self.msstft_scales
            .iter()
            .map(|sc| sc.win_length)
            .max()
            .unwrap_or(1)
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Fold a `[1 x len]` signal into `[period x len/period]` channels.
    fn fold(g: &mut Graph<S>, x: Var, period: usize) -> Var {
        let (_, len) = g.shape(x);
        let pad = (period - len % period) % period;
        let xp = if pad > 0 { g.pad_zero_cols(x, 0, pad) } else { x };
        let r = g.reshape(xp, (len + pad) / period, period);
        g.transpose(r)
    }

    /// Magnitude spectrogram as `[bins x frames]` channels.
    fn magnitude(&self, g: &mut Graph<S>, scale_idx: usize, x: Var) -> Var {
        let p = self.stfts[scale_idx].power(g, x);
        let p = g.add_scalar(p, S::of_f64(1e-9));
        let m = g.sqrt(p);
        g.transpose(m)
    }

    fn check_input(&self, len: usize) -> Result<()> {
        let need = self.min_input_len();
        if len < need {
            return Err(Error::TooShort {
                actual: len,
                required: need,
            });
        }
        Ok(())
    }

    /// Mean((logits - 1)^2): the least-squares "target is real" objective.
    fn toward_real(g: &mut Graph<S>, logits: Var) -> Var {
        let d = g.add_scalar(logits, S::of_f64(-1.0));
        let d2 = g.mul(d, d);
        g.mean(d2)
    }

    /// Mean(logits^2): the least-squares "target is fake" objective.
    fn toward_fake(g: &mut Graph<S>, logits: Var) -> Var {
        let d2 = g.mul(logits, logits);
        g.mean(d2)
    }

    /// Adversarial + feature-matching generator terms, one per discriminator
    /// family, each averaged over its discriminators.
    fn generator_terms(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        pred: Var,
        target: Var,
    ) -> Result<(Var, Var)> {
        let (_, len) = g.shape(pred);
        self.check_input(len)?;
        let half = S::of_f64(0.5);
        let mut family_terms = Vec::with_capacity(2);
        for family in 0..2 {
            let n = if family == 0 { self.mpd.len() } else { self.msstft.len() };
            let mut total: Option<Var> = None;
            for i in 0..n {
                let (in_fake, in_real) = if family == 0 {
                    (
                        Self::fold(g, pred, self.mpd_periods[i]),
                        Self::fold(g, target, self.mpd_periods[i]),
                    )
                } else {
                    (self.magnitude(g, i, pred), self.magnitude(g, i, target))
                };
                let convs = if family == 0 { &self.mpd[i] } else { &self.msstft[i] };
                let (af, bf, lf) = convs.forward(g, bound, in_fake);
                let (ar, br, _) = convs.forward(g, bound, in_real);
                let adv = Self::toward_real(g, lf);
                let d1 = g.sub(af, ar);
                let d1 = g.abs(d1);
                let m1 = g.mean(d1);
                let d2 = g.sub(bf, br);
                let d2 = g.abs(d2);
                let m2 = g.mean(d2);
                let fm = g.add(m1, m2);
                let fm = g.mul_scalar(fm, half);
                let term = g.add(adv, fm);
                total = Some(match total {
                    Some(t) => g.add(t, term),
                    None => term,
                });
            }
            let t = total.expect("discriminator family is non-empty");
            family_terms.push(g.mul_scalar(t, S::of_usize(n).recip()));
        }
        Ok((family_terms[0], family_terms[1]))
    }

    /// Least-squares objective training the bank to score `target` toward 1
    /// and `pred` toward 0, averaged over all discriminators.
    fn disc_objective(&self, g: &mut Graph<S>, bound: &Bound, pred: Var, target: Var) -> Result<Var> {
        let (_, len) = g.shape(pred);
        self.check_input(len)?;
        let mut total: Option<Var> = None;
        let n = self.mpd.len() + self.msstft.len();
        for family in 0..2 {
            let count = if family == 0 { self.mpd.len() } else { self.msstft.len() };
            for i in 0..count {
                let (in_fake, in_real) = if family == 0 {
                    (
                        Self::fold(g, pred, self.mpd_periods[i]),
                        Self::fold(g, target, self.mpd_periods[i]),
                    )
                } else {
                    (self.magnitude(g, i, pred), self.magnitude(g, i, target))
                };
                let convs = if family == 0 { &self.mpd[i] } else { &self.msstft[i] };
                let (_, _, lf) = convs.forward(g, bound, in_fake);
                let (_, _, lr) = convs.forward(g, bound, in_real);
                let real_term = Self::toward_real(g, lr);
                let fake_term = Self::toward_fake(g, lf);
                let term = g.add(real_term, fake_term);
                total = Some(match total {
                    Some(t) => g.add(t, term),
                    None => term,
                });
            }
        }
        let t = total.expect("bank has discriminators");
        Ok(g.mul_scalar(t, S::of_usize(n).recip()))
    }
}

/// Generator and discriminator losses of the adversarial objective:
/// `gen = λ1·mel_l1 + λ2·(adversarial + feature matching over period folds)
/// + λ3·(same over magnitude spectrograms)`.
pub fn loss_gan<S: Scalar>(
    pred: &Waveform<S>,
    target: &Waveform<S>,
    bank: &DiscriminatorBank<S>,
    weights: (f64, f64, f64),
) -> Result<(S, S)> {
    check_equal_lengths(pred, target)?;
    let (l1, l2, l3) = weights;
    let mb = MelBuilder::new(SpectralConfig::default())?;
    let mut g = Graph::new();
    let bound = bank.bind(&mut g, false);
    let p = g.constant(Tensor::row(pred.samples.clone()));
    let t = g.constant(Tensor::row(target.samples.clone()));
    let mel = mel_l1_term(&mut g, &mb, p, t)?;
    let mut gen = g.mul_scalar(mel, S::of_f64(l1));
    if l2 != 0.0 || l3 != 0.0 {
        let (mpd, msstft) = bank.generator_terms(&mut g, &bound, p, t)?;
        if l2 != 0.0 {
            let w = g.mul_scalar(mpd, S::of_f64(l2));
            gen = g.add(gen, w);
        }
        if l3 != 0.0 {
            let w = g.mul_scalar(msstft, S::of_f64(l3));
            gen = g.add(gen, w);
        }
    }
    let disc = bank.disc_objective(&mut g, &bound, p, t)?;
    Ok((g.value(gen).item(), g.value(disc).item()))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Optimization hyperparameters for simulator training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NrsTrainConfig {
    /// Upper bound on training epochs.
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Pairs per optimizer step (gradients are averaged).
    pub batch_size: usize,
    /// Adam learning rate for generator and discriminators.
    pub lr: f64,
    /// Length of the aligned random crops used for training, in seconds.
    pub crop_secs: f64,
}

impl Default for NrsTrainConfig {
    fn default() -> Self {
        NrsTrainConfig {
            max_epochs: 200,
            patience: 10,
            batch_size: 16,
            lr: 1e-3,
            crop_secs: 1.0,
        }
    }
}

impl NrsTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParam(
                "max_epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidParam("learning rate must be positive".into()));
        }
        if !(self.crop_secs.is_finite() && self.crop_secs > 0.0) {
            return Err(Error::InvalidParam("crop_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn crop_len(&self) -> usize {
        (self.crop_secs * SAMPLE_RATE as f64).round() as usize
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NrsEpochStats {
    pub epoch: usize,
    /// Mean training loss (weighted sum of the terms below).
    pub train_loss: f64,
    /// Mean validation loss under the kind's validation metric.
    pub val_loss: f64,
    /// Mean weighted contribution of each loss term, in `term_names` order.
    pub terms: Vec<(String, f64)>,
    /// Mean discriminator objective (adversarial kinds only).
    pub disc_loss: Option<f64>,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainedNrs<S: Scalar> {
    /// Simulator restored to its best-validation weights and frozen.
    pub model: NrsModel<S>,
    pub history: Vec<NrsEpochStats>,
    /// Validation loss of the identity mapping (output = input), the
    /// "simulator learned nothing" baseline.
    pub identity_val_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    /// Final discriminator bank (adversarial kinds only).
    pub gan_bank: Option<DiscriminatorBank<S>>,
}

/// Frozen speaker-verification resources required by the speaker-similarity
/// loss term.
#[derive(Clone, Copy)]
pub struct AsvLossResources<'a, S: Scalar> {
    pub embedder: &'a SpeakerEmbedder<S>,
    pub enroll_pool: &'a [Waveform<S>],
}

struct AsvRuntime<'a, S: Scalar> {
    embedder: &'a SpeakerEmbedder<S>,
    pool: &'a [Waveform<S>],
    pool_emb: Vec<Vec<S>>,
}

struct LossEngine<'a, S: Scalar> {
    cfg: LossConfig,
    seed: u64,
    mel: Option<MelBuilder<S>>,
    asv: Option<AsvRuntime<'a, S>>,
}

impl<'a, S: Scalar> LossEngine<'a, S> {
    fn new(cfg: &LossConfig, asv: Option<AsvLossResources<'a, S>>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mel = if cfg.kind.needs_mel() {
            Some(MelBuilder::new(SpectralConfig::default())?)
        } else {
            None
        };
        let asv = if cfg.kind == LossKind::MelL1PlusAsv {
            let res = asv.ok_or_else(|| {
                Error::InvalidParam(
                    "speaker-similarity loss requires an embedder and an enrollment pool".into(),
                )
            })?;
            if res.enroll_pool.is_empty() {
                return Err(Error::InvalidParam("enrollment pool is empty".into()));
            }
            let pool_emb = res
                .enroll_pool
                .iter()
                .map(|w| res.embedder.embed(w))
                .collect::<Result<Vec<_>>>()?;
            Some(AsvRuntime {
                embedder: res.embedder,
                pool: res.enroll_pool,
                pool_emb,
            })
        } else {
            None
        };
        Ok(LossEngine {
            cfg: cfg.clone(),
            seed,
            mel,
            asv,
        })
    }

    fn mel(&self) -> &MelBuilder<S> {
        self.mel.as_ref().expect("mel builder initialized for this kind")
    }

    /// Minimum crop length the configured loss can evaluate.
    fn min_crop_len(&self, bank: Option<&DiscriminatorBank<S>>) -> usize {
        let mut need = 1;
        if let Some(mb) = &self.mel {
            need = need.max(mb.cfg.win_length);
        }
        if let Some(b) = bank {
            need = need.max(b.min_input_len());
        }
        if self.asv.is_some() {
            need = need.max(crate::asv::MIN_EMBED_SAMPLES);
        }
        need
    }

    /// Build the training objective on `pred` (a graph node) against the
    /// constant target. Returns the total plus each term's weighted value.
    fn training_loss(
        &self,
        g: &mut Graph<S>,
        gan: Option<(&DiscriminatorBank<S>, &Bound)>,
        pred: Var,
        target: Var,
        target_crop: &[S],
        step: u64,
    ) -> Result<(Var, Vec<f64>)> {
        match self.cfg.kind {
            LossKind::MelL1 => {
                let v = mel_l1_term(g, self.mel(), pred, target)?;
                Ok((v, vec![g.value(v).item().as_f64()]))
            }
            LossKind::WavL1 => {
                let v = wav_l1_term(g, pred, target);
                Ok((v, vec![g.value(v).item().as_f64()]))
            }
            LossKind::WavL2 => {
                let v = wav_l2_term(g, pred, target);
                Ok((v, vec![g.value(v).item().as_f64()]))
            }
            LossKind::Gan => {
                let (l1, l2, l3) = self.cfg.gan_weights;
                let (bank, bound) = gan.ok_or_else(|| {
                    Error::InvalidParam("adversarial training requires a discriminator bank".into())
                })?;
                let mel = mel_l1_term(g, self.mel(), pred, target)?;
                let (mpd, msstft) = bank.generator_terms(g, bound, pred, target)?;
                let t1 = g.mul_scalar(mel, S::of_f64(l1));
                let t2 = g.mul_scalar(mpd, S::of_f64(l2));
                let t3 = g.mul_scalar(msstft, S::of_f64(l3));
                let s = g.add(t1, t2);
                let total = g.add(s, t3);
                let terms = vec![
                    g.value(t1).item().as_f64(),
                    g.value(t2).item().as_f64(),
                    g.value(t3).item().as_f64(),
                ];
                Ok((total, terms))
            }
            LossKind::MelL1PlusWavL1 => {
                let (w1, w2) = self.cfg.combo_weights;
                let mel = mel_l1_term(g, self.mel(), pred, target)?;
                let wav = wav_l1_term(g, pred, target);
                let t1 = g.mul_scalar(mel, S::of_f64(w1));
                let t2 = g.mul_scalar(wav, S::of_f64(w2));
                let total = g.add(t1, t2);
                let terms = vec![g.value(t1).item().as_f64(), g.value(t2).item().as_f64()];
                Ok((total, terms))
            }
            LossKind::MelL1PlusAsv => {
                let (w1, w2) = self.cfg.combo_weights;
                let asv = self.asv.as_ref().expect("asv runtime initialized");
                let mel = mel_l1_term(g, self.mel(), pred, target)?;
                let idx =
                    rng_for(self.seed, "nrs-asv-enroll", step).gen_range(0..asv.pool.len());
                let target_emb = asv.embedder.embed(&Waveform::new(target_crop.to_vec())?)?;
                let s_target = cosine_score(&target_emb, &asv.pool_emb[idx])?;
                let eb = asv.embedder.bind(g, false);
                let ep = asv.embedder.forward(g, &eb, pred)?;
                let en = g.constant(Tensor::col(asv.pool_emb[idx].clone()));
                let sp = g.cos_sim(ep, en)?;
                let st = g.constant(Tensor::scalar(s_target));
                let d = g.sub(st, sp);
                let av = g.abs(d);
                let t1 = g.mul_scalar(mel, S::of_f64(w1));
                let t2 = g.mul_scalar(av, S::of_f64(w2));
                let total = g.add(t1, t2);
                let terms = vec![g.value(t1).item().as_f64(), g.value(t2).item().as_f64()];
                Ok((total, terms))
            }
        }
    }

    /// Deterministic validation metric for one pair. Adversarial terms are
    /// excluded: the GAN kind is validated on its log-mel reconstruction.
    fn validation_metric(
        &self,
        pred: &Waveform<S>,
        target: &Waveform<S>,
        pair_idx: usize,
    ) -> Result<f64> {
        let v = match self.cfg.kind {
            LossKind::MelL1 | LossKind::Gan => loss_mel_l1(pred, target)?.as_f64(),
            LossKind::WavL1 => loss_wav_l1(pred, target)?.as_f64(),
            LossKind::WavL2 => loss_wav_l2(pred, target)?.as_f64(),
            LossKind::MelL1PlusWavL1 => {
                let (w1, w2) = self.cfg.combo_weights;
                w1 * loss_mel_l1(pred, target)?.as_f64()
                    + w2 * loss_wav_l1(pred, target)?.as_f64()
            }
            LossKind::MelL1PlusAsv => {
                let (w1, w2) = self.cfg.combo_weights;
                let asv = self.asv.as_ref().expect("asv runtime initialized");
                let seed = derive_seed(self.seed, "nrs-val-enroll", pair_idx as u64);
                w1 * loss_mel_l1(pred, target)?.as_f64()
                    + w2 * loss_asv(pred, target, asv.embedder, asv.pool, seed)?.as_f64()
            }
        };
        Ok(v)
    }
}

fn center_crop<S: Scalar>(w: &Waveform<S>, crop_len: usize) -> &[S] {
    let start = (w.len() - crop_len) / 2;
    &w.samples[start..start + crop_len]
}

/// Accumulate one graph's parameter gradients into per-parameter sums.
fn accumulate_grads<S: Scalar>(
    acc: &mut [Option<Vec<S>>],
    bound: &Bound,
    grads: &mut crate::graph::Grads<S>,
) {
    for (slot, &pv) in acc.iter_mut().zip(&bound.vars) {
        if let Some(gf) = grads.take_flat(pv) {
            match slot {
                Some(sum) => {
                    for (a, b) in sum.iter_mut().zip(&gf) {
                        *a += *b;
                    }
                }
                None => *slot = Some(gf),
            }
        }
    }
}

fn scale_grads<S: Scalar>(acc: &mut [Option<Vec<S>>], scale: S) {
    for slot in acc.iter_mut().flatten() {
        for v in slot.iter_mut() {
            *v *= scale;
        }
    }
}

/// Train the replay simulator on paired clean/replayed audio.
///
/// The model with the best validation loss is kept, marked frozen, and
/// returned together with the per-epoch history and the identity-mapping
/// baseline. Training stops early once validation stops improving.
pub fn train_nrs<S: Scalar>(
    dataset: &PairedReplayDataset<S>,
    arch: &NrsConfig,
    loss_cfg: &LossConfig,
    hyper: &NrsTrainConfig,
    asv: Option<AsvLossResources<'_, S>>,
    seed: u64,
) -> Result<TrainedNrs<S>> {
    arch.validate()?;
    hyper.validate()?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::InsufficientData(
            "simulator training needs non-empty train and validation splits".into(),
        ));
    }
    for pair in dataset.train.iter().chain(&dataset.val) {
        if pair.clean.len() != pair.replayed.len() {
            return Err(Error::ShapeMismatch(
                "clean/replayed pair lengths differ".into(),
            ));
        }
    }

    let mut bank = if loss_cfg.kind == LossKind::Gan {
        Some(DiscriminatorBank::init(
            &DEFAULT_MPD_PERIODS,
            &default_msstft_scales(),
            derive_seed(seed, "disc-init", 0),
        )?)
    } else {
        None
    };
    let engine = LossEngine::new(loss_cfg, asv, seed)?;

    let crop_len = hyper.crop_len();
    let min_crop = engine.min_crop_len(bank.as_ref()).max(arch.min_input_len());
    if crop_len < min_crop {
        return Err(Error::InvalidParam(format!(
            "crop of {crop_len} samples is too short for this loss/architecture (need >= {min_crop})"
        )));
    }
    if let Some(short) = dataset
        .train
        .iter()
        .chain(&dataset.val)
        .find(|p| p.clean.len() < crop_len)
    {
        return Err(Error::InsufficientData(format!(
            "a training pair has {} samples, shorter than the {crop_len}-sample crop",
            short.clean.len()
        )));
    }

    let mut model = NrsModel::init(arch.clone(), derive_seed(seed, "nrs-init", 0))?;
    let mut opt = Adam::new(S::of_f64(hyper.lr));
    opt.clip = Some(S::of_f64(10.0));
    let mut disc_opt = Adam::new(S::of_f64(hyper.lr));
    disc_opt.clip = Some(S::of_f64(10.0));

    // Identity baseline: validation metric when the simulator does nothing.
    let mut identity_val_loss = 0.0;
    for (i, pair) in dataset.val.iter().enumerate() {
        let pred = Waveform::new(center_crop(&pair.clean, crop_len).to_vec())?;
        let target = Waveform::new(center_crop(&pair.replayed, crop_len).to_vec())?;
        identity_val_loss += engine.validation_metric(&pred, &target, i)?;
    }
    identity_val_loss /= dataset.val.len() as f64;

    let term_names = loss_cfg.kind.term_names();
    let mut history: Vec<NrsEpochStats> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = model.params.clone();
    let mut stall = 0usize;
    let mut global_step = 0u64;

    for epoch in 0..hyper.max_epochs {
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        let mut erng = rng_for(seed, "nrs-epoch", epoch as u64);
        shuffle(&mut order, &mut erng);

        let mut sum_total = 0.0f64;
        let mut sum_terms = vec![0.0f64; term_names.len()];
        let mut n_items = 0usize;
        let mut sum_disc = 0.0f64;
        let mut n_disc = 0usize;

        for batch in order.chunks(hyper.batch_size) {
            let mut acc: Vec<Option<Vec<S>>> = vec![None; model.params.len()];
            let mut fakes: Vec<(Vec<S>, Vec<S>)> = Vec::new();
            for &i in batch {
                let pair = &dataset.train[i];
                let len = pair.clean.len();
                let start = if len == crop_len {
                    0
                } else {
                    erng.gen_range(0..=len - crop_len)
                };
                let cx = &pair.clean.samples[start..start + crop_len];
                let ct = &pair.replayed.samples[start..start + crop_len];

                let mut g = Graph::new();
                let bound = model.bind(&mut g, true);
                let disc_bound = bank.as_ref().map(|b| b.bind(&mut g, false));
                let x = g.constant(Tensor::row(cx.to_vec()));
                let t = g.constant(Tensor::row(ct.to_vec()));
                let pred = model.forward(&mut g, &bound, x)?;
                let gan_ctx = bank.as_ref().zip(disc_bound.as_ref());
                let (total, terms) =
                    engine.training_loss(&mut g, gan_ctx, pred, t, ct, global_step)?;
                let v = g.value(total).item().as_f64();
                if !v.is_finite() {
                    return Err(Error::Training(format!(
                        "training loss diverged at epoch {epoch}, step {global_step} (value {v})"
                    )));
                }
                sum_total += v;
                for (s, tv) in sum_terms.iter_mut().zip(&terms) {
                    *s += tv;
                }
                n_items += 1;
                global_step += 1;

                if bank.is_some() {
                    fakes.push((g.value(pred).data.clone(), ct.to_vec()));
                }
                let mut grads = g.backward(total);
                accumulate_grads(&mut acc, &bound, &mut grads);
            }
            scale_grads(&mut acc, S::of_usize(batch.len()).recip());
            opt.step_flat(&mut model.params, acc);
            if !model.params.all_finite() {
                return Err(Error::Training(format!(
                    "simulator weights became non-finite at epoch {epoch}"
                )));
            }

            if let Some(bank) = &mut bank {
                let mut dacc: Vec<Option<Vec<S>>> = vec![None; bank.params.len()];
                for (fake, target) in &fakes {
                    let mut g = Graph::new();
                    let db = bank.bind(&mut g, true);
                    let f = g.constant(Tensor::row(fake.clone()));
                    let t = g.constant(Tensor::row(target.clone()));
                    let dl = bank.disc_objective(&mut g, &db, f, t)?;
                    let dv = g.value(dl).item().as_f64();
                    if !dv.is_finite() {
                        return Err(Error::Training(format!(
                            "discriminator loss diverged at epoch {epoch} (value {dv})"
                        )));
                    }
                    sum_disc += dv;
                    n_disc += 1;
                    let mut grads = g.backward(dl);
                    accumulate_grads(&mut dacc, &db, &mut grads);
                }
                scale_grads(&mut dacc, S::of_usize(fakes.len()).recip());
                disc_opt.step_flat(&mut bank.params, dacc);
                if !bank.params.all_finite() {
                    return Err(Error::Training(format!(
                        "discriminator weights became non-finite at epoch {epoch}"
                    )));
                }
            }
        }

        let mut val_sum = 0.0f64;
        for (i, pair) in dataset.val.iter().enumerate() {
            let cx = Waveform::new(center_crop(&pair.clean, crop_len).to_vec())?;
            let target = Waveform::new(center_crop(&pair.replayed, crop_len).to_vec())?;
            let pred = nrs_forward(&model, &cx).map_err(|e| {
                Error::Training(format!(
                    "validation forward pass failed at epoch {epoch}: {e}"
                ))
            })?;
            val_sum += engine.validation_metric(&pred, &target, i)?;
        }
        let val_loss = val_sum / dataset.val.len() as f64;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!(
                "validation loss diverged at epoch {epoch} (value {val_loss})"
            )));
        }

        history.push(NrsEpochStats {
            epoch,
            train_loss: sum_total / n_items as f64,
            val_loss,
            terms: term_names
                .iter()
                .zip(&sum_terms)
                .map(|(&n, &s)| (n.to_string(), s / n_items as f64))
                .collect(),
            disc_loss: (n_disc > 0).then(|| sum_disc / n_disc as f64),
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = model.params.clone();
            stall = 0;
        } else {
            stall += 1;
            if stall > hyper.patience {
                break;
            }
        }
    }

    model.params = best_params;
    model.frozen = true;
    Ok(TrainedNrs {
        model,
        history,
        identity_val_loss,
        best_val_loss: best_val,
        best_epoch,
        gan_bank: bank,
    })
}
