//! Parametric ground-truth replay channel.
//!
//! A deterministic gain → soft-clip → FIR → additive-noise chain standing in
//! for a physical loudspeaker→air→microphone loop. It generates the paired
//! data the replay simulator trains on and serves as the held-out channel
//! for over-the-air evaluation. It is intentionally not differentiable and
//! never appears inside an attack gradient path.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::dsp::{design_lowpass, fir_filter};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::scalar::Scalar;

/// Parameters of the replay channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Linear playback gain applied before the nonlinearity.
    pub gain: f64,
    /// Device + short room response, applied as a causal FIR.
    pub impulse_response: Vec<f64>,
    /// (a1, a3) of the soft-clip polynomial a1·x + a3·x³.
    pub a1: f64,
    pub a3: f64,
    /// Additive white noise level; `None` disables noise entirely.
    pub noise_snr_db: Option<f64>,
    /// Base seed from which per-trial noise streams are derived.
    pub seed: u64,
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if self.gain <= 0.0 {
            return Err(Error::InvalidParam("channel gain must be positive".into()));
        }
        if self.a1 <= 0.0 {
            return Err(Error::InvalidParam("a1 must be positive".into()));
        }
        if self.impulse_response.is_empty() {
            return Err(Error::InvalidParam("impulse response is empty".into()));
        }
        if !self.impulse_response.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidParam("impulse response has non-finite taps".into()));
        }
        let l1: f64 = self.impulse_response.iter().map(|t| t.abs()).sum();
        if l1 > 4.0 {
            return Err(Error::InvalidParam(format!(
                "impulse response L1 norm {l1:.3} exceeds 4"
            )));
        }
        if let Some(snr) = self.noise_snr_db {
            if !(10.0..=60.0).contains(&snr) {
                return Err(Error::InvalidParam(format!(
                    "noise SNR {snr} dB outside [10, 60]"
                )));
            }
        }
        Ok(())
    }

    /// Desk-scale default: mild soft clipping behind a 7 kHz low-pass with a
    /// 3 ms decaying reflection tail, plus 30 dB SNR noise.
    pub fn default_desk(seed: u64) -> Self {
        ChannelParams {
            gain: 0.9,
            impulse_response: desk_impulse_response(),
            a1: 1.0,
            a3: -0.2,
            noise_snr_db: Some(30.0),
            seed,
        }
    }

    /// Pass-through channel: unit gain, delta response, linear, no noise.
    pub fn identity() -> Self {
        ChannelParams {
            gain: 1.0,
            impulse_response: vec![1.0],
            a1: 1.0,
            a3: 0.0,
            noise_snr_db: None,
            seed: 0,
        }
    }
}

/// 64-tap response: low-pass at 7 kHz plus a decaying reflection at 3 ms,
/// normalized to unity DC gain.
pub fn desk_impulse_response() -> Vec<f64> {
    let lp = design_lowpass(17, 7000.0, 16000.0);
    let mut taps = vec![0.0; 64];
    taps[..17].copy_from_slice(&lp);
    // reflection arriving 3 ms (48 samples) after the direct path
    let delay = 48;
    for (k, &v) in lp.iter().enumerate().take(64 - delay) {
        taps[delay + k] += 0.3 * (-(k as f64) / 4.0).exp() * v;
    }
    let dc: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= dc;
    }
    taps
}

/// Play a waveform through the channel: gain, soft clip, FIR, then noise.
/// Bit-deterministic for a given (params, trial_seed); output length equals
/// input length.
pub fn apply_channel<S: Scalar>(
    w: &Waveform<S>,
    p: &ChannelParams,
    trial_seed: u64,
) -> Result<Waveform<S>> {
    p.validate()?;
    let (a1, a3, gain) = (S::of_f64(p.a1), S::of_f64(p.a3), S::of_f64(p.gain));
    let shaped: Vec<S> = w
        .samples
        .iter()
        .map(|&x| {
            let u = gain * x;
            a1 * u + a3 * u * u * u
        })
        .collect();
    let taps: Vec<S> = p.impulse_response.iter().map(|&t| S::of_f64(t)).collect();
    let mut y = fir_filter(&shaped, &taps);
    if let Some(snr_db) = p.noise_snr_db {
        let n = S::of_usize(y.len());
        let power = y.iter().fold(S::zero(), |a, &v| a + v * v) / n;
        if power > S::zero() {
            let sigma = (power.as_f64() / 10f64.powf(snr_db / 10.0)).sqrt();
            let normal = Normal::new(0.0, sigma).map_err(|e| {
                Error::InvalidParam(format!("bad noise distribution: {e}"))
            })?;
            let mut rng = rng_for(p.seed, "channel-noise", trial_seed);
            for v in &mut y {
                *v += S::of_f64(normal.sample(&mut rng));
            }
        }
    }
    Waveform::new(y)
}

/// One clean/replayed pair.
#[derive(Debug, Clone)]
pub struct ReplayPair<S> {
    pub clean: Waveform<S>,
    pub replayed: Waveform<S>,
    pub trial_seed: u64,
}

/// Paired data for simulator training, split by source utterance.
#[derive(Debug, Clone)]
pub struct PairedReplayDataset<S> {
    pub train: Vec<ReplayPair<S>>,
    pub val: Vec<ReplayPair<S>>,
}

impl<S> PairedReplayDataset<S> {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.val.is_empty()
    }
}

/// Replay every source through the channel, assigning the first `n_train`
/// sources to the training split and the next `n_val` to validation, with a
/// per-pair trial seed derived from `p.seed`.
pub fn generate_paired_dataset<S: Scalar>(
    sources: &[Waveform<S>],
    p: &ChannelParams,
    n_train: usize,
    n_val: usize,
) -> Result<PairedReplayDataset<S>> {
    if sources.is_empty() {
        return Err(Error::InsufficientData("no source utterances".into()));
    }
    if sources.len() < n_train + n_val {
        return Err(Error::InsufficientData(format!(
            "{} sources cannot fill disjoint splits of {n_train}+{n_val}",
            sources.len()
        )));
    }
    p.validate()?;
    let make = |range: std::ops::Range<usize>| -> Result<Vec<ReplayPair<S>>> {
        range
            .map(|i| {
                let trial_seed = crate::rng::derive_seed(p.seed, "pair", i as u64);
                let replayed = apply_channel(&sources[i], p, trial_seed)?;
                Ok(ReplayPair {
                    clean: sources[i].clone(),
                    replayed,
                    trial_seed,
                })
            })
            .collect()
    };
    Ok(PairedReplayDataset {
        train: make(0..n_train)?,
        val: make(n_train..n_train + n_val)?,
    })
}
