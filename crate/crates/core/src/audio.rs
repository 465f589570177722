//! Waveform representation, PCM WAV I/O, resampling, and mel features.
//!
//! All pipeline audio is mono float in [-1, 1] at a fixed 16 kHz rate.
//! Files with other rates are resampled on load; multichannel input is
//! averaged down to mono.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{mel_center_freqs, mel_filterbank_t, StftBuilder};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fixed pipeline sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16000;

/// Mono audio at the pipeline sample rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform<S> {
    pub samples: Vec<S>,
    pub sample_rate: u32,
}

impl<S: Scalar> Waveform<S> {
    /// Wrap samples at the pipeline rate, validating basic invariants.
    pub fn new(samples: Vec<S>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidAudio("empty waveform".into()));
        }
        if !samples.iter().all(|s| s.is_finite()) {
            return Err(Error::InvalidAudio("non-finite sample".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> S {
        let sum = self
            .samples
            .iter()
            .fold(S::zero(), |a, &v| a + v * v);
        (sum / S::of_usize(self.samples.len())).sqrt()
    }

    pub fn peak(&self) -> S {
        self.samples
            .iter()
            .fold(S::zero(), |a, &v| a.max(v.abs()))
    }
}

/// Read a PCM WAV file as mono 16 kHz float.
///
/// Accepts 8/16/24/32-bit integer PCM, mono or stereo; channels are
/// averaged and mismatched sample rates go through linear resampling.
pub fn load_wav<S: Scalar>(path: impl AsRef<Path>) -> Result<Waveform<S>> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::Wav {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Wav {
            path: path.display().to_string(),
            msg: "only integer PCM encodings are supported".into(),
        });
    }
    let scale = match spec.bits_per_sample {
        8 => 1u32 << 7,
        16 => 1 << 15,
        24 => 1 << 23,
        32 => 1 << 31,
        b => {
            return Err(Error::Wav {
                path: path.display().to_string(),
                msg: format!("unsupported bit depth {b}"),
            })
        }
    } as f64;
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(Error::Wav {
            path: path.display().to_string(),
            msg: format!("unsupported channel count {}", spec.channels),
        });
    }
    let mut mono: Vec<f64> = Vec::new();
    let mut frame = Vec::with_capacity(channels);
    for s in reader.samples::<i32>() {
        let s = s.map_err(|e| Error::Wav {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        frame.push(s as f64 / scale);
        if frame.len() == channels {
            mono.push(frame.iter().sum::<f64>() / channels as f64);
            frame.clear();
        }
    }
    if mono.is_empty() {
        return Err(Error::Wav {
            path: path.display().to_string(),
            msg: "zero-length audio".into(),
        });
    }
    let mono = if spec.sample_rate != SAMPLE_RATE {
        resample_linear(&mono, spec.sample_rate, SAMPLE_RATE)
    } else {
        mono
    };
    Waveform::new(mono.into_iter().map(S::of_f64).collect())
}

/// Write 16-bit PCM mono WAV; samples are hard-clipped to [-1, 1] first.
pub fn save_wav<S: Scalar>(w: &Waveform<S>, path: impl AsRef<Path>) -> Result<()> {
    write_pcm(w, path.as_ref(), 16)
}

/// Write 32-bit PCM mono WAV. Used for adversarial outputs, where 16-bit
/// quantization could flip decisions that sit close to the threshold.
pub fn save_wav_32<S: Scalar>(w: &Waveform<S>, path: impl AsRef<Path>) -> Result<()> {
    write_pcm(w, path.as_ref(), 32)
}

fn write_pcm<S: Scalar>(w: &Waveform<S>, path: &Path, bits: u16) -> Result<()> {
    if w.samples.is_empty() {
        return Err(Error::InvalidAudio("refusing to write empty waveform".into()));
    }
    if !w.samples.iter().all(|s| s.is_finite()) {
        return Err(Error::InvalidAudio("non-finite sample".into()));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: bits,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::Wav {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let full = (1i64 << (bits - 1)) as f64;
    let max = (full - 1.0) as i64;
    let min = -(full as i64);
    for &s in &w.samples {
        let v = (s.as_f64().clamp(-1.0, 1.0) * full).round() as i64;
        let v = v.clamp(min, max) as i32;
        writer.write_sample(v).map_err(|e| Error::Wav {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
    }
    writer.finalize().map_err(|e| Error::Wav {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Linear-interpolation resampler.
pub fn resample_linear(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let ratio = from as f64 / to as f64;
    let out_len = ((x.len() as f64) / ratio).round().max(1.0) as usize;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = pos.floor() as usize;
            let frac = pos - i0 as f64;
            let a = x[i0.min(x.len() - 1)];
            let b = x[(i0 + 1).min(x.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

/// STFT/mel extraction settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub n_fft: usize,
    pub hop_length: usize,
    pub win_length: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            n_fft: 1024,
            hop_length: 256,
            win_length: 1024,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
        }
    }
}

impl SpectralConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hop_length >= 1
            && self.hop_length <= self.win_length
            && self.win_length <= self.n_fft)
        {
            return Err(Error::InvalidParam(format!(
                "need hop <= win <= n_fft, got {}/{}/{}",
                self.hop_length, self.win_length, self.n_fft
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::InvalidParam("n_mels must be positive".into()));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= SAMPLE_RATE as f64 / 2.0) {
            return Err(Error::InvalidParam(format!(
                "need 0 <= fmin < fmax <= {}, got {}..{}",
                SAMPLE_RATE / 2,
                self.fmin,
                self.fmax
            )));
        }
        Ok(())
    }

    /// Frames produced for a signal of `len` samples under center padding.
    pub fn n_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop_length)
    }
}

/// Log-compressed mel magnitudes, [frames × n_mels].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MelSpectrogram<S> {
    pub values: Tensor<S>,
    pub config: SpectralConfig,
}

/// Additive floor inside the log, keeping silence finite.
pub const MEL_LOG_FLOOR: f64 = 1e-5;

/// Differentiable mel front-end: precomputed window and filterbank plus the
/// graph-building step shared by feature extraction, training losses, and
/// gradient attacks.
#[derive(Debug, Clone)]
pub struct MelBuilder<S> {
    pub cfg: SpectralConfig,
    stft: StftBuilder<S>,
    fb_t: Tensor<S>,
}

impl<S: Scalar> MelBuilder<S> {
    pub fn new(cfg: SpectralConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(MelBuilder {
            stft: StftBuilder::new(cfg.n_fft, cfg.win_length, cfg.hop_length),
            fb_t: mel_filterbank_t(
                cfg.n_mels,
                cfg.n_fft,
                SAMPLE_RATE as f64,
                cfg.fmin,
                cfg.fmax,
            ),
            cfg,
        })
    }

    /// Append log-mel extraction to the graph: x [1 × len] → [frames × n_mels].
    pub fn build(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let (_, len) = g.shape(x);
        if len < self.cfg.win_length {
            return Err(Error::TooShort {
                actual: len,
                required: self.cfg.win_length,
            });
        }
        let power = self.stft.power(g, x);
        let fb = g.constant(self.fb_t.clone());
        let mel = g.matmul(power, fb);
        let mel = g.add_scalar(mel, S::of_f64(MEL_LOG_FLOOR));
        Ok(g.ln(mel))
    }
}

/// Extract the log-mel spectrogram of a waveform.
pub fn mel_spectrogram<S: Scalar>(
    w: &Waveform<S>,
    cfg: &SpectralConfig,
) -> Result<MelSpectrogram<S>> {
    let builder = MelBuilder::new(*cfg)?;
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(w.samples.clone()));
    let mel = builder.build(&mut g, x)?;
    Ok(MelSpectrogram {
        values: g.value(mel).clone(),
        config: *cfg,
    })
}

/// Center frequencies of the configured mel filters, in Hz.
pub fn mel_centers(cfg: &SpectralConfig) -> Vec<f64> {
    mel_center_freqs(cfg.n_mels, cfg.fmin, cfg.fmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64) -> Waveform<f64> {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let samples = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        Waveform::new(samples).unwrap()
    }

    #[test]
    fn wav_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        let w = tone(350.0, 0.05);
        save_wav(&w, &p).unwrap();
        let back: Waveform<f64> = load_wav(&p).unwrap();
        assert_eq!(back.len(), w.len());
        let q = (2.0_f64).powi(-15);
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= q, "{a} vs {b}");
        }
    }

    #[test]
    fn wav_write_clips_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        let w = Waveform::new(vec![2.0f64, -2.0, 0.0]).unwrap();
        save_wav(&w, &p).unwrap();
        let back: Waveform<f64> = load_wav(&p).unwrap();
        assert!((back.samples[0] - 32767.0 / 32768.0).abs() < 1e-9);
        assert!((back.samples[1] + 1.0).abs() < 1e-9);
        assert_eq!(back.samples[2], 0.0);
    }

    #[test]
    fn empty_waveform_is_rejected() {
        assert!(Waveform::<f64>::new(vec![]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let w = Waveform {
            samples: Vec::<f64>::new(),
            sample_rate: SAMPLE_RATE,
        };
        assert!(save_wav(&w, dir.path().join("e.wav")).is_err());
    }

    #[test]
    fn full_scale_16bit_sample_loads_near_unity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fs.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&p, spec).unwrap();
        wr.write_sample(32767i16).unwrap();
        wr.finalize().unwrap();
        let w: Waveform<f64> = load_wav(&p).unwrap();
        assert!((w.samples[0] - 32767.0 / 32768.0).abs() < 1e-12);
    }

    #[test]
    fn stereo_is_averaged_to_mono() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&p, spec).unwrap();
        let l = (0.4f64 * 32768.0) as i16;
        let r = (0.8f64 * 32768.0) as i16;
        for _ in 0..4 {
            wr.write_sample(l).unwrap();
            wr.write_sample(r).unwrap();
        }
        wr.finalize().unwrap();
        let w: Waveform<f64> = load_wav(&p).unwrap();
        assert_eq!(w.len(), 4);
        for &s in &w.samples {
            assert!((s - 0.6).abs() < 1e-3, "{s}");
        }
    }

    #[test]
    fn mismatched_rate_is_resampled_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rs.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&p, spec).unwrap();
        for i in 0..800 {
            let v = 0.3 * (2.0 * std::f64::consts::PI * 200.0 * i as f64 / 8000.0).sin();
            wr.write_sample((v * 32768.0) as i16).unwrap();
        }
        wr.finalize().unwrap();
        let w: Waveform<f64> = load_wav(&p).unwrap();
        assert_eq!(w.sample_rate, SAMPLE_RATE);
        assert_eq!(w.len(), 1600);
    }

    #[test]
    fn silence_mel_hits_the_log_floor() {
        let w = Waveform::new(vec![0.0f64; SAMPLE_RATE as usize]).unwrap();
        let cfg = SpectralConfig::default();
        let m = mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(m.values.shape(), (cfg.n_frames(w.len()), cfg.n_mels));
        let floor = MEL_LOG_FLOOR.ln();
        assert!(m.values.data.iter().all(|&v| (v - floor).abs() < 1e-9));
    }

    #[test]
    fn mel_frame_count_matches_policy() {
        let cfg = SpectralConfig::default();
        for len in [1024usize, 4000, 16000, 16384, 20000] {
            let w = Waveform::new(vec![0.01f64; len]).unwrap();
            let m = mel_spectrogram(&w, &cfg).unwrap();
            assert_eq!(m.values.rows, len.div_ceil(cfg.hop_length));
        }
    }

    #[test]
    fn mel_rejects_short_input() {
        let w = Waveform::new(vec![0.1f64; 512]).unwrap();
        assert!(mel_spectrogram(&w, &SpectralConfig::default()).is_err());
    }

    #[test]
    fn tone_peaks_at_nearest_mel_center() {
        let cfg = SpectralConfig::default();
        let centers = mel_centers(&cfg);
        let expected = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - 440.0).abs().partial_cmp(&(b.1 - 440.0).abs()).unwrap()
            })
            .unwrap()
            .0;
        let m = mel_spectrogram(&tone(440.0, 1.0), &cfg).unwrap();
        // average over frames, then take the argmax bin
        let mut mean = vec![0.0f64; cfg.n_mels];
        for f in 0..m.values.rows {
            for (b, v) in mean.iter_mut().zip(m.values.row_slice(f)) {
                *b += v;
            }
        }
        let argmax = mean
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, expected);
    }

    #[test]
    fn mel_is_sign_invariant() {
        let w = tone(523.0, 0.2);
        let neg = Waveform::new(w.samples.iter().map(|&s| -s).collect()).unwrap();
        let cfg = SpectralConfig::default();
        let a = mel_spectrogram(&w, &cfg).unwrap();
        let b = mel_spectrogram(&neg, &cfg).unwrap();
        for (x, y) in a.values.data.iter().zip(&b.values.data) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn mel_gradient_matches_central_differences() {
        let cfg = SpectralConfig::default();
        let builder: MelBuilder<f64> = MelBuilder::new(cfg).unwrap();
        let base = tone(700.0, 1024.0 / SAMPLE_RATE as f64);
        assert_eq!(base.len(), 1024);

        let eval = |samples: Vec<f64>| -> f64 {
            let mut g = Graph::new();
            let x = g.constant(Tensor::row(samples));
            let mel = builder.build(&mut g, x).unwrap();
            let s = g.sum(mel);
            g.value(s).item()
        };
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(base.samples.clone()), true);
        let mel = builder.build(&mut g, x).unwrap();
        let s = g.sum(mel);
        let mut grads = g.backward(s);
        let analytic = grads.take_flat(x).unwrap();

        let h = 1e-5;
        for idx in (0..1024).step_by(97) {
            let mut plus = base.samples.clone();
            plus[idx] += h;
            let mut minus = base.samples.clone();
            minus[idx] -= h;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            let denom = numeric.abs().max(analytic[idx].abs()).max(1e-8);
            assert!(
                (numeric - analytic[idx]).abs() / denom < 1e-3,
                "sample {idx}: numeric {numeric} analytic {}",
                analytic[idx]
            );
        }
    }
}
