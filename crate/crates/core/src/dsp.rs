//! Signal-processing primitives: windows, the mel scale and filterbank,
//! differentiable STFT building blocks, and FIR helpers for the replay
//! channel.

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Periodic Hann window of length `n`.
pub fn hann_window<S: Scalar>(n: usize) -> Vec<S> {
    (0..n)
        .map(|k| {
            let x = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            S::of_f64(0.5 - 0.5 * x.cos())
        })
        .collect()
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Peak (center) frequency in Hz of each triangular mel filter.
pub fn mel_center_freqs(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (m_lo, m_hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let step = (m_hi - m_lo) / (n_mels + 1) as f64;
    (1..=n_mels)
        .map(|j| mel_to_hz(m_lo + step * j as f64))
        .collect()
}

/// Triangular mel filterbank evaluated at FFT bin centers, returned
/// transposed as [n_bins × n_mels] so that `power [F × n_bins] · fb`
/// yields mel energies as [F × n_mels].
pub fn mel_filterbank_t<S: Scalar>(
    n_mels: usize,
    n_fft: usize,
    sample_rate: f64,
    fmin: f64,
    fmax: f64,
) -> Tensor<S> {
    assert!(fmin < fmax && fmax <= sample_rate / 2.0 + 1e-9);
    let n_bins = n_fft / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let step = (m_hi - m_lo) / (n_mels + 1) as f64;
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|j| mel_to_hz(m_lo + step * j as f64))
        .collect();
    let mut data = vec![S::zero(); n_bins * n_mels];
    for k in 0..n_bins {
        let f = k as f64 * sample_rate / n_fft as f64;
        for i in 0..n_mels {
            let (left, center, right) = (edges[i], edges[i + 1], edges[i + 2]);
            let up = (f - left) / (center - left).max(1e-12);
            let down = (right - f) / (right - center).max(1e-12);
            let w = up.min(down).max(0.0);
            data[k * n_mels + i] = S::of_f64(w);
        }
    }
    Tensor::new(n_bins, n_mels, data)
}

/// Center-padded short-time power spectrum as a differentiable graph stage.
///
/// Frames are taken every `hop` samples after reflection padding of
/// `win/2` on each side, giving exactly `ceil(len/hop)` frames.
#[derive(Debug, Clone)]
pub struct StftBuilder<S> {
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
    window: Tensor<S>,
}

impl<S: Scalar> StftBuilder<S> {
    pub fn new(n_fft: usize, win: usize, hop: usize) -> Self {
        assert!(hop >= 1 && hop <= win && win <= n_fft);
        StftBuilder {
            n_fft,
            hop,
            win,
            window: Tensor::row(hann_window(win)),
        }
    }

    pub fn n_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// x must be [1 × len] with len ≥ win; returns [frames × n_bins].
    pub fn power(&self, g: &mut Graph<S>, x: Var) -> Var {
        let (rows, len) = g.shape(x);
        assert_eq!(rows, 1, "expected a single-row waveform");
        assert!(len >= self.win, "waveform shorter than one window");
        let frames = self.n_frames(len);
        let padded = g.pad_reflect_cols(x, self.win / 2);
        let framed = g.frame(padded, self.win, self.hop, frames);
        let windowed = {
            let w = g.constant(self.window.clone());
            g.mul_row_bcast(framed, w)
        };
        let windowed = if self.win < self.n_fft {
            g.pad_zero_cols(windowed, 0, self.n_fft - self.win)
        } else {
            windowed
        };
        g.rfft_power(windowed)
    }
}

/// Causal FIR filter; output has the same length as the input.
pub fn fir_filter<S: Scalar>(x: &[S], taps: &[S]) -> Vec<S> {
    let mut y = vec![S::zero(); x.len()];
    for (k, &t) in taps.iter().enumerate() {
        if t == S::zero() {
            continue;
        }
        for n in k..x.len() {
            y[n] += t * x[n - k];
        }
    }
    y
}

/// Hamming-windowed sinc low-pass prototype, normalized to unity DC gain.
pub fn design_lowpass(n_taps: usize, cutoff_hz: f64, sample_rate: f64) -> Vec<f64> {
    assert!(n_taps >= 3 && cutoff_hz > 0.0 && cutoff_hz < sample_rate / 2.0);
    let fc = cutoff_hz / sample_rate;
    let center = (n_taps - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..n_taps)
        .map(|k| {
            let t = k as f64 - center;
            let sinc = if t.abs() < 1e-12 {
                2.0 * fc
            } else {
                (2.0 * std::f64::consts::PI * fc * t).sin() / (std::f64::consts::PI * t)
            };
            let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * k as f64 / (n_taps - 1) as f64).cos();
            sinc * w
        })
        .collect();
    let sum: f64 = h.iter().sum();
    for v in &mut h {
        *v /= sum;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hann_window_endpoints() {
        let w: Vec<f64> = hann_window(8);
        assert!(w[0].abs() < 1e-12);
        assert!((w[4] - 1.0).abs() < 1e-12);
        // periodic window: w[k] = w[n-k]
        for k in 1..8 {
            assert!((w[k] - w[8 - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn mel_scale_roundtrip() {
        for f in [0.0, 100.0, 440.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-6);
        }
        assert!((hz_to_mel(1000.0) - 999.9855).abs() < 1e-2);
    }

    #[test]
    fn filterbank_is_triangular_and_bounded() {
        let fb: Tensor<f64> = mel_filterbank_t(80, 1024, 16000.0, 0.0, 8000.0);
        assert_eq!(fb.shape(), (513, 80));
        assert!(fb.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // every filter has support
        for i in 0..80 {
            let area: f64 = (0..513).map(|k| fb.at(k, i)).sum();
            assert!(area > 0.0, "filter {i} is empty");
        }
        // filters cover the band: every interior bin below fmax is touched
        for k in 1..512 {
            let f = k as f64 * 16000.0 / 1024.0;
            if f < 7900.0 && f > 40.0 {
                let touched: f64 = (0..80).map(|i| fb.at(k, i)).sum();
                assert!(touched > 0.0, "bin {k} ({f} Hz) uncovered");
            }
        }
    }

    #[test]
    fn stft_power_of_sine_peaks_at_bin() {
        let sr = 16000.0;
        let n = 4096;
        let freq = 1000.0;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin())
            .collect();
        let b = StftBuilder::new(1024, 1024, 256);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::row(x));
        let p = b.power(&mut g, xv);
        let t = g.value(p);
        assert_eq!(t.shape(), (16, 513));
        // middle frame: spectral peak at bin freq*n_fft/sr = 64
        let frame = t.row_slice(8);
        let argmax = frame
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 64);
    }

    #[test]
    fn fir_identity_and_delay() {
        let x = vec![1.0, -0.5, 0.25, 0.8];
        assert_eq!(fir_filter(&x, &[1.0]), x);
        let d = fir_filter(&x, &[0.0, 1.0]);
        assert_eq!(d, vec![0.0, 1.0, -0.5, 0.25]);
    }

    #[test]
    fn lowpass_attenuates_high_frequencies() {
        let h = design_lowpass(64, 2000.0, 16000.0);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let sr = 16000.0;
        let energy = |freq: f64| {
            let x: Vec<f64> = (0..2048)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin())
                .collect();
            let y = fir_filter(&x, &h);
            y[64..].iter().map(|v| v * v).sum::<f64>()
        };
        let low = energy(500.0);
        let high = energy(6000.0);
        assert!(high < low / 100.0, "low {low}, high {high}");
    }
}
