//! WAV decoding and log-Mel filterbank features.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

/// Floor applied before the logarithm.
pub const ENERGY_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    /// Pre-emphasis coefficient; `None` disables it.
    pub pre_emphasis: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 40,
            pre_emphasis: None,
        }
    }
}

impl MelConfig {
    pub fn window_len(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }
}

/// Mono 16-bit PCM samples scaled into `[-1, 1)`, plus the sample rate.
pub fn wav_read(path: impl AsRef<Path>) -> Result<(Vec<f32>, u32)> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Audio(format!(
            "{}: unsupported channel count {}",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Audio(format!(
            "{}: only 16-bit PCM is supported (got {:?}, {} bits)",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    Ok((samples, spec.sample_rate))
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK Mel scale spanning `0..sample_rate/2`.
///
/// Filter `m` rises linearly from edge `m` to its peak at edge `m+1` and falls
/// to zero at edge `m+2`, where the `n_mels + 2` edges are equally spaced in
/// Mel. Weights are evaluated at each FFT bin's centre frequency.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// Edge frequencies in Hz, `n_mels + 2` of them.
    pub edges_hz: Vec<f64>,
    /// `n_mels × (fft_size/2 + 1)` weights.
    pub weights: Tensor2<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, fft_size: usize, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = fft_size / 2 + 1;
        let mut weights = Tensor2::zeros(n_mels, n_bins);
        for m in 0..n_mels {
            let (lo, c, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for k in 0..n_bins {
                weights[(m, k)] = triangle(bin_hz(k, fft_size, sample_rate), lo, c, hi);
            }
        }
        Self { edges_hz, weights }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..self.edges_hz.len() - 1]
    }
}

fn bin_hz(k: usize, fft_size: usize, sample_rate: u32) -> f64 {
    k as f64 * sample_rate as f64 / fft_size as f64
}

fn triangle(f: f64, lo: f64, c: f64, hi: f64) -> f64 {
    if f <= lo || f >= hi {
        0.0
    } else if f <= c {
        (f - lo) / (c - lo)
    } else {
        (hi - f) / (hi - c)
    }
}

/// Symmetric Hamming window.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Number of frames for `samples` samples: `1 + floor((S - win) / hop)`.
pub fn frame_count(samples: usize, win: usize, hop: usize) -> Option<usize> {
    (samples >= win && hop > 0).then(|| 1 + (samples - win) / hop)
}

/// Log-Mel features, one row per frame.
pub struct LogMel {
    config: MelConfig,
    sample_rate: u32,
    win: usize,
    hop: usize,
    fft_size: usize,
    window: Vec<f64>,
    filterbank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

impl LogMel {
    pub fn new(config: MelConfig, sample_rate: u32) -> Result<Self> {
        let win = config.window_len(sample_rate);
        let hop = config.hop_len(sample_rate);
        if win == 0 || hop == 0 || config.n_mels == 0 {
            return Err(Error::InvalidArgument(format!(
                "window {win}, hop {hop}, n_mels {} must all be positive",
                config.n_mels
            )));
        }
        let fft_size = win.next_power_of_two();
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        Ok(Self {
            window: hamming(win),
            filterbank: MelFilterbank::new(config.n_mels, fft_size, sample_rate),
            config,
            sample_rate,
            win,
            hop,
            fft_size,
            fft,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn compute(&self, samples: &[f32]) -> Result<Tensor2<f32>> {
        let frames = frame_count(samples.len(), self.win, self.hop).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "signal of {} samples is shorter than one {}-sample window",
                samples.len(),
                self.win
            ))
        })?;
        let signal: Vec<f64> = match self.config.pre_emphasis {
            None => samples.iter().map(|&s| s as f64).collect(),
            Some(a) => {
                let mut prev = 0.0;
                samples
                    .iter()
                    .map(|&s| {
                        let s = s as f64;
                        let out = s - a * prev;
                        prev = s;
                        out
                    })
                    .collect()
            }
        };
        let n_bins = self.fft_size / 2 + 1;
        let mut out = Tensor2::zeros(frames, self.config.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        let mut mag = vec![0.0f64; n_bins];
        for t in 0..frames {
            let start = t * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < self.win {
                    Complex::new(signal[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (m, b) in mag.iter_mut().zip(&buf) {
                *m = b.norm();
            }
            for m in 0..self.config.n_mels {
                let energy: f64 = self
                    .filterbank
                    .weights
                    .row(m)
                    .iter()
                    .zip(&mag)
                    .map(|(w, a)| w * a)
                    .sum();
                out[(t, m)] = energy.max(ENERGY_FLOOR).ln() as f32;
            }
        }
        Ok(out)
    }
}

/// One-shot convenience wrapper around [`LogMel`].
pub fn log_mel(samples: &[f32], sample_rate: u32, config: &MelConfig) -> Result<Tensor2<f32>> {
    LogMel::new(config.clone(), sample_rate)?.compute(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sixteen_khz_second_gives_98_frames() {
        let cfg = MelConfig::default();
        assert_eq!(cfg.window_len(16000), 400);
        assert_eq!(cfg.hop_len(16000), 160);
        let out = log_mel(&vec![0.1; 16000], 16000, &cfg).unwrap();
        assert_eq!(out.shape(), (98, 40));
    }

    #[test]
    fn silence_hits_the_floor() {
        let out = log_mel(&vec![0.0; 4000], 16000, &MelConfig::default()).unwrap();
        let floor = (ENERGY_FLOOR.ln()) as f32;
        assert!(out.as_slice().iter().all(|&v| v == floor));
    }

    #[test]
    fn short_signal_is_rejected() {
        assert!(log_mel(&[0.0; 399], 16000, &MelConfig::default()).is_err());
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 100.0, 1000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn filters_peak_at_one() {
        let fb = MelFilterbank::new(40, 512, 16000);
        assert_eq!(fb.edges_hz.len(), 42);
        assert!((fb.edges_hz[41] - 8000.0).abs() < 1e-6);
        for m in 0..40 {
            let peak = fb.weights.row(m).iter().cloned().fold(0.0, f64::max);
            assert!(peak > 0.0 && peak <= 1.0);
        }
    }

    proptest! {
        #[test]
        fn output_is_finite_for_finite_input(
            xs in prop::collection::vec(-1.0f32..1.0, 400..1200)
        ) {
            let out = log_mel(&xs, 16000, &MelConfig::default()).unwrap();
            prop_assert!(out.is_finite());
            prop_assert_eq!(out.rows(), frame_count(xs.len(), 400, 160).unwrap());
        }
    }
}
