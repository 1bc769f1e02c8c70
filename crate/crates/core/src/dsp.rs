//! MFCC extraction for one audio chunk per grid tick.
//!
//! Hamming window, power spectrum, triangular mel filterbank, floored
//! natural log, orthonormal DCT-II.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub sample_rate: f64,
    /// Seconds of audio per MFCC vector.
    pub frame_len: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    /// Pre-emphasis coefficient; off when `None`.
    pub preemphasis: Option<f64>,
    /// Sinusoidal lifter length; off when `None`.
    pub lifter: Option<usize>,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: 16_000.0,
            frame_len: 0.1,
            n_fft: 2048,
            n_mels: 26,
            n_mfcc: 13,
            fmin: 0.0,
            fmax: 8_000.0,
            log_floor: 1e-10,
            preemphasis: None,
            lifter: None,
        }
    }
}

impl MfccConfig {
    pub fn frame_samples(&self) -> usize {
        (self.frame_len * self.sample_rate).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("mfcc: {msg}")));
        if !(self.sample_rate > 0.0) {
            return bad(format!("sample_rate must be > 0, got {}", self.sample_rate));
        }
        if self.frame_samples() == 0 {
            return bad("frame_len too short for one sample".into());
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < self.frame_samples() {
            return bad(format!(
                "n_fft {} must be a power of two >= {} frame samples",
                self.n_fft,
                self.frame_samples()
            ));
        }
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return bad(format!("need 1 <= n_mfcc ({}) <= n_mels ({})", self.n_mfcc, self.n_mels));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate / 2.0) {
            return bad(format!(
                "need 0 <= fmin < fmax <= sample_rate/2, got [{}, {}]",
                self.fmin, self.fmax
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be > 0".into());
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `(left, center, right)` corner frequencies of every filter, in Hz.
pub fn mel_filter_corners(cfg: &MfccConfig) -> Vec<(f64, f64, f64)> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    points.windows(3).map(|w| (w[0], w[1], w[2])).collect()
}

/// Triangular filters, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &MfccConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let n_bins = cfg.n_bins();
    let bin_hz = cfg.sample_rate / cfg.n_fft as f64;
    let mut bank = Array2::zeros((cfg.n_mels, n_bins));
    for (i, (left, center, right)) in mel_filter_corners(cfg).into_iter().enumerate() {
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let rising = (f - left) / (center - left);
            let falling = (right - f) / (right - center);
            bank[[i, k]] = rising.min(falling).max(0.0);
        }
        if bank.row(i).sum() <= 0.0 {
            return Err(Error::Config(format!(
                "mfcc: {} mel filters too many for n_fft {} (filter {i} covers no bin)",
                cfg.n_mels, cfg.n_fft
            )));
        }
    }
    Ok(bank)
}

/// Orthonormal DCT-II.
pub fn dct_ortho(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let scale0 = (1.0 / n as f64).sqrt();
    let scale = (2.0 / n as f64).sqrt();
    (0..n)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .sum();
            s * if k == 0 { scale0 } else { scale }
        })
        .collect()
}

/// Inverse of [`dct_ortho`] (orthonormal DCT-III).
pub fn idct_ortho(c: &[f64]) -> Vec<f64> {
    let n = c.len();
    let scale0 = (1.0 / n as f64).sqrt();
    let scale = (2.0 / n as f64).sqrt();
    (0..n)
        .map(|i| {
            c.iter()
                .enumerate()
                .map(|(k, &v)| {
                    let s = if k == 0 { scale0 } else { scale };
                    s * v * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()
                })
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfccVector {
    pub tick_time: f64,
    pub coefficients: Vec<f64>,
}

/// Reusable MFCC extractor: filterbank, window and FFT plan are built once.
#[derive(Clone)]
pub struct MfccExtractor {
    cfg: MfccConfig,
    bank: Array2<f64>,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    dct: Array2<f64>,
}

impl std::fmt::Debug for MfccExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccExtractor").field("cfg", &self.cfg).finish()
    }
}

impl MfccExtractor {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        let bank = mel_filterbank(&cfg)?;
        let n = cfg.frame_samples();
        let window = (0..n)
            .map(|i| {
                if n == 1 {
                    1.0
                } else {
                    0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()
                }
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        // rows of the DCT-II basis, truncated to n_mfcc
        let mut dct = Array2::zeros((cfg.n_mfcc, cfg.n_mels));
        for k in 0..cfg.n_mfcc {
            let mut unit = vec![0.0; cfg.n_mels];
            for i in 0..cfg.n_mels {
                unit.iter_mut().for_each(|u| *u = 0.0);
                unit[i] = 1.0;
                dct[[k, i]] = dct_ortho(&unit)[k];
            }
        }
        Ok(MfccExtractor {
            cfg,
            bank,
            window,
            fft,
            dct,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Array2<f64> {
        &self.bank
    }

    /// Floored natural-log mel energies of one frame.
    pub fn log_mel_energies(&self, samples: &[f64]) -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("audio frame".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("audio frame".into()));
        }
        let n = self.cfg.frame_samples();
        // keep the most recent n samples, zero-pad short tails
        let tail = &samples[samples.len().saturating_sub(n)..];
        let mut frame = vec![0.0; n];
        frame[..tail.len()].copy_from_slice(tail);
        if let Some(a) = self.cfg.preemphasis {
            for i in (1..n).rev() {
                frame[i] -= a * frame[i - 1];
            }
        }
        let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        for (i, (&x, &w)) in frame.iter().zip(&self.window).enumerate() {
            buf[i] = Complex::new(x * w, 0.0);
        }
        self.fft.process(&mut buf);
        let power = Array1::from_iter(buf[..self.cfg.n_bins()].iter().map(|c| c.norm_sqr()));
        let energies = self.bank.dot(&power);
        Ok(energies
            .iter()
            .map(|&e| e.max(self.cfg.log_floor).ln())
            .collect())
    }

    pub fn compute(&self, samples: &[f64], tick_time: f64) -> Result<MfccVector> {
        let logs = Array1::from(self.log_mel_energies(samples)?);
        let mut coefficients = self.dct.dot(&logs).to_vec();
        if let Some(l) = self.cfg.lifter.filter(|&l| l > 0) {
            for (k, c) in coefficients.iter_mut().enumerate() {
                *c *= 1.0 + (l as f64 / 2.0) * (PI * k as f64 / l as f64).sin();
            }
        }
        Ok(MfccVector {
            tick_time,
            coefficients,
        })
    }
}

/// One-shot MFCC of a single frame.
pub fn mfcc(samples: &[f64], cfg: &MfccConfig) -> Result<MfccVector> {
    MfccExtractor::new(cfg.clone())?.compute(samples, 0.0)
}
