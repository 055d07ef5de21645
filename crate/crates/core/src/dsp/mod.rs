//! Waveform to log-mel front end.

pub mod filter;
mod mel;
pub mod wav;

use serde::{Deserialize, Serialize};

pub use filter::Biquad;
pub use mel::{log_mel, stft, FeatureExtractor, MelFilterbank, Spectrogram};

use crate::error::{Error, Result};

/// Canonical sample rate of the pipeline.
pub const SAMPLE_RATE: u32 = 32_000;

/// Mono audio clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Zero-pads or crops to exactly `len` samples.
    pub fn fit_length(&self, len: usize) -> Waveform {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    /// Linear-interpolation resampling.
    pub fn resample(&self, target_rate: u32) -> Waveform {
        if target_rate == self.sample_rate || self.samples.is_empty() {
            return Waveform {
                samples: self.samples.clone(),
                sample_rate: target_rate,
            };
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let out_len = ((self.samples.len() as f64) / ratio).round().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..out_len)
            .map(|i| {
                let pos = i as f64 * ratio;
                let i0 = (pos.floor() as usize).min(last);
                let i1 = (i0 + 1).min(last);
                let frac = (pos - i0 as f64) as f32;
                self.samples[i0] * (1.0 - frac) + self.samples[i1] * frac
            })
            .collect();
        Waveform {
            samples,
            sample_rate: target_rate,
        }
    }
}

/// Log-mel front-end parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub fmin: f32,
    pub fmax: f32,
    pub log_floor: f32,
    /// Samples per clip after pad-or-crop.
    pub clip_samples: usize,
    /// Frames kept after dropping the trailing one.
    pub frames: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            n_mels: 256,
            n_fft: 2048,
            hop: 500,
            fmin: 0.0,
            fmax: 16_000.0,
            log_floor: 1e-5,
            clip_samples: 32_000,
            frames: 64,
        }
    }
}

impl MelConfig {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count of a centered STFT over `len` samples.
    pub fn centered_frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.n_fft < 2 || self.hop == 0 || self.n_mels == 0 {
            return Err(Error::config("mel config needs positive rate, fft, hop and mel count"));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f32 / 2.0)
        {
            return Err(Error::config(format!(
                "mel band edges must satisfy 0 <= fmin < fmax <= sr/2, got [{}, {}] at {} Hz",
                self.fmin, self.fmax, self.sample_rate
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::config("log_floor must be positive"));
        }
        if self.frames > self.centered_frames(self.clip_samples) {
            return Err(Error::config(format!(
                "{} frames requested but a {}-sample clip yields only {}",
                self.frames,
                self.clip_samples,
                self.centered_frames(self.clip_samples)
            )));
        }
        Ok(())
    }
}
