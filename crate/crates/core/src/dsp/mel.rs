use std::sync::Arc;

use log::warn;
use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

use super::{MelConfig, Waveform};
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Complex STFT, stored bin-major: `data[bin * frames + frame]`.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<Complex32>,
}

impl Spectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> Complex32 {
        self.data[bin * self.frames + frame]
    }

    pub fn power(&self) -> Vec<f32> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank `[n_mels x n_fft/2+1]`.
///
/// Filters are spaced evenly on the HTK mel scale. A triangle narrower than
/// one FFT bin is widened to span at least one bin on each side of its peak so
/// that no filter row is empty.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    weights: Vec<f32>,
    /// Non-zero column range of each row.
    spans: Vec<(usize, usize)>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n_bins = cfg.n_bins();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let (m_lo, m_hi) = (hz_to_mel(cfg.fmin as f64), hz_to_mel(cfg.fmax as f64));
        let pts: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0f32; cfg.n_mels * n_bins];
        let mut spans = Vec::with_capacity(cfg.n_mels);
        for m in 0..cfg.n_mels {
            let c = pts[m + 1];
            let lo = pts[m].min(c - bin_hz);
            let hi = pts[m + 2].max(c + bin_hz);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            let mut span = (usize::MAX, 0);
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                let v = if f > lo && f <= c {
                    (f - lo) / (c - lo)
                } else if f > c && f < hi {
                    (hi - f) / (hi - c)
                } else {
                    0.0
                };
                if v > 0.0 {
                    *w = v as f32;
                    span = (span.0.min(k), k + 1);
                }
            }
            spans.push(if span.0 == usize::MAX { (0, 0) } else { span });
        }
        Ok(Self {
            n_mels: cfg.n_mels,
            n_bins,
            weights,
            spans,
            centers_hz: pts[1..=cfg.n_mels].to_vec(),
        })
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn row(&self, m: usize) -> &[f32] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Peak frequency of each filter.
    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Mel energies of one power spectrum column.
    pub fn apply(&self, power: &[f32]) -> Vec<f32> {
        (0..self.n_mels)
            .map(|m| {
                let (a, b) = self.spans[m];
                let row = &self.row(m)[a..b];
                row.iter().zip(&power[a..b]).map(|(w, p)| w * p).sum()
            })
            .collect()
    }
}

fn periodic_hann(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let x = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            (0.5 - 0.5 * x.cos()) as f32
        })
        .collect()
}

/// Mirror index for reflection padding without edge repetition.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Reusable STFT and mel state for one configuration.
pub struct FeatureExtractor {
    cfg: MelConfig,
    window: Vec<f32>,
    fft: Arc<dyn Fft<f32>>,
    filterbank: MelFilterbank,
}

impl FeatureExtractor {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        let filterbank = MelFilterbank::new(cfg)?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg: cfg.clone(),
            window: periodic_hann(cfg.n_fft),
            fft,
            filterbank,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Centered, Hann-windowed STFT with reflection padding of `n_fft / 2`.
    pub fn stft(&self, samples: &[f32]) -> Result<Spectrogram> {
        if samples.is_empty() {
            return Err(Error::Input("stft of an empty waveform".into()));
        }
        let n_fft = self.cfg.n_fft;
        let half = (n_fft / 2) as isize;
        let frames = self.cfg.centered_frames(samples.len());
        let bins = self.cfg.n_bins();
        let mut data = vec![Complex32::new(0.0, 0.0); bins * frames];
        let mut buf = vec![Complex32::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex32::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for f in 0..frames {
            let start = (f * self.cfg.hop) as isize - half;
            for (i, b) in buf.iter_mut().enumerate() {
                let s = samples[reflect(start + i as isize, samples.len())];
                *b = Complex32::new(s * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, v) in buf[..bins].iter().enumerate() {
                data[k * frames + f] = *v;
            }
        }
        Ok(Spectrogram { bins, frames, data })
    }

    /// `log(mel_power + floor)` as a `1 x 1 x n_mels x frames` map.
    ///
    /// Clips of the wrong rate are resampled and clips of the wrong length are
    /// padded or cropped, each with a warning.
    pub fn log_mel(&self, w: &Waveform) -> Result<FeatureMap> {
        if w.is_empty() {
            return Err(Error::Input("log_mel of an empty waveform".into()));
        }
        let mut clip;
        let mut src = w;
        if w.sample_rate != self.cfg.sample_rate {
            warn!(
                "resampling clip from {} Hz to {} Hz",
                w.sample_rate, self.cfg.sample_rate
            );
            clip = w.resample(self.cfg.sample_rate);
            src = &clip;
        }
        if src.len() != self.cfg.clip_samples {
            warn!(
                "clip has {} samples, expected {}; padding or cropping",
                src.len(),
                self.cfg.clip_samples
            );
            clip = src.fit_length(self.cfg.clip_samples);
            src = &clip;
        }
        let spec = self.stft(&src.samples)?;
        let power = spec.power();
        let (n_mels, frames) = (self.cfg.n_mels, self.cfg.frames);
        let mut out = vec![0f32; n_mels * frames];
        let mut column = vec![0f32; spec.bins];
        for f in 0..frames {
            for (k, c) in column.iter_mut().enumerate() {
                *c = power[k * spec.frames + f];
            }
            for (m, e) in self.filterbank.apply(&column).into_iter().enumerate() {
                out[m * frames + f] = (e + self.cfg.log_floor).ln();
            }
        }
        FeatureMap::new(vec![1, 1, n_mels, frames], out)
    }
}

/// One-shot STFT; prefer [`FeatureExtractor`] when processing many clips.
pub fn stft(w: &Waveform, cfg: &MelConfig) -> Result<Spectrogram> {
    FeatureExtractor::new(cfg)?.stft(&w.samples)
}

/// One-shot log-mel features.
pub fn log_mel(w: &Waveform, cfg: &MelConfig) -> Result<FeatureMap> {
    FeatureExtractor::new(cfg)?.log_mel(w)
}
