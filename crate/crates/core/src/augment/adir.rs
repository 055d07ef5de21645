//! Energy-gated device impulse response convolution.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::wav::read_wav;
use crate::dsp::{Biquad, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const DEFAULT_ENERGY_THRESHOLD: f64 = 323.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdirConfig {
    pub enabled: bool,
    /// Probability of convolving a clip that passes the energy gate.
    pub p: f64,
    /// Clips with energy at or below this are never convolved.
    pub energy_threshold: f64,
    /// Directory of impulse-response WAVs; the built-in synthetic bank is
    /// used when absent.
    pub bank_dir: Option<PathBuf>,
}

impl Default for AdirConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            p: 0.6,
            energy_threshold: DEFAULT_ENERGY_THRESHOLD,
            bank_dir: None,
        }
    }
}

impl AdirConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config(format!("adir.p must be in [0, 1], got {}", self.p)));
        }
        if !(self.energy_threshold >= 0.0) {
            return Err(Error::config("adir.energy_threshold must be non-negative"));
        }
        Ok(())
    }
}

/// `sum(samples^2)`.
pub fn clip_energy(samples: &[f32]) -> f64 {
    samples.iter().map(|&s| (s as f64) * (s as f64)).sum()
}

/// Impulse responses at the pipeline sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct DirBank {
    pub irs: Vec<Vec<f32>>,
    pub sample_rate: u32,
}

impl DirBank {
    /// Eight generated responses: a direct path followed by exponentially
    /// decaying noise, each through its own band-pass / peaking EQ.
    pub fn synthetic(seed: u64) -> Self {
        let sr = SAMPLE_RATE as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1E5_0000);
        let centers = [250.0, 500.0, 900.0, 1500.0, 2500.0, 4000.0, 6000.0, 9000.0];
        let irs = centers
            .iter()
            .enumerate()
            .map(|(k, &fc)| {
                let len = 800 + 200 * k;
                let decay = 0.002 + 0.0015 * k as f64; // seconds
                let mut h: Vec<f32> = (0..len)
                    .map(|i| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        (0.3 * n * (-(i as f64) / (decay * sr)).exp()) as f32
                    })
                    .collect();
                h[0] += 1.0;
                let gain = if k % 2 == 0 { 8.0 } else { -8.0 };
                let h = Biquad::peaking(fc, 0.8, gain, sr).process(&h);
                let h = Biquad::bandpass(fc, 0.35, sr).process(&h);
                let peak = h.iter().fold(0.0f32, |m, v| m.max(v.abs()));
                h.iter().map(|v| v / peak).collect()
            })
            .collect();
        Self {
            irs,
            sample_rate: SAMPLE_RATE,
        }
    }

    /// Loads every `.wav` in `dir` (sorted by name), resampled once to
    /// `sample_rate`.
    pub fn load_dir(dir: &Path, sample_rate: u32) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .is_some_and(|x| x.eq_ignore_ascii_case("wav"))
            })
            .collect();
        paths.sort();
        let irs = paths
            .iter()
            .map(|p| read_wav(p).map(|w| w.resample(sample_rate).samples))
            .collect::<Result<Vec<_>>>()?;
        if irs.is_empty() {
            return Err(Error::config(format!(
                "impulse-response directory {} holds no WAV files",
                dir.display()
            )));
        }
        Ok(Self { irs, sample_rate })
    }

    pub fn from_config(cfg: &AdirConfig, seed: u64) -> Result<Self> {
        match &cfg.bank_dir {
            Some(d) => Self::load_dir(d, SAMPLE_RATE),
            None => Ok(Self::synthetic(seed)),
        }
    }

    pub fn len(&self) -> usize {
        self.irs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.irs.is_empty()
    }
}

/// Full linear convolution of `x` and `h` via FFT, truncated to `x.len()`.
pub fn convolve_truncated(x: &[f32], h: &[f32]) -> Vec<f32> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    let full = x.len() + h.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |s: &[f32]| {
        let mut v: Vec<Complex64> = s.iter().map(|&a| Complex64::new(a as f64, 0.0)).collect();
        v.resize(n, Complex64::new(0.0, 0.0));
        v
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    inv.process(&mut a);
    a[..x.len()].iter().map(|c| (c.re / n as f64) as f32).collect()
}

/// Convolves with `h`, truncates to the input length and rescales to the
/// input's peak amplitude.
pub fn apply_dir(w: &Waveform, h: &[f32]) -> Waveform {
    let mut y = convolve_truncated(&w.samples, h);
    let peak_in = w.peak();
    let peak_out = y.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak_out > 0.0 {
        let g = peak_in / peak_out;
        y.iter_mut().for_each(|v| *v *= g);
    }
    Waveform {
        samples: y,
        sample_rate: w.sample_rate,
    }
}

/// Auto device impulse response augmentation.
///
/// The probability gate is drawn first; a clip that passes it is convolved
/// with a uniformly chosen response only when its energy exceeds the
/// threshold. Every other clip is returned unchanged.
pub fn adir<R: Rng>(w: &Waveform, cfg: &AdirConfig, bank: &DirBank, rng: &mut R) -> Result<Waveform> {
    cfg.validate()?;
    if cfg.enabled && cfg.p > 0.0 && bank.is_empty() {
        return Err(Error::config("adir is enabled but the impulse-response bank is empty"));
    }
    if !cfg.enabled || rng.gen::<f64>() >= cfg.p {
        return Ok(w.clone());
    }
    if clip_energy(&w.samples) <= cfg.energy_threshold {
        return Ok(w.clone());
    }
    let h = &bank.irs[rng.gen_range(0..bank.len())];
    Ok(apply_dir(w, h))
}
