//! Synthetic ten-scene, nine-device corpus.
//!
//! Every scene is band-limited noise plus two tones at class-specific
//! frequencies with random jitter, modulation and loudness. Every device
//! applies a fixed EQ chain, a short impulse response, a gain offset and a
//! noise floor. Devices S4-S6 use colorations unlike any training device and
//! only appear in the test split.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClipRecord, Device, Split, SCENES};
use crate::augment::convolve_truncated;
use crate::distill::fnv1a;
use crate::dsp::wav::write_wav;
use crate::dsp::{Biquad, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

const CLIP_SAMPLES: usize = SAMPLE_RATE as usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Clips per (scene, seen device) in the training split.
    pub train_per_cell: usize,
    /// Clips per (scene, device) in the test split, for all nine devices.
    pub test_per_cell: usize,
    /// Clips per (scene, seen device) held out for fusion fitting.
    pub unused_per_cell: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_per_cell: 12,
            test_per_cell: 6,
            unused_per_cell: 4,
            seed: 7,
        }
    }
}

/// Spectral signature of one scene class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneProfile {
    pub band: (f64, f64),
    pub tones: [f64; 2],
    /// Typical RMS level.
    pub rms: f64,
    /// Amplitude-modulation rate in Hz shared by the tones and the band.
    pub mod_rate: f64,
}

pub fn scene_profile(scene: usize) -> SceneProfile {
    const P: [((f64, f64), [f64; 2], f64, f64); 10] = [
        ((200.0, 1200.0), [440.0, 1870.0], 0.10, 2.0),
        ((80.0, 400.0), [120.0, 2400.0], 0.14, 9.0),
        ((300.0, 2500.0), [700.0, 3300.0], 0.12, 4.5),
        ((1000.0, 4000.0), [250.0, 5200.0], 0.08, 12.0),
        ((3000.0, 8000.0), [1100.0, 6100.0], 0.06, 3.0),
        ((500.0, 3000.0), [330.0, 2900.0], 0.09, 7.0),
        ((150.0, 900.0), [990.0, 4400.0], 0.11, 14.0),
        ((800.0, 5000.0), [560.0, 7300.0], 0.10, 5.5),
        ((60.0, 600.0), [180.0, 1500.0], 0.16, 10.5),
        ((400.0, 1800.0), [820.0, 3800.0], 0.12, 1.2),
    ];
    let (band, tones, rms, mod_rate) = P[scene];
    SceneProfile {
        band,
        tones,
        rms,
        mod_rate,
    }
}

/// Fixed coloration of one recording device.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceProfile {
    pub device: Device,
    pub eq: Vec<Biquad>,
    pub ir: Vec<f32>,
    pub gain_db: f64,
    /// RMS of the additive white noise floor.
    pub noise_floor: f64,
}

impl DeviceProfile {
    pub fn apply(&self, x: &[f32], rng: &mut ChaCha8Rng) -> Vec<f32> {
        let mut y = x.to_vec();
        for f in &self.eq {
            y = f.process(&y);
        }
        if self.ir.len() > 1 {
            y = convolve_truncated(&y, &self.ir);
        }
        let g = 10f64.powf(self.gain_db / 20.0) as f32;
        for v in &mut y {
            let n: f64 = StandardNormal.sample(rng);
            *v = *v * g + (n * self.noise_floor) as f32;
        }
        y
    }
}

fn device_ir(device: Device, len: usize, decay: f64, level: f64) -> Vec<f32> {
    if len <= 1 {
        return vec![1.0];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x1D_0000 + device.index() as u64);
    let mut h: Vec<f32> = (0..len)
        .map(|i| {
            let n: f64 = StandardNormal.sample(&mut rng);
            (level * n * (-(i as f64) / decay).exp()) as f32
        })
        .collect();
    h[0] = 1.0;
    h
}

pub fn device_profile(device: Device) -> DeviceProfile {
    let sr = SAMPLE_RATE as f64;
    let pk = |f, g| Biquad::peaking(f, 1.0, g, sr);
    let (eq, ir, gain_db, noise_floor) = match device {
        Device::A => (vec![], device_ir(device, 1, 1.0, 0.0), 0.0, 3e-4),
        Device::B => (
            vec![Biquad::highpass(60.0, 0.7, sr), pk(2000.0, 4.0)],
            device_ir(device, 96, 20.0, 0.2),
            -2.0,
            6e-4,
        ),
        Device::C => (
            vec![Biquad::lowpass(12000.0, 0.7, sr), pk(800.0, -4.0)],
            device_ir(device, 128, 30.0, 0.2),
            2.0,
            5e-4,
        ),
        Device::S1 => (vec![pk(200.0, 6.0)], device_ir(device, 64, 15.0, 0.25), -3.0, 8e-4),
        Device::S2 => (vec![pk(3000.0, -6.0)], device_ir(device, 160, 40.0, 0.2), 3.0, 8e-4),
        Device::S3 => (
            vec![Biquad::lowpass(8000.0, 0.7, sr), pk(1000.0, 5.0)],
            device_ir(device, 96, 25.0, 0.25),
            -1.0,
            1e-3,
        ),
        Device::S4 => (
            vec![Biquad::highpass(500.0, 0.7, sr), pk(4000.0, 9.0), pk(1200.0, -6.0)],
            device_ir(device, 256, 60.0, 0.3),
            -9.0,
            1.5e-3,
        ),
        Device::S5 => (
            vec![Biquad::lowpass(3500.0, 0.7, sr), pk(600.0, 8.0), pk(1800.0, -8.0)],
            device_ir(device, 192, 50.0, 0.3),
            7.0,
            1.5e-3,
        ),
        Device::S6 => (
            vec![pk(300.0, -9.0), pk(900.0, 9.0), pk(5000.0, -9.0)],
            device_ir(device, 384, 90.0, 0.35),
            -6.0,
            2e-3,
        ),
    };
    DeviceProfile {
        device,
        eq,
        ir,
        gain_db,
        noise_floor,
    }
}

/// Device-free scene audio for one clip.
fn scene_audio(scene: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let p = scene_profile(scene);
    let sr = SAMPLE_RATE as f64;
    let n = CLIP_SAMPLES;
    let white: Vec<f32> = (0..n)
        .map(|_| StandardNormal.sample(&mut *rng))
        .map(|v: f64| v as f32)
        .collect();
    let (lo, hi) = p.band;
    let fc = (lo * hi).sqrt();
    let q = fc / (hi - lo);
    let bp = Biquad::bandpass(fc, q, sr);
    let band = bp.process(&bp.process(&white));
    let band_rms = (band.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);

    // Common low-frequency rumble shared by every scene.
    let rumble_src: Vec<f32> = (0..n)
        .map(|_| StandardNormal.sample(&mut *rng))
        .map(|v: f64| v as f32)
        .collect();
    let rumble = Biquad::lowpass(300.0, 0.7, sr).process(&rumble_src);
    let rumble_rms = (rumble.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let rumble_level = rng.gen_range(0.1..0.6);

    let tone_db: [f64; 2] = [rng.gen_range(-8.0..4.0), rng.gen_range(-8.0..4.0)];
    let tones: Vec<(f64, f64, f64, f64, f64, f64)> = p
        .tones
        .iter()
        .zip(tone_db)
        .map(|(&f, db)| {
            let freq = f * (1.0 + rng.gen_range(-0.03..0.03));
            let amp = 10f64.powf(db / 20.0) * std::f64::consts::SQRT_2;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let am_rate = p.mod_rate * (1.0 + rng.gen_range(-0.06..0.06));
            let am_depth = rng.gen_range(0.6..0.95);
            let am_phase = rng.gen_range(0.0..2.0 * PI);
            (freq, amp, phase, am_rate, am_depth, am_phase)
        })
        .collect();
    // The band noise pulses at the scene rate too, so the class is visible
    // in the time envelope and not only in the long-term spectrum.
    let band_rate = p.mod_rate * (1.0 + rng.gen_range(-0.06..0.06));
    let band_depth = rng.gen_range(0.4..0.8);
    let band_phase = rng.gen_range(0.0..2.0 * PI);

    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let band_env = 1.0 - band_depth * 0.5 * (1.0 + (2.0 * PI * band_rate * t + band_phase).sin());
            let mut v = band_env * band[i] as f64 / band_rms + rumble_level * rumble[i] as f64 / rumble_rms;
            for &(f, a, ph, r, d, aph) in &tones {
                let env = 1.0 - d * 0.5 * (1.0 + (2.0 * PI * r * t + aph).sin());
                v += a * env * (2.0 * PI * f * t + ph).sin();
            }
            v
        })
        .collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let target = p.rms * 10f64.powf(rng.gen_range(-6.0..6.0) / 20.0);
    x.iter_mut().for_each(|v| *v *= target / rms);
    x.into_iter().map(|v| v as f32).collect()
}

/// A generated clip with its metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub record: ClipRecord,
    pub waveform: Waveform,
}

impl SyntheticSpec {
    /// Metadata of every clip the spec describes, in generation order.
    pub fn records(&self) -> Vec<ClipRecord> {
        let mut out = Vec::new();
        let mut push = |split: Split, per_cell: usize, devices: &[Device]| {
            for &device in devices {
                for scene in 0..SCENES.len() {
                    for i in 0..per_cell {
                        let city = format!("city{}", (i + scene) % 6);
                        let id = format!(
                            "{}-{city}-{}-{:04}-{}",
                            SCENES[scene],
                            split.as_str(),
                            i,
                            device.as_str().to_ascii_lowercase()
                        );
                        out.push(ClipRecord {
                            clip_id: id,
                            path: None,
                            scene,
                            device,
                            city,
                            split,
                        });
                    }
                }
            }
        };
        let seen: Vec<Device> = Device::seen().collect();
        push(Split::Train, self.train_per_cell, &seen);
        push(Split::Unused, self.unused_per_cell, &seen);
        push(Split::Test, self.test_per_cell, &Device::ALL);
        out
    }

    /// Audio of one clip, deterministic in `(seed, clip_id)`.
    pub fn render(&self, record: &ClipRecord) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&record.clip_id));
        let clean = scene_audio(record.scene, &mut rng);
        let samples = device_profile(record.device).apply(&clean, &mut rng);
        Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    /// Generates the corpus in memory.
    pub fn generate(&self) -> Vec<SynthClip> {
        self.records()
            .into_iter()
            .map(|record| {
                let waveform = self.render(&record);
                SynthClip { record, waveform }
            })
            .collect()
    }

    /// Writes `audio/<clip_id>.wav` (32-bit float) and a tab-separated
    /// `meta.csv` under `dir`, returning the records with their paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<ClipRecord>> {
        let audio = dir.join("audio");
        std::fs::create_dir_all(&audio)?;
        let mut meta = String::from("filename\tscene_label\tidentifier\tsource_label\tsplit\n");
        let mut out = Vec::new();
        for mut record in self.records() {
            let rel = format!("audio/{}.wav", record.clip_id);
            let path = dir.join(&rel);
            write_wav(&path, &self.render(&record))?;
            meta.push_str(&format!(
                "{rel}\t{}\t{}-{}\t{}\t{}\n",
                SCENES[record.scene],
                record.city,
                fnv1a(&record.clip_id) % 10_000,
                record.device.as_str().to_ascii_lowercase(),
                record.split.as_str()
            ));
            record.path = Some(path);
            out.push(record);
        }
        std::fs::write(dir.join("meta.csv"), meta)?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_per_cell + self.test_per_cell + self.unused_per_cell > 100_000 {
            return Err(Error::config("synthetic corpus is unreasonably large"));
        }
        Ok(())
    }
}
