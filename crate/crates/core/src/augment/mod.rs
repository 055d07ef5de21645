//! Training-time augmentation: Freq-MixStyle on feature batches,
//! energy-gated impulse-response convolution on waveforms, time rolling and
//! frequency masking.

mod adir;
mod basic;
mod fms;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adir::{
    adir, apply_dir, clip_energy, convolve_truncated, AdirConfig, DirBank, DEFAULT_ENERGY_THRESHOLD,
};
pub use basic::{freq_mask, mask_band, roll, roll_time, time_roll, time_roll_waveform};
pub use fms::{bin_stats, freq_mixstyle, freq_mixstyle_with, FmsConfig, FMS_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RollConfig {
    pub enabled: bool,
    /// Maximum shift as a fraction of the time axis.
    pub max_fraction: f64,
}

impl Default for RollConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_fraction: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub enabled: bool,
    /// Maximum masked band, in mel bins.
    pub max_width: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_width: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub fms: FmsConfig,
    pub adir: AdirConfig,
    pub roll: RollConfig,
    pub mask: MaskConfig,
}

impl AugmentConfig {
    /// Everything switched off.
    pub fn none() -> Self {
        let mut c = Self::default();
        c.fms.enabled = false;
        c.adir.enabled = false;
        c.roll.enabled = false;
        c.mask.enabled = false;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.fms.validate()?;
        self.adir.validate()?;
        if !(0.0..1.0).contains(&self.roll.max_fraction) {
            return Err(Error::config("roll.max_fraction must be in [0, 1)"));
        }
        Ok(())
    }

    /// Roll bound in frames for a time axis of `len`.
    pub fn max_roll(&self, len: usize) -> usize {
        ((len as f64 * self.roll.max_fraction).floor() as usize).min(len.saturating_sub(1))
    }
}

/// Independent generator for one clip: `seed XOR index`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index)
}
