//! Freq-MixStyle: per-frequency-bin instance statistics mixed between
//! batch partners.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Tensor};

/// Added to the per-bin variance before taking the standard deviation.
pub const FMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FmsConfig {
    pub enabled: bool,
    /// Probability that a batch is mixed.
    pub p: f64,
    /// Shape of the symmetric Beta distribution the mixing weight is drawn
    /// from.
    pub alpha: f64,
}

impl Default for FmsConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            p: 0.4,
            alpha: 0.3,
        }
    }
}

impl FmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config(format!("fms.p must be in [0, 1], got {}", self.p)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("fms.alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// `(mean, std)` of every `(sample, frequency bin)` over channels and time,
/// laid out `N x F`.
pub fn bin_stats(x: &FeatureMap) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, f, t) = x.dims4()?;
    let d = x.data();
    let count = (c * t) as f64;
    let mut mean = vec![0.0; n * f];
    let mut std = vec![0.0; n * f];
    for b in 0..n {
        for fi in 0..f {
            let rows = (0..c).map(|ch| &d[((b * c + ch) * f + fi) * t..][..t]);
            let m = rows.clone().flatten().map(|&v| v as f64).sum::<f64>() / count;
            let v = rows.flatten().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / count;
            mean[b * f + fi] = m;
            std[b * f + fi] = (v + FMS_EPS).sqrt();
        }
    }
    Ok((mean, std))
}

/// Mixes with explicit per-sample weights and partners: sample `b` is
/// normalized per bin, then rescaled with
/// `gamma[b] * own + (1 - gamma[b]) * partner[b]` statistics.
pub fn freq_mixstyle_with(x: &FeatureMap, gamma: &[f64], partner: &[usize]) -> Result<FeatureMap> {
    let (n, c, f, t) = x.dims4()?;
    if gamma.len() != n || partner.len() != n || partner.iter().any(|&p| p >= n) {
        return Err(Error::shape(format!(
            "mixstyle needs {n} weights and partners, got {} and {}",
            gamma.len(),
            partner.len()
        )));
    }
    let (mean, std) = bin_stats(x)?;
    let mut out = x.data().to_vec();
    for b in 0..n {
        let g = gamma[b];
        let p = partner[b];
        for fi in 0..f {
            let (m, s) = (mean[b * f + fi], std[b * f + fi]);
            let mm = g * m + (1.0 - g) * mean[p * f + fi];
            let ms = g * s + (1.0 - g) * std[p * f + fi];
            for ch in 0..c {
                for v in &mut out[((b * c + ch) * f + fi) * t..][..t] {
                    *v = (((*v as f64 - m) / s) * ms + mm) as f32;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Applies Freq-MixStyle to a batch with probability `cfg.p`.
///
/// An untriggered batch is returned unchanged. A triggered batch of one
/// sample has no partner and passes through with a warning.
pub fn freq_mixstyle<R: Rng>(x: &FeatureMap, cfg: &FmsConfig, rng: &mut R) -> Result<FeatureMap> {
    cfg.validate()?;
    let (n, ..) = x.dims4()?;
    if !cfg.enabled || rng.gen::<f64>() >= cfg.p {
        return Ok(x.clone());
    }
    if n < 2 {
        warn!("freq-mixstyle triggered on a batch of {n}; passing through");
        return Ok(x.clone());
    }
    let beta = Beta::new(cfg.alpha, cfg.alpha)
        .map_err(|e| Error::config(format!("fms.alpha: {e}")))?;
    let gamma: Vec<f64> = (0..n).map(|_| beta.sample(rng)).collect();
    let mut partner: Vec<usize> = (0..n).collect();
    partner.shuffle(rng);
    freq_mixstyle_with(x, &gamma, &partner)
}
