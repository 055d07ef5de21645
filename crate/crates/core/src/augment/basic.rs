//! Time rolling and frequency masking.

use rand::Rng;

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Circular shift of a sequence by `shift` (positive moves content later).
pub fn roll<T: Copy>(x: &[T], shift: isize) -> Vec<T> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let s = shift.rem_euclid(n as isize) as usize;
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(&x[n - s..]);
    out.extend_from_slice(&x[..n - s]);
    out
}

/// Rolls every time row of a feature map by `shift` frames.
pub fn roll_time(x: &FeatureMap, shift: isize) -> Result<FeatureMap> {
    let (_, _, _, t) = x.dims4()?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(t) {
        let r = roll(row, shift);
        row.copy_from_slice(&r);
    }
    Ok(out)
}

fn draw_shift<R: Rng>(len: usize, max_shift: usize, rng: &mut R) -> Result<isize> {
    if max_shift >= len.max(1) {
        return Err(Error::config(format!(
            "roll max_shift {max_shift} must be smaller than the length {len}"
        )));
    }
    let m = max_shift as isize;
    Ok(rng.gen_range(-m..=m))
}

/// Rolls each sample of a batch by its own shift drawn uniformly from
/// `[-max_shift, max_shift]` frames.
pub fn time_roll<R: Rng>(x: &FeatureMap, max_shift: usize, rng: &mut R) -> Result<FeatureMap> {
    let (n, c, f, t) = x.dims4()?;
    let mut out = x.clone();
    let per = c * f * t;
    for b in 0..n {
        let s = draw_shift(t, max_shift, rng)?;
        for row in out.data_mut()[b * per..][..per].chunks_mut(t) {
            let r = roll(row, s);
            row.copy_from_slice(&r);
        }
    }
    Ok(out)
}

pub fn time_roll_waveform<R: Rng>(w: &Waveform, max_shift: usize, rng: &mut R) -> Result<Waveform> {
    let s = draw_shift(w.len(), max_shift, rng)?;
    Ok(Waveform {
        samples: roll(&w.samples, s),
        sample_rate: w.sample_rate,
    })
}

/// Sets frequency rows `start..start + width` of every sample to that
/// sample's mean.
pub fn mask_band(x: &FeatureMap, start: usize, width: usize) -> Result<FeatureMap> {
    let (n, c, f, t) = x.dims4()?;
    if start + width > f {
        return Err(Error::shape(format!(
            "mask band {start}..{} exceeds {f} bins",
            start + width
        )));
    }
    let mut out = x.clone();
    if width == 0 {
        return Ok(out);
    }
    let per = c * f * t;
    for b in 0..n {
        let item = &mut out.data_mut()[b * per..][..per];
        let mean = (item.iter().map(|&v| v as f64).sum::<f64>() / per as f64) as f32;
        for ch in 0..c {
            item[(ch * f + start) * t..][..width * t].fill(mean);
        }
    }
    Ok(out)
}

/// Masks one band per sample of width uniform in `[0, max_width]`.
pub fn freq_mask<R: Rng>(x: &FeatureMap, max_width: usize, rng: &mut R) -> Result<FeatureMap> {
    let (n, c, f, t) = x.dims4()?;
    if max_width > f {
        return Err(Error::config(format!("mask max_width {max_width} exceeds {f} bins")));
    }
    let per = c * f * t;
    let mut data = Vec::with_capacity(x.len());
    for b in 0..n {
        let width = rng.gen_range(0..=max_width);
        let start = rng.gen_range(0..=f - width);
        let item = crate::tensor::Tensor::new(vec![1, c, f, t], x.data()[b * per..][..per].to_vec())?;
        data.extend_from_slice(mask_band(&item, start, width)?.data());
    }
    crate::tensor::Tensor::new(x.shape().to_vec(), data)
}
