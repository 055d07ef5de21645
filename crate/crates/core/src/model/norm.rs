//! Instance and residual normalization on plain feature maps.
//!
//! The network records the same computations on a [`Tape`]; these functions
//! are the eager forms used by tooling and tests.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{FeatureMap, Real, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Residual normalization parameters: `lambda * x + IN(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNormParams {
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for ResNormParams {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            epsilon: NORM_EPS,
        }
    }
}

/// Per-`(n, c)` statistics over the `F x T` plane.
#[derive(Clone, Debug)]
pub struct InstanceStats<T> {
    /// `N x C` means.
    pub mean: Tensor<T>,
    /// `N x C` population variances.
    pub var: Tensor<T>,
}

/// Standardizes every `(batch, channel)` slice over frequency and time.
pub fn instance_norm_channel<T: Real>(
    x: &FeatureMap<T>,
    eps: T,
) -> Result<(FeatureMap<T>, InstanceStats<T>)> {
    let (n, c, _, _) = x.dims4()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.instance_norm(xv, eps)?;
    let mean = tape.mean(xv, &[2, 3])?;
    let var = tape.var(xv, &[2, 3])?;
    let stats = InstanceStats {
        mean: tape.value(mean).clone().reshape(&[n, c])?,
        var: tape.value(var).clone().reshape(&[n, c])?,
    };
    Ok((tape.value(y).clone(), stats))
}

/// `lambda * x + instance_norm_channel(x)`.
pub fn res_norm<T: Real>(x: &FeatureMap<T>, params: &ResNormParams) -> Result<FeatureMap<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let lambda = tape.constant(Tensor::scalar(T::lit(params.lambda)));
    let y = res_norm_on_tape(&mut tape, xv, lambda, T::lit(params.epsilon))?;
    Ok(tape.value(y).clone())
}

/// Records residual normalization with a (possibly trainable) scalar lambda.
pub fn res_norm_on_tape<T: Real>(tape: &mut Tape<T>, x: Var, lambda: Var, eps: T) -> Result<Var> {
    let normed = tape.instance_norm(x, eps)?;
    let kept = tape.scale_by(x, lambda)?;
    tape.add(kept, normed)
}

/// Frequency-wise instance normalization: each `(n, f)` row is standardized
/// over channels and time. Comparator only; the network does not use it.
pub fn instance_norm_freq<T: Real>(x: &FeatureMap<T>, eps: T) -> Result<FeatureMap<T>> {
    let (n, c, f, t) = x.dims4()?;
    let mut out = x.clone();
    let cnt = T::from_usize(c * t).unwrap();
    let d = x.data();
    for b in 0..n {
        for fi in 0..f {
            let idx = |ch: usize, ti: usize| ((b * c + ch) * f + fi) * t + ti;
            let mut s = T::zero();
            for ch in 0..c {
                for ti in 0..t {
                    s += d[idx(ch, ti)];
                }
            }
            let m = s / cnt;
            let mut v = T::zero();
            for ch in 0..c {
                for ti in 0..t {
                    let e = d[idx(ch, ti)] - m;
                    v += e * e;
                }
            }
            let inv = T::one() / (v / cnt + eps).sqrt();
            for ch in 0..c {
                for ti in 0..t {
                    out.data_mut()[idx(ch, ti)] = (d[idx(ch, ti)] - m) * inv;
                }
            }
        }
    }
    Ok(out)
}
