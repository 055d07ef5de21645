//! Int8 quantization: affine/symmetric specs, min-max observers, the
//! simulated-quantization state used during QAT, integer inference, and the
//! binary tensor container.

pub mod container;
mod int8;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use int8::{add_relu, convert_int8, global_avg_pool, QConv, QTensor, QWeight, QuantizedModel, Requant};

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;

/// Per-tensor int8 quantization parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub scale: f32,
    pub zero_point: i32,
    /// Range the spec was derived from.
    pub min: f32,
    pub max: f32,
}

impl QuantSpec {
    /// Affine spec covering `[min, max]` widened to include zero:
    /// `scale = (max - min) / 255`.
    pub fn affine(min: f32, max: f32) -> Self {
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let scale = if hi > lo { (hi - lo) / 255.0 } else { 1.0 };
        let zp = (QMIN as f32 - lo / scale).round() as i32;
        Self {
            scale,
            zero_point: zp.clamp(QMIN, QMAX),
            min: lo,
            max: hi,
        }
    }

    /// Symmetric spec for weights: zero point 0, `scale = max|w| / 127`.
    pub fn symmetric(max_abs: f32) -> Self {
        let scale = if max_abs > 0.0 { max_abs / 127.0 } else { 1.0 };
        Self {
            scale,
            zero_point: 0,
            min: -max_abs,
            max: max_abs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Quant(format!(
                "scale must be positive and finite, got {}",
                self.scale
            )));
        }
        if !(QMIN..=QMAX).contains(&self.zero_point) {
            return Err(Error::Quant(format!(
                "zero point {} outside int8 range",
                self.zero_point
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn quantize_value(&self, v: f32) -> i8 {
        ((v as f64 / self.scale as f64).round() as i32 + self.zero_point).clamp(QMIN, QMAX) as i8
    }

    #[inline]
    pub fn dequantize_value(&self, q: i8) -> f32 {
        (q as i32 - self.zero_point) as f32 * self.scale
    }
}

/// `clamp(round(t / scale) + zero_point, -128, 127)`, rounding half away
/// from zero.
pub fn quantize(t: &Tensor<f32>, q: &QuantSpec) -> Result<Vec<i8>> {
    q.validate()?;
    Ok(t.data().iter().map(|&v| q.quantize_value(v)).collect())
}

pub fn dequantize(data: &[i8], shape: &[usize], q: &QuantSpec) -> Result<Tensor<f32>> {
    q.validate()?;
    Tensor::new(
        shape.to_vec(),
        data.iter().map(|&v| q.dequantize_value(v)).collect(),
    )
}

/// Running min/max over every value seen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Observer {
    pub min: f32,
    pub max: f32,
    pub updates: u64,
}

impl Observer {
    pub fn update(&mut self, values: &[f32]) {
        if values.is_empty() {
            return;
        }
        let (lo, hi) = values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if self.updates == 0 {
            self.min = lo;
            self.max = hi;
        } else {
            self.min = self.min.min(lo);
            self.max = self.max.max(hi);
        }
        self.updates += 1;
    }

    pub fn is_calibrated(&self) -> bool {
        self.updates > 0
    }

    pub fn spec(&self) -> QuantSpec {
        QuantSpec::affine(self.min, self.max)
    }
}

/// Activation observers of one network, keyed by site name, plus whether
/// they still update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QatState {
    pub observers: BTreeMap<String, Observer>,
    pub frozen: bool,
}

impl QatState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Observes `x` (unless frozen) and rounds it onto the observed grid.
    pub fn activation<T: Real>(&mut self, tape: &mut Tape<T>, site: &str, x: Var) -> Result<Var> {
        let obs = self.observers.entry(site.to_string()).or_default();
        if !self.frozen {
            let vals: Vec<f32> = tape.value(x).data().iter().map(|v| v.as_f64() as f32).collect();
            obs.update(&vals);
        }
        if !obs.is_calibrated() {
            return Err(Error::Quant(format!(
                "observer '{site}' is frozen before seeing any data"
            )));
        }
        let spec = obs.spec();
        tape.fake_quant(x, T::lit(spec.scale as f64), spec.zero_point)
    }

    pub fn spec(&self, site: &str) -> Result<QuantSpec> {
        match self.observers.get(site) {
            Some(o) if o.is_calibrated() => Ok(o.spec()),
            _ => Err(Error::Quant(format!(
                "no calibrated observer for tensor '{site}'"
            ))),
        }
    }
}

/// Symmetric fake quantization of a weight tensor from its current range.
pub fn fake_quant_weight<T: Real>(tape: &mut Tape<T>, w: Var) -> Result<Var> {
    let spec = QuantSpec::symmetric(tape.value(w).max_abs().as_f64() as f32);
    tape.fake_quant(w, T::lit(spec.scale as f64), 0)
}
