//! Integer inference: batch norm folded into int8 weights, int32
//! accumulators, fixed-point requantization between layers.

use std::collections::BTreeMap;

use super::{QatState, QuantSpec, QMAX, QMIN};
use crate::error::{Error, Result};
use crate::model::norm::{res_norm, ResNormParams};
use crate::model::{ArchConfig, ConvKind, FlexiNet, ResNormPlacement, NORM_EPS};
use crate::tensor::{conv_out_dim, Tensor};

/// Fixed-point multiplier: `x * multiplier * 2^-shift`, `multiplier` a Q31
/// mantissa in `[2^30, 2^31)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Requant {
    pub multiplier: i32,
    pub shift: u32,
}

impl Requant {
    pub fn new(m: f64) -> Result<Self> {
        if !(m >= 0.0 && m.is_finite()) {
            return Err(Error::Quant(format!("invalid requantization multiplier {m}")));
        }
        if m == 0.0 {
            return Ok(Self {
                multiplier: 0,
                shift: 0,
            });
        }
        let mut e = m.log2().floor() as i32 + 1;
        let mut mant = m / 2f64.powi(e);
        while mant >= 1.0 {
            mant /= 2.0;
            e += 1;
        }
        while mant < 0.5 {
            mant *= 2.0;
            e -= 1;
        }
        let mut q = (mant * 2f64.powi(31)).round() as i64;
        if q == 1 << 31 {
            q /= 2;
            e += 1;
        }
        let shift = 31 - e;
        if shift < 0 {
            return Err(Error::Quant(format!("requantization multiplier {m} too large")));
        }
        Ok(Self {
            multiplier: q as i32,
            shift: shift as u32,
        })
    }

    /// The multiplier this fixed-point pair represents.
    pub fn real(&self) -> f64 {
        self.multiplier as f64 * 2f64.powi(-(self.shift as i32))
    }

    /// `round(acc * real())`, halves rounded away from zero.
    #[inline]
    pub fn apply(&self, acc: i64) -> i64 {
        round_shift(acc as i128 * self.multiplier as i128, self.shift) as i64
    }
}

#[inline]
fn round_shift(p: i128, s: u32) -> i128 {
    if s == 0 {
        return p;
    }
    if s >= 126 {
        return 0;
    }
    let half = 1i128 << (s - 1);
    if p >= 0 {
        (p + half) >> s
    } else {
        -((-p + half) >> s)
    }
}

/// Extra fractional bits carried through the residual addition.
const ADD_FRAC_BITS: u32 = 16;

/// An int8 activation `N x C x H x W` with its quantization spec.
#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    pub shape: [usize; 4],
    pub data: Vec<i8>,
    pub spec: QuantSpec,
}

impl QTensor {
    pub fn quantize(t: &Tensor<f32>, spec: QuantSpec) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        Ok(Self {
            shape: [n, c, h, w],
            data: super::quantize(t, &spec)?,
            spec,
        })
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        let data = self.data.iter().map(|&q| self.spec.dequantize_value(q)).collect();
        Tensor::new(self.shape.to_vec(), data).expect("consistent shape")
    }
}

/// Int8 weights with their symmetric spec.
#[derive(Clone, Debug, PartialEq)]
pub struct QWeight {
    pub shape: Vec<usize>,
    pub data: Vec<i8>,
    pub spec: QuantSpec,
}

/// A convolution in integer form: int8 weights, int32 bias at scale
/// `input_scale * weight_scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct QConv {
    pub name: String,
    pub kind: ConvKind,
    pub weight: QWeight,
    pub bias: Vec<i32>,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
}

impl QConv {
    /// Runs the layer on `x`, producing an activation quantized with `out`.
    ///
    /// Padding positions contribute the input zero point, i.e. nothing after
    /// the zero point is subtracted.
    pub fn forward(&self, x: &QTensor, out: QuantSpec) -> Result<QTensor> {
        let [n, cin, h, w] = x.shape;
        let ws = &self.weight.shape;
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let depthwise = self.kind == ConvKind::Depthwise;
        if depthwise {
            if cout != cin || wcin != 1 {
                return Err(Error::shape(format!(
                    "{}: depthwise weight {ws:?} does not match {cin} input channels",
                    self.name
                )));
            }
        } else if wcin != cin {
            return Err(Error::shape(format!(
                "{}: weight expects {wcin} input channels, activation has {cin}",
                self.name
            )));
        }
        if self.bias.len() != cout {
            return Err(Error::shape(format!("{}: bias length mismatch", self.name)));
        }
        let (s, p) = (self.stride, self.pad);
        let oh = conv_out_dim(h, kh, s, p)?;
        let ow = conv_out_dim(w, kw, s, p)?;
        let rq = Requant::new(x.spec.scale as f64 * self.weight.spec.scale as f64 / out.scale as f64)?;
        let lo = if self.relu { out.zero_point.max(QMIN) } else { QMIN };

        // Centered, zero-padded input planes.
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let zp = x.spec.zero_point;
        let mut xc = vec![0i32; n * cin * ph * pw];
        for plane in 0..n * cin {
            for r in 0..h {
                let src = &x.data[(plane * h + r) * w..][..w];
                let dst = &mut xc[(plane * ph + r + p) * pw + p..][..w];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v as i32 - zp;
                }
            }
        }

        let wq = &self.weight.data;
        let mut data = vec![0i8; n * cout * oh * ow];
        let mut acc = vec![0i32; oh * ow];
        for b in 0..n {
            for o in 0..cout {
                acc.iter_mut().for_each(|a| *a = 0);
                let channels = if depthwise { o..o + 1 } else { 0..cin };
                for ci in channels {
                    let plane = &xc[(b * cin + ci) * ph * pw..][..ph * pw];
                    let wbase = if depthwise { o * kh * kw } else { (o * cin + ci) * kh * kw };
                    for i in 0..kh {
                        for j in 0..kw {
                            let wv = wq[wbase + i * kw + j] as i32;
                            if wv == 0 {
                                continue;
                            }
                            for r in 0..oh {
                                let row = &plane[(r * s + i) * pw + j..];
                                let arow = &mut acc[r * ow..][..ow];
                                for (c, a) in arow.iter_mut().enumerate() {
                                    *a += wv * row[c * s] as i32;
                                }
                            }
                        }
                    }
                }
                let bias = self.bias[o] as i64;
                let dst = &mut data[(b * cout + o) * oh * ow..][..oh * ow];
                for (d, &a) in dst.iter_mut().zip(&acc) {
                    let v = rq.apply(a as i64 + bias) + out.zero_point as i64;
                    *d = v.clamp(lo as i64, QMAX as i64) as i8;
                }
            }
        }
        Ok(QTensor {
            shape: [n, cout, oh, ow],
            data,
            spec: out,
        })
    }
}

/// `relu(a + b)` requantized to `out`.
pub fn add_relu(a: &QTensor, b: &QTensor, out: QuantSpec) -> Result<QTensor> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "residual add of {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let frac = (1u64 << ADD_FRAC_BITS) as f64;
    let ra = Requant::new(a.spec.scale as f64 / out.scale as f64 * frac)?;
    let rb = Requant::new(b.spec.scale as f64 / out.scale as f64 * frac)?;
    let lo = out.zero_point.max(QMIN) as i64;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let t = ra.apply((x as i32 - a.spec.zero_point) as i64)
                + rb.apply((y as i32 - b.spec.zero_point) as i64);
            let v = round_shift(t as i128, ADD_FRAC_BITS) as i64 + out.zero_point as i64;
            v.clamp(lo, QMAX as i64) as i8
        })
        .collect();
    Ok(QTensor {
        shape: a.shape,
        data,
        spec: out,
    })
}

/// Global average pool: int32 plane sums requantized by `1 / (H * W)`.
pub fn global_avg_pool(x: &QTensor, out: QuantSpec) -> Result<QTensor> {
    let [n, c, h, w] = x.shape;
    let hw = h * w;
    let rq = Requant::new(x.spec.scale as f64 / (hw as f64 * out.scale as f64))?;
    let data = x
        .data
        .chunks(hw)
        .map(|plane| {
            let s: i64 = plane.iter().map(|&v| (v as i32 - x.spec.zero_point) as i64).sum();
            (rq.apply(s) + out.zero_point as i64).clamp(QMIN as i64, QMAX as i64) as i8
        })
        .collect();
    Ok(QTensor {
        shape: [n, c, 1, 1],
        data,
        spec: out,
    })
}


/// A convolution slot in forward order and the activation it reads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct LayerSlot {
    pub name: String,
    pub kind: ConvKind,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
    pub input: String,
}

pub(crate) fn layer_layout(cfg: &ArchConfig) -> Vec<LayerSlot> {
    let slot = |name: String, kind, stride, relu, input: &str| LayerSlot {
        name,
        kind,
        stride,
        pad: if kind == ConvKind::Pointwise { 0 } else { 1 },
        relu,
        input: input.to_string(),
    };
    let mut out = vec![
        slot("stem.0".into(), ConvKind::Dense, 2, true, "input"),
        slot("stem.1".into(), ConvKind::Dense, 2, true, "stem.0"),
    ];
    let mut cur = if cfg.resnorm == ResNormPlacement::PostStem {
        "resnorm".to_string()
    } else {
        "stem.1".to_string()
    };
    for (i, b) in cfg.blocks().iter().enumerate() {
        let dw = format!("block.{i}.dw");
        out.push(slot(dw.clone(), ConvKind::Depthwise, b.stride, true, &cur));
        out.push(slot(format!("block.{i}.pw"), ConvKind::Pointwise, 1, false, &dw));
        if b.has_projection() {
            out.push(slot(format!("block.{i}.proj"), ConvKind::Pointwise, b.stride, false, &cur));
        }
        cur = format!("block.{i}.out");
    }
    out.push(slot("head".into(), ConvKind::Pointwise, 1, false, "pool"));
    out
}

/// Activation sites the integer model needs a spec for.
pub(crate) fn activation_sites(cfg: &ArchConfig) -> Vec<String> {
    let mut sites = vec!["input".to_string()];
    if cfg.resnorm == ResNormPlacement::PostStem {
        sites.push("resnorm".into());
    }
    sites.extend(layer_layout(cfg).into_iter().map(|l| l.name));
    sites.extend((0..cfg.blocks().len()).map(|i| format!("block.{i}.out")));
    sites.push("pool".into());
    sites
}

/// An int8 network. Residual normalization, when enabled, runs in float
/// before the activation it feeds is quantized.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    cfg: ArchConfig,
    lambda: Option<f32>,
    activations: BTreeMap<String, QuantSpec>,
    layers: Vec<QConv>,
}

/// Converts a float network plus calibrated observers into integer form.
///
/// Batch norm is folded into the preceding convolution from running
/// statistics exactly as during quantization-aware training, weights are
/// quantized symmetrically per tensor and biases become int32 at the product
/// of input and weight scales.
pub fn convert_int8(model: &FlexiNet<f32>, qat: &QatState) -> Result<QuantizedModel> {
    let cfg = model.config().clone();
    let mut activations = BTreeMap::new();
    for site in activation_sites(&cfg) {
        activations.insert(site.clone(), qat.spec(&site)?);
    }
    let eps = NORM_EPS as f32;
    let tensor = |n: &str| {
        model
            .param(n)
            .or_else(|| model.buffer(n))
            .ok_or_else(|| Error::Quant(format!("model has no tensor '{n}'")))
    };
    let mut layers = Vec::new();
    for slot in layer_layout(&cfg) {
        let name = &slot.name;
        let w = tensor(&format!("{name}.weight"))?;
        let cout = w.shape()[0];
        let per = w.len() / cout;
        let (wf, bf): (Vec<f32>, Vec<f32>) = if model.param(&format!("{name}.bn.gamma")).is_some() {
            let g = tensor(&format!("{name}.bn.gamma"))?.data();
            let beta = tensor(&format!("{name}.bn.beta"))?.data();
            let mean = tensor(&format!("{name}.bn.running_mean"))?.data();
            let var = tensor(&format!("{name}.bn.running_var"))?.data();
            let inv: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
            let wf = w
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (g[i / per] * inv[i / per]))
                .collect();
            let bf = (0..cout).map(|o| beta[o] - mean[o] * (g[o] * inv[o])).collect();
            (wf, bf)
        } else {
            (w.data().to_vec(), tensor(&format!("{name}.bias"))?.data().to_vec())
        };
        let in_spec = activations[&slot.input];
        let wt = Tensor::new(w.shape().to_vec(), wf)?;
        let wspec = QuantSpec::symmetric(wt.max_abs());
        let bias_scale = in_spec.scale as f64 * wspec.scale as f64;
        let bias = bf
            .iter()
            .map(|&b| (b as f64 / bias_scale).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
            .collect();
        layers.push(QConv {
            name: name.clone(),
            kind: slot.kind,
            weight: QWeight {
                shape: wt.shape().to_vec(),
                data: super::quantize(&wt, &wspec)?,
                spec: wspec,
            },
            bias,
            stride: slot.stride,
            pad: slot.pad,
            relu: slot.relu,
        });
    }
    QuantizedModel::from_parts(cfg, model.resnorm_lambda(), activations, layers)
}

impl QuantizedModel {
    /// Assembles a model from stored parts, checking them against the
    /// layout the config implies.
    pub fn from_parts(
        cfg: ArchConfig,
        lambda: Option<f32>,
        activations: BTreeMap<String, QuantSpec>,
        layers: Vec<QConv>,
    ) -> Result<Self> {
        cfg.validate()?;
        for site in activation_sites(&cfg) {
            match activations.get(&site) {
                Some(s) => s.validate()?,
                None => {
                    return Err(Error::Quant(format!(
                        "missing quantization spec for tensor '{site}'"
                    )))
                }
            }
        }
        let layout = layer_layout(&cfg);
        if layout.len() != layers.len() {
            return Err(Error::Quant(format!(
                "expected {} layers, got {}",
                layout.len(),
                layers.len()
            )));
        }
        for (slot, l) in layout.iter().zip(&layers) {
            if slot.name != l.name || slot.kind != l.kind {
                return Err(Error::Quant(format!(
                    "layer '{}' found where '{}' was expected",
                    l.name, slot.name
                )));
            }
            l.weight.spec.validate()?;
        }
        if (cfg.resnorm != ResNormPlacement::None) != lambda.is_some() {
            return Err(Error::Quant("residual-normalization lambda does not match config".into()));
        }
        Ok(Self {
            cfg,
            lambda,
            activations,
            layers,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn lambda(&self) -> Option<f32> {
        self.lambda
    }

    pub fn activations(&self) -> &BTreeMap<String, QuantSpec> {
        &self.activations
    }

    pub fn layers(&self) -> &[QConv] {
        &self.layers
    }

    /// Stored int8 weights plus int32 biases.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data.len() + l.bias.len())
            .sum::<usize>()
            + usize::from(self.lambda.is_some())
    }

    /// Sum of the activation scales along the forward path, a bound on the
    /// accumulated rounding a float simulation may differ by.
    pub fn scale_sum(&self) -> f64 {
        self.activations.values().map(|s| s.scale as f64).sum()
    }

    fn resnorm(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let params = ResNormParams {
            lambda: self.lambda.unwrap_or(0.0) as f64,
            epsilon: NORM_EPS,
        };
        res_norm(x, &params)
    }

    /// Integer forward pass on float features, returning dequantized
    /// `N x num_classes` logits.
    pub fn forward(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (n, c, _, _) = features.dims4()?;
        if c != self.cfg.input_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {c}",
                self.cfg.input_channels
            )));
        }
        let spec = |s: &str| self.activations[s];
        let mut x = if self.cfg.resnorm == ResNormPlacement::Input {
            QTensor::quantize(&self.resnorm(features)?, spec("input"))?
        } else {
            QTensor::quantize(features, spec("input"))?
        };
        let mut layers = self.layers.iter();
        let mut next = || layers.next().expect("layout checked at construction");
        for _ in 0..2 {
            let l = next();
            x = l.forward(&x, spec(&l.name))?;
        }
        if self.cfg.resnorm == ResNormPlacement::PostStem {
            x = QTensor::quantize(&self.resnorm(&x.dequantize())?, spec("resnorm"))?;
        }
        for (i, b) in self.cfg.blocks().iter().enumerate() {
            let dw = next();
            let pw = next();
            let y = dw.forward(&x, spec(&dw.name))?;
            let y = pw.forward(&y, spec(&pw.name))?;
            let shortcut = if b.has_projection() {
                let p = next();
                p.forward(&x, spec(&p.name))?
            } else {
                x
            };
            x = add_relu(&y, &shortcut, spec(&format!("block.{i}.out")))?;
        }
        x = global_avg_pool(&x, spec("pool"))?;
        let head = next();
        let logits = head.forward(&x, spec("head"))?;
        logits.dequantize().reshape(&[n, self.cfg.num_classes])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn requant_represents_multiplier() {
        for m in [1e-6, 0.003_17, 0.25, 0.5, 0.999_999, 1.0, 3.7] {
            let r = Requant::new(m).unwrap();
            assert!(r.multiplier >= 1 << 30, "{m}: {r:?}");
            assert!((r.real() - m).abs() <= m * 1e-9, "{m}: {}", r.real());
        }
        assert_eq!(Requant::new(0.0).unwrap().apply(12345), 0);
        assert!(Requant::new(-1.0).is_err());
    }

    #[test]
    fn requant_rounds_half_away_from_zero() {
        let half = Requant::new(0.5).unwrap();
        assert_eq!(half.apply(3), 2);
        assert_eq!(half.apply(-3), -2);
        assert_eq!(half.apply(5), 3);
        assert_eq!(half.apply(-5), -3);
        assert_eq!(half.apply(4), 2);
    }

    #[test]
    fn layout_wires_projection_to_block_input() {
        let cfg = crate::model::preset("sm-a").unwrap();
        let layout = layer_layout(&cfg);
        let proj = layout.iter().find(|l| l.name == "block.0.proj").unwrap();
        assert_eq!(proj.input, "stem.1");
        let dw1 = layout.iter().find(|l| l.name == "block.1.dw").unwrap();
        assert_eq!(dw1.input, "block.0.out");
        assert_eq!(layout.last().unwrap().input, "pool");
    }

    #[test]
    fn pooling_averages() {
        let spec = QuantSpec::affine(0.0, 2.55);
        let x = QTensor {
            shape: [1, 1, 2, 2],
            data: vec![-128, -28, -128, -28],
            spec,
        };
        let y = global_avg_pool(&x, spec).unwrap();
        assert_eq!(y.data, vec![-78]);
    }
}
