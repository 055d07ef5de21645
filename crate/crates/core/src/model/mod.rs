//! The DS-FlexiNet student: residual normalization, a two-convolution stride-2
//! stem, stages of depthwise-separable residual blocks and a pooled pointwise
//! classifier.

mod cost;
pub mod norm;
mod presets;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{fake_quant_weight, QatState};
use crate::tensor::{ChannelStats, Real, Tape, Tensor, Var};

pub use cost::{conv_cost, count_params_macs, cost_report, ConvKind, CostReport, LayerCost};
pub use norm::{instance_norm_channel, instance_norm_freq, res_norm, ResNormParams, NORM_EPS};
pub use presets::{preset, PRESET_NAMES};

pub const NUM_CLASSES: usize = 10;

/// Where residual normalization is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResNormPlacement {
    /// On the input spectrogram.
    Input,
    /// On the stem output.
    PostStem,
    /// Disabled (ablation).
    None,
}

/// One stage: `blocks` blocks at `channels`, the first strided by `stride`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub input_channels: usize,
    /// Input extent (mel bins, frames).
    pub input_size: (usize, usize),
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    pub resnorm: ResNormPlacement,
    pub resnorm_lambda_init: f32,
    pub bn_momentum: f32,
}

impl Default for ArchConfig {
    fn default() -> Self {
        preset("sm-a").expect("sm-a preset")
    }
}

/// A depthwise-separable residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::config(format!("block stride must be 1 or 2, got {stride}")));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::config("block channel counts must be positive"));
        }
        Ok(Self {
            in_channels,
            out_channels,
            stride,
        })
    }

    /// The shortcut needs a strided 1x1 projection when shapes differ.
    pub fn has_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::config(format!(
                "num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.input_channels == 0 || self.stem_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.stages.is_empty() {
            return Err(Error::config("at least one stage is required"));
        }
        let mut prev = self.stem_channels;
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 {
                return Err(Error::config(format!("stage {i} has no blocks")));
            }
            if s.channels < prev {
                return Err(Error::config(format!(
                    "stage {i} narrows channels from {prev} to {}; channels must not decrease",
                    s.channels
                )));
            }
            BlockSpec::new(prev, s.channels, s.stride)?;
            prev = s.channels;
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::config("bn_momentum must be in (0, 1]"));
        }
        Ok(())
    }

    /// Block specs in forward order.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut out = Vec::new();
        let mut prev = self.stem_channels;
        for s in &self.stages {
            for b in 0..s.blocks {
                let stride = if b == 0 { s.stride } else { 1 };
                out.push(BlockSpec {
                    in_channels: prev,
                    out_channels: s.channels,
                    stride,
                });
                prev = s.channels;
            }
        }
        out
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.channels)
    }
}

/// Named tensor in the model's parameter or buffer list.
#[derive(Clone, Debug, PartialEq)]
pub struct Named<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct BnRef {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
    /// Index into the model's batch-norm list.
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvLayer {
    pub name: String,
    pub kind: ConvKind,
    pub weight: usize,
    pub bias: Option<usize>,
    pub bn: Option<BnRef>,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockLayers {
    pub spec: BlockSpec,
    pub dw: ConvLayer,
    pub pw: ConvLayer,
    pub proj: Option<ConvLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Plan {
    pub lambda: Option<usize>,
    pub stem: Vec<ConvLayer>,
    pub blocks: Vec<BlockLayers>,
    pub head: ConvLayer,
}

/// Train uses batch statistics in batch norm; eval uses running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Result of recording a forward pass.
pub struct Forward<T> {
    /// `N x num_classes` logits.
    pub logits: Var,
    /// Tape handles of every parameter, in [`FlexiNet::params`] order.
    pub params: Vec<Var>,
    /// Batch statistics of each batch norm (train mode without QAT only).
    pub bn_stats: Vec<Option<ChannelStats<T>>>,
}

/// The network: parameters, batch-norm buffers and the layer plan.
#[derive(Clone, Debug, PartialEq)]
pub struct FlexiNet<T: Real = f32> {
    cfg: ArchConfig,
    params: Vec<Named<T>>,
    buffers: Vec<Named<T>>,
    plan: Plan,
    bn_count: usize,
}

struct Builder<'a, T: Real> {
    params: Vec<Named<T>>,
    buffers: Vec<Named<T>>,
    bn_count: usize,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Named { name, value });
        self.params.len() - 1
    }

    fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| T::lit(self.rng.gen_range(-bound..bound)))
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnRef {
        let gamma = self.param(format!("{prefix}.bn.gamma"), Tensor::full(&[c], T::one()));
        let beta = self.param(format!("{prefix}.bn.beta"), Tensor::zeros(&[c]));
        self.buffers.push(Named {
            name: format!("{prefix}.bn.running_mean"),
            value: Tensor::zeros(&[c]),
        });
        self.buffers.push(Named {
            name: format!("{prefix}.bn.running_var"),
            value: Tensor::full(&[c], T::one()),
        });
        let slot = self.bn_count;
        self.bn_count += 1;
        BnRef {
            gamma,
            beta,
            mean: self.buffers.len() - 2,
            var: self.buffers.len() - 1,
            slot,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        kind: ConvKind,
        cin: usize,
        cout: usize,
        stride: usize,
        with_bn: bool,
        relu: bool,
    ) -> ConvLayer {
        let (shape, fan_in, pad) = match kind {
            ConvKind::Dense => (vec![cout, cin, 3, 3], cin * 9, 1),
            ConvKind::Depthwise => (vec![cin, 1, 3, 3], 9, 1),
            ConvKind::Pointwise => (vec![cout, cin, 1, 1], cin, 0),
        };
        let w = self.kaiming(&shape, fan_in);
        let weight = self.param(format!("{name}.weight"), w);
        let bias = (!with_bn).then(|| self.param(format!("{name}.bias"), Tensor::zeros(&[cout])));
        let bn = with_bn.then(|| self.bn(name, cout));
        ConvLayer {
            name: name.to_string(),
            kind,
            weight,
            bias,
            bn,
            stride,
            pad,
            relu,
        }
    }
}

impl FlexiNet<f32> {
    /// Builds a freshly initialized network: Kaiming-uniform (fan-in) conv
    /// weights, unit/zero batch-norm affine parameters.
    pub fn build(cfg: &ArchConfig, seed: u64) -> Result<Self> {
        Self::build_generic(cfg, seed)
    }
}

impl<T: Real> FlexiNet<T> {
    pub fn build_generic(cfg: &ArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: Vec::new(),
            buffers: Vec::new(),
            bn_count: 0,
            rng: &mut rng,
        };
        let lambda = (cfg.resnorm != ResNormPlacement::None).then(|| {
            b.param(
                "resnorm.lambda".into(),
                Tensor::scalar(T::lit(cfg.resnorm_lambda_init as f64)),
            )
        });
        let c = cfg.stem_channels;
        let stem = vec![
            b.conv("stem.0", ConvKind::Dense, cfg.input_channels, c, 2, true, true),
            b.conv("stem.1", ConvKind::Dense, c, c, 2, true, true),
        ];
        let blocks = cfg
            .blocks()
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                let p = format!("block.{i}");
                let dw = b.conv(
                    &format!("{p}.dw"),
                    ConvKind::Depthwise,
                    spec.in_channels,
                    spec.in_channels,
                    spec.stride,
                    true,
                    true,
                );
                let pw = b.conv(
                    &format!("{p}.pw"),
                    ConvKind::Pointwise,
                    spec.in_channels,
                    spec.out_channels,
                    1,
                    true,
                    false,
                );
                let proj = spec.has_projection().then(|| {
                    b.conv(
                        &format!("{p}.proj"),
                        ConvKind::Pointwise,
                        spec.in_channels,
                        spec.out_channels,
                        spec.stride,
                        true,
                        false,
                    )
                });
                BlockLayers { spec, dw, pw, proj }
            })
            .collect();
        let head = b.conv(
            "head",
            ConvKind::Pointwise,
            cfg.final_channels(),
            cfg.num_classes,
            1,
            false,
            false,
        );
        let plan = Plan {
            lambda,
            stem,
            blocks,
            head,
        };
        Ok(Self {
            cfg: cfg.clone(),
            params: b.params,
            buffers: b.buffers,
            plan,
            bn_count: b.bn_count,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Named<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Named<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Named<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Named<T>] {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffers
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    /// Current residual-normalization lambda, if enabled.
    pub fn resnorm_lambda(&self) -> Option<T> {
        self.plan.lambda.map(|i| self.params[i].value.data()[0])
    }

    /// Same network in another float type.
    pub fn cast<U: Real>(&self) -> FlexiNet<U> {
        let conv = |v: &[Named<T>]| {
            v.iter()
                .map(|n| Named {
                    name: n.name.clone(),
                    value: n.value.cast(),
                })
                .collect()
        };
        FlexiNet {
            cfg: self.cfg.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            plan: self.plan.clone(),
            bn_count: self.bn_count,
        }
    }

    /// Replaces parameters and buffers by name; every tensor must be present
    /// with the expected shape.
    pub fn load_tensors(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        for slot in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            let t = lookup(&slot.name)
                .ok_or_else(|| Error::Load(format!("missing tensor '{}'", slot.name)))?;
            if t.shape() != slot.value.shape() {
                return Err(Error::Load(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    slot.name,
                    t.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = t;
        }
        Ok(())
    }

    /// Records a forward pass. Parameters enter the tape as gradient-tracking
    /// leaves. With `qat`, batch norm is folded into the preceding conv using
    /// running statistics, weights are fake-quantized symmetrically and every
    /// activation site is observed and fake-quantized.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        mode: Mode,
        mut qat: Option<&mut QatState>,
    ) -> Result<Forward<T>> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.input_channels {
            return Err(Error::shape(format!(
                "model expects [N, {}, F, T] input, got {shape:?}",
                self.cfg.input_channels
            )));
        }
        let pv: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect();
        let mut stats: Vec<Option<ChannelStats<T>>> = vec![None; self.bn_count];
        let eps = T::lit(NORM_EPS);

        let mut x = input;
        if self.cfg.resnorm == ResNormPlacement::Input {
            x = norm::res_norm_on_tape(tape, x, pv[self.plan.lambda.unwrap()], eps)?;
        }
        if let Some(q) = qat.as_deref_mut() {
            x = q.activation(tape, "input", x)?;
        }
        for layer in &self.plan.stem {
            x = self.conv_layer(tape, x, layer, &pv, mode, qat.as_deref_mut(), &mut stats)?;
        }
        if self.cfg.resnorm == ResNormPlacement::PostStem {
            x = norm::res_norm_on_tape(tape, x, pv[self.plan.lambda.unwrap()], eps)?;
            if let Some(q) = qat.as_deref_mut() {
                x = q.activation(tape, "resnorm", x)?;
            }
        }
        for (i, block) in self.plan.blocks.iter().enumerate() {
            let y = self.conv_layer(tape, x, &block.dw, &pv, mode, qat.as_deref_mut(), &mut stats)?;
            let y = self.conv_layer(tape, y, &block.pw, &pv, mode, qat.as_deref_mut(), &mut stats)?;
            let shortcut = match &block.proj {
                Some(p) => self.conv_layer(tape, x, p, &pv, mode, qat.as_deref_mut(), &mut stats)?,
                None => x,
            };
            let sum = tape.add(y, shortcut)?;
            x = tape.relu(sum);
            if let Some(q) = qat.as_deref_mut() {
                x = q.activation(tape, &format!("block.{i}.out"), x)?;
            }
        }
        x = tape.global_avg_pool(x)?;
        if let Some(q) = qat.as_deref_mut() {
            x = q.activation(tape, "pool", x)?;
        }
        let logits = self.conv_layer(tape, x, &self.plan.head, &pv, mode, qat.as_deref_mut(), &mut stats)?;
        let n = shape[0];
        let logits = tape.reshape(logits, &[n, self.cfg.num_classes])?;
        Ok(Forward {
            logits,
            params: pv,
            bn_stats: stats,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_layer(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        layer: &ConvLayer,
        pv: &[Var],
        mode: Mode,
        qat: Option<&mut QatState>,
        stats: &mut [Option<ChannelStats<T>>],
    ) -> Result<Var> {
        let eps = T::lit(NORM_EPS);
        let mut w = pv[layer.weight];
        let mut bias = layer.bias.map(|b| pv[b]);
        let quantized = qat.is_some();
        if quantized {
            if let Some(bn) = layer.bn {
                let mean = self.buffers[bn.mean].value.data();
                let inv_std: Vec<T> = self.buffers[bn.var]
                    .value
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                w = tape.fold_bn_weight(w, pv[bn.gamma], &inv_std)?;
                bias = Some(tape.fold_bn_bias(pv[bn.gamma], pv[bn.beta], mean, &inv_std)?);
            }
            w = fake_quant_weight(tape, w)?;
        }
        let s = (layer.stride, layer.stride);
        let p = (layer.pad, layer.pad);
        let mut y = match layer.kind {
            ConvKind::Depthwise => {
                let y = tape.depthwise_conv2d(x, w, s, p)?;
                match bias {
                    Some(b) => tape.bias_add(y, b)?,
                    None => y,
                }
            }
            _ => tape.conv2d(x, w, bias, s, p)?,
        };
        if !quantized {
            if let Some(bn) = layer.bn {
                let (g, b) = (pv[bn.gamma], pv[bn.beta]);
                y = match mode {
                    Mode::Train => {
                        let (out, st) = tape.batch_norm_train(y, g, b, eps)?;
                        stats[bn.slot] = Some(st);
                        out
                    }
                    Mode::Eval => tape.batch_norm_eval(
                        y,
                        g,
                        b,
                        self.buffers[bn.mean].value.data(),
                        self.buffers[bn.var].value.data(),
                        eps,
                    )?,
                };
            }
        }
        if layer.relu {
            y = tape.relu(y);
        }
        if let Some(q) = qat {
            y = q.activation(tape, &layer.name, y)?;
        }
        Ok(y)
    }

    /// Folds batch statistics from a training forward pass into the running
    /// averages (unbiased variance, configured momentum).
    pub fn update_running_stats(&mut self, stats: &[Option<ChannelStats<T>>]) {
        let m = T::lit(self.cfg.bn_momentum as f64);
        let refs: Vec<BnRef> = self.bn_refs();
        for bn in refs {
            let Some(st) = &stats[bn.slot] else { continue };
            let unbias = if st.count > 1 {
                T::from_usize(st.count).unwrap() / T::from_usize(st.count - 1).unwrap()
            } else {
                T::one()
            };
            let mean = self.buffers[bn.mean].value.data_mut();
            for (r, &b) in mean.iter_mut().zip(&st.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            let var = self.buffers[bn.var].value.data_mut();
            for (r, &b) in var.iter_mut().zip(&st.var) {
                *r = (T::one() - m) * *r + m * b * unbias;
            }
        }
    }

    pub(crate) fn bn_refs(&self) -> Vec<BnRef> {
        let mut out = Vec::new();
        let mut push = |l: &ConvLayer| out.extend(l.bn);
        self.plan.stem.iter().for_each(&mut push);
        for b in &self.plan.blocks {
            push(&b.dw);
            push(&b.pw);
            if let Some(p) = &b.proj {
                push(p);
            }
        }
        push(&self.plan.head);
        out
    }

    /// Eval-mode logits for a batch of features.
    pub fn predict_logits(&self, features: &Tensor<T>, qat: Option<&mut QatState>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let out = self.forward(&mut tape, x, Mode::Eval, qat)?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Index of the largest logit in each row.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}
