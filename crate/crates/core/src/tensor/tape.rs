use log::warn;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    BiasAdd {
        x: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy {
        x: Var,
        s: Var,
    },
    Sum(Var),
    Mean {
        x: Var,
        axes: Vec<usize>,
    },
    Variance {
        x: Var,
        axes: Vec<usize>,
    },
    Softmax(Var),
    Log(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    InstanceNorm {
        x: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<T>,
    },
    FakeQuant {
        x: Var,
        lo: T,
        hi: T,
    },
    FoldWeight {
        w: Var,
        gamma: Var,
        inv_std: Vec<T>,
    },
    FoldBias {
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T> {
    pub mean: Vec<T>,
    /// Population (biased) variance.
    pub var: Vec<T>,
    /// Number of elements each channel statistic was computed over.
    pub count: usize,
}

/// Linear record of operations; backward replays it in exact reverse order.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the loss with respect to every `requires_grad` leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`; `None` when `v` is not a gradient-tracking leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    // ---- convolutions -------------------------------------------------

    /// Dense 2-d convolution; `w` is `Cout,Cin,Kh,Kw` and `b` has `Cout` entries.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let geom = ConvGeom::dense(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        if let Some(b) = b {
            if self.value(b).len() != geom.cout {
                return Err(Error::shape(format!(
                    "conv2d: bias has {} entries, expected {}",
                    self.value(b).len(),
                    geom.cout
                )));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(geom.out_shape(), out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// One `Kh x Kw` filter per channel; `w` is `C,1,Kh,Kw`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let geom =
            ConvGeom::depthwise(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let out = kernels::depthwise_forward(self.value(x).data(), &geom, self.value(w).data());
        let value = Tensor::new(geom.out_shape(), out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::Depthwise { x, w, geom }, rg))
    }

    /// Per-pixel linear map across channels; `w` is `Cout,Cin,1,1`.
    pub fn pointwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.value(w).shape();
        if ws.len() != 4 || ws[2] != 1 || ws[3] != 1 {
            return Err(Error::shape(format!(
                "pointwise: weight must be [Cout, Cin, 1, 1], got {ws:?}"
            )));
        }
        self.conv2d(x, w, b, (1, 1), (0, 0))
    }

    // ---- elementwise ---------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Adds a per-channel bias (`C` entries) to an `N,C,H,W` map.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4()?;
        self.check_channels(b, c, "bias_add")?;
        let hw = h * w;
        let bv = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[(i / hw) % c])
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::BiasAdd { x, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let value = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, k), rg)
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape(format!(
                "scale_by: factor must have one element, got shape {:?}",
                self.value(s).shape()
            )));
        }
        let k = self.value(s).data()[0];
        let value = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::ScaleBy { x, s }, rg))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        let rg = self.rg(&[x]);
        self.push(value, Op::Log(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    // ---- reductions ----------------------------------------------------

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean over `axes`; the reduced axes are removed from the shape.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let red = Reduction::new(self.value(x).shape(), axes)?;
        let mut out = vec![T::zero(); red.out_len];
        for (i, &v) in self.value(x).data().iter().enumerate() {
            out[red.map[i]] += v;
        }
        let cnt = T::from_usize(red.count).unwrap();
        out.iter_mut().for_each(|v| *v /= cnt);
        let value = Tensor::new(red.out_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Mean {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Population variance over `axes`.
    pub fn var(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let red = Reduction::new(self.value(x).shape(), axes)?;
        let mean = red.mean(self.value(x).data());
        let mut out = vec![T::zero(); red.out_len];
        for (i, &v) in self.value(x).data().iter().enumerate() {
            let d = v - mean[red.map[i]];
            out[red.map[i]] += d * d;
        }
        let cnt = T::from_usize(red.count).unwrap();
        out.iter_mut().for_each(|v| *v /= cnt);
        let value = Tensor::new(red.out_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Variance {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax over the last (class) axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let k = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax of a rank-0 tensor"))?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Mean over the spatial axes of an `N,C,H,W` map, keeping them as `1,1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let data = self.value(x).data();
        let out: Vec<T> = (0..n * c)
            .map(|i| data[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![n, c, 1, 1], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    // ---- normalization -------------------------------------------------

    /// Batch norm over `(N, H, W)` per channel using the batch's own
    /// statistics. Returns the output and the statistics for running-average
    /// updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, ChannelStats<T>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        self.check_channels(gamma, c, "batch_norm gamma")?;
        self.check_channels(beta, c, "batch_norm beta")?;
        let hw = h * w;
        let count = n * hw;
        let xd = self.value(x).data();
        let cnt = T::from_usize(count).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += xd[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
            }
            let m = s / cnt;
            let mut v = T::zero();
            for b in 0..n {
                for &val in &xd[(b * c + ch) * hw..][..hw] {
                    v += (val - m) * (val - m);
                }
            }
            mean[ch] = m;
            var[ch] = v / cnt;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = affine_norm(
            xd,
            (n, c, hw),
            |_, ch| (mean[ch], inv_std[ch]),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
        );
        Ok((v, ChannelStats { mean, var, count }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        self.check_channels(gamma, c, "batch_norm gamma")?;
        self.check_channels(beta, c, "batch_norm beta")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm: running statistics length mismatch"));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let (out, xhat) = affine_norm(
            self.value(x).data(),
            (n, c, h * w),
            |_, ch| (running_mean[ch], inv_std[ch]),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
        ))
    }

    /// Instance normalization: each `(n, c)` slice is standardized over its
    /// `H x W` extent with population variance.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let stats = instance_stats(self.value(x).data(), n * c, h * w);
        let inv_std: Vec<T> = stats
            .iter()
            .map(|&(_, v)| T::one() / (v + eps).sqrt())
            .collect();
        let ones = vec![T::one(); c];
        let zeros = vec![T::zero(); c];
        let (out, xhat) = affine_norm(
            self.value(x).data(),
            (n, c, h * w),
            |b, ch| (stats[b * c + ch].0, inv_std[b * c + ch]),
            &ones,
            &zeros,
        );
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::InstanceNorm { x, xhat, inv_std }, rg))
    }

    fn check_channels(&self, v: Var, c: usize, what: &str) -> Result<()> {
        if self.value(v).len() != c {
            return Err(Error::shape(format!(
                "{what}: expected {c} entries, got {}",
                self.value(v).len()
            )));
        }
        Ok(())
    }

    // ---- losses ----------------------------------------------------------

    /// Mean over the batch of `-sum_k target[k] * log softmax(logits)[k]`.
    /// `logits` is `N,K`; `targets` is a constant `N,K` distribution.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape() != targets.shape() {
            return Err(Error::shape(format!(
                "cross entropy: logits {:?} and targets {:?} must both be [N, K]",
                lv.shape(),
                targets.shape()
            )));
        }
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (row, (lrow, trow)) in probs
            .chunks_mut(k)
            .zip(lv.data().chunks(k).zip(targets.data().chunks(k)))
        {
            let m = lrow.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = lrow.iter().map(|&z| (z - m).exp()).sum::<T>().ln() + m;
            for (&z, &t) in lrow.iter().zip(trow) {
                if t != T::zero() {
                    total -= t * (z - lse);
                }
            }
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total / T::from_usize(n).unwrap());
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    // ---- quantization simulation -----------------------------------------

    /// Rounds onto an affine int8 grid and back. Gradients pass unchanged for
    /// inputs inside the representable range `[lo, hi]` and are zero outside.
    pub fn fake_quant(&mut self, x: Var, scale: T, zero_point: i32) -> Result<Var> {
        if scale <= T::zero() || !scale.is_finite() {
            return Err(Error::Quant(format!("scale must be positive, got {scale}")));
        }
        let zp = T::from_i32(zero_point).unwrap();
        let qmin = T::lit(-128.0);
        let qmax = T::lit(127.0);
        let value = self.value(x).map(|v| {
            let q = ((v / scale).round() + zp).max(qmin).min(qmax);
            (q - zp) * scale
        });
        let lo = (qmin - zp) * scale;
        let hi = (qmax - zp) * scale;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::FakeQuant { x, lo, hi }, rg))
    }

    /// Folds batch-norm scaling into conv weights:
    /// `w'[o, ..] = w[o, ..] * gamma[o] * inv_std[o]`.
    pub fn fold_bn_weight(&mut self, w: Var, gamma: Var, inv_std: &[T]) -> Result<Var> {
        let ws = self.value(w).shape().to_vec();
        let co = ws[0];
        self.check_channels(gamma, co, "fold gamma")?;
        if inv_std.len() != co {
            return Err(Error::shape("fold: inv_std length mismatch"));
        }
        let per = self.value(w).len() / co;
        let g = self.value(gamma).data();
        let data: Vec<T> = self
            .value(w)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * (g[i / per] * inv_std[i / per]))
            .collect();
        let value = Tensor::new(ws, data)?;
        let rg = self.rg(&[w, gamma]);
        Ok(self.push(
            value,
            Op::FoldWeight {
                w,
                gamma,
                inv_std: inv_std.to_vec(),
            },
            rg,
        ))
    }

    /// Bias after folding: `beta - mean * gamma * inv_std`.
    pub fn fold_bn_bias(&mut self, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> Result<Var> {
        let c = self.value(gamma).len();
        self.check_channels(beta, c, "fold beta")?;
        if mean.len() != c || inv_std.len() != c {
            return Err(Error::shape("fold: statistics length mismatch"));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let data: Vec<T> = (0..c).map(|i| b[i] - mean[i] * (g[i] * inv_std[i])).collect();
        let value = Tensor::new(vec![c], data)?;
        let rg = self.rg(&[gamma, beta]);
        Ok(self.push(
            value,
            Op::FoldBias {
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std: inv_std.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode sweep from the scalar `loss`. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            warn!("loss does not depend on any gradient-tracking tensor; gradients are zero");
        } else {
            grads[loss.0] = Some(vec![T::one()]);
            for i in (0..=loss.0).rev() {
                if matches!(self.nodes[i].op, Op::Leaf) {
                    continue;
                }
                let Some(g) = grads[i].take() else { continue };
                self.backprop(i, &g, &mut grads);
            }
        }

        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                (matches!(node.op, Op::Leaf) && node.requires_grad).then(|| {
                    let data = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                    Tensor::new(node.value.shape().to_vec(), data).expect("grad shape")
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let rgv = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(*x), geom, val(*w), g, rgv(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Depthwise { x, w, geom } => {
                let (dx, dw) = kernels::depthwise_backward(val(*x), geom, val(*w), g, rgv(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
            }
            Op::Relu(x) => {
                let d = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::BiasAdd { x, b } => {
                let xs = self.nodes[x.0].value.shape();
                let (c, hw) = (xs[1], xs[2] * xs[3]);
                if rgv(*b) {
                    let mut db = vec![T::zero(); c];
                    for (i, &gv) in g.iter().enumerate() {
                        db[(i / hw) % c] += gv;
                    }
                    self.accumulate(grads, *b, db);
                }
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if rgv(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if rgv(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(x, k) => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *k).collect());
            }
            Op::ScaleBy { x, s } => {
                let k = val(*s)[0];
                if rgv(*x) {
                    self.accumulate(grads, *x, g.iter().map(|&v| v * k).collect());
                }
                if rgv(*s) {
                    let ds = g.iter().zip(val(*x)).map(|(&a, &b)| a * b).sum::<T>();
                    self.accumulate(grads, *s, vec![ds]);
                }
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, vec![g[0]; val(*x).len()]);
            }
            Op::Mean { x, axes } => {
                let red = Reduction::new(self.nodes[x.0].value.shape(), axes).expect("axes");
                let inv = T::one() / T::from_usize(red.count).unwrap();
                let d = red.map.iter().map(|&o| g[o] * inv).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Variance { x, axes } => {
                let red = Reduction::new(self.nodes[x.0].value.shape(), axes).expect("axes");
                let xv = val(*x);
                let mean = red.mean(xv);
                let k = T::lit(2.0) / T::from_usize(red.count).unwrap();
                let d = xv
                    .iter()
                    .zip(&red.map)
                    .map(|(&v, &o)| g[o] * k * (v - mean[o]))
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                let mut d = vec![T::zero(); y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                    let dotp: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = yv * (gv - dotp);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Log(x) => {
                let d = val(*x).iter().zip(g).map(|(&v, &gv)| gv / v).collect();
                self.accumulate(grads, *x, d);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.nodes[x.0].value.shape();
                let hw = xs[2] * xs[3];
                let inv = T::one() / T::from_usize(hw).unwrap();
                let d = (0..xs.iter().product::<usize>())
                    .map(|j| g[j / hw] * inv)
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = node.value.dims4().unwrap();
                let hw = h * w;
                let gm = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * hw;
                        for j in o..o + hw {
                            dbeta[ch] += g[j];
                            dgamma[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if rgv(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::from_usize(n * hw).unwrap();
                    for ch in 0..c {
                        let k = gm[ch] * inv_std[ch];
                        for b in 0..n {
                            let o = (b * c + ch) * hw;
                            for j in o..o + hw {
                                dx[j] = if *batch_stats {
                                    k * (g[j] - (dbeta[ch] + xhat[j] * dgamma[ch]) / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::InstanceNorm { x, xhat, inv_std } => {
                let (n, c, h, w) = node.value.dims4().unwrap();
                let hw = h * w;
                let m = T::from_usize(hw).unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for s in 0..n * c {
                    let o = s * hw;
                    let gs = &g[o..o + hw];
                    let xs = &xhat[o..o + hw];
                    let sum_g: T = gs.iter().copied().sum();
                    let sum_gx: T = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                    for j in 0..hw {
                        dx[o + j] = inv_std[s] * (gs[j] - (sum_g + xs[j] * sum_gx) / m);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let n = self.nodes[logits.0].value.shape()[0];
                let k = g[0] / T::from_usize(n).unwrap();
                let d = probs
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| (p - t) * k)
                    .collect();
                self.accumulate(grads, *logits, d);
            }
            Op::FakeQuant { x, lo, hi } => {
                let d = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v >= *lo && v <= *hi { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::FoldWeight { w, gamma, inv_std } => {
                let co = inv_std.len();
                let wv = val(*w);
                let per = wv.len() / co;
                let gm = val(*gamma);
                if rgv(*w) {
                    let d = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * (gm[i / per] * inv_std[i / per]))
                        .collect();
                    self.accumulate(grads, *w, d);
                }
                if rgv(*gamma) {
                    let mut dg = vec![T::zero(); co];
                    for (i, (&gv, &v)) in g.iter().zip(wv).enumerate() {
                        dg[i / per] += gv * v * inv_std[i / per];
                    }
                    self.accumulate(grads, *gamma, dg);
                }
            }
            Op::FoldBias {
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let dg = (0..g.len()).map(|i| -g[i] * mean[i] * inv_std[i]).collect();
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, g.to_vec());
            }
        }
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// `(mean, population variance)` of each contiguous slice of length `len`.
/// Per-slice mean and biased variance, accumulated in f64.
pub(crate) fn instance_stats<T: Real>(data: &[T], slices: usize, len: usize) -> Vec<(T, T)> {
    let cnt = len as f64;
    (0..slices)
        .map(|s| {
            let sl = &data[s * len..(s + 1) * len];
            let m = sl.iter().map(|x| x.to_f64().unwrap()).sum::<f64>() / cnt;
            let v = sl
                .iter()
                .map(|x| (x.to_f64().unwrap() - m).powi(2))
                .sum::<f64>()
                / cnt;
            (T::from_f64(m).unwrap(), T::from_f64(v).unwrap())
        })
        .collect()
}

/// `y = gamma[c] * (x - mean) * inv_std + beta[c]`, returning `(y, xhat)`.
fn affine_norm<T: Real>(
    x: &[T],
    (n, c, hw): (usize, usize, usize),
    stats: impl Fn(usize, usize) -> (T, T),
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let (m, is) = stats(b, ch);
            let o = (b * c + ch) * hw;
            for j in o..o + hw {
                let xh = (x[j] - m) * is;
                xhat[j] = xh;
                out[j] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (out, xhat)
}

/// Maps each input element to its slot in a reduction over `axes`.
struct Reduction {
    out_shape: Vec<usize>,
    out_len: usize,
    count: usize,
    map: Vec<usize>,
}

impl Reduction {
    fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank || reduced[a] {
                return Err(Error::InvalidAxis { axis: a, rank });
            }
            reduced[a] = true;
        }
        let mut out_shape: Vec<usize> = (0..rank)
            .filter(|&a| !reduced[a])
            .map(|a| shape[a])
            .collect();
        let count: usize = (0..rank).filter(|&a| reduced[a]).map(|a| shape[a]).product();
        let out_len: usize = out_shape.iter().product();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let total: usize = shape.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            let mut o = 0;
            for a in 0..rank {
                if !reduced[a] {
                    o = o * shape[a] + idx[a];
                }
            }
            map.push(o);
            for a in (0..rank).rev() {
                idx[a] += 1;
                if idx[a] < shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(Self {
            out_shape,
            out_len,
            count,
            map,
        })
    }

    fn mean<T: Real>(&self, x: &[T]) -> Vec<T> {
        let mut m = vec![T::zero(); self.out_len];
        for (i, &v) in x.iter().enumerate() {
            m[self.map[i]] += v;
        }
        let cnt = T::from_usize(self.count).unwrap();
        m.iter_mut().for_each(|v| *v /= cnt);
        m
    }
}
