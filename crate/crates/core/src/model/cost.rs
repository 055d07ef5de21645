//! Parameter and multiply-accumulate accounting computed from the
//! architecture config alone.

use serde::Serialize;

use super::{ArchConfig, ResNormPlacement};
use crate::error::Result;
use crate::tensor::conv_out_dim;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    /// Full 3x3 convolution.
    Dense,
    /// 3x3 per-channel convolution.
    Depthwise,
    /// 1x1 cross-channel convolution.
    Pointwise,
}

/// `(params, macs)` of one convolution producing an `out_h x out_w` map.
///
/// Dense: `Cout*Cin*K*K` weights and as many MACs per output pixel.
/// Depthwise: `C*K*K` weights, `K*K*C*H*W` MACs. Pointwise: `Cin*Cout`
/// weights, `Cin*Cout*H*W` MACs. A bias adds `Cout` parameters and no MACs.
pub fn conv_cost(
    kind: ConvKind,
    cin: usize,
    cout: usize,
    k: usize,
    out_h: usize,
    out_w: usize,
    bias: bool,
) -> (u64, u64) {
    let pix = (out_h * out_w) as u64;
    let weights = match kind {
        ConvKind::Dense => cout * cin * k * k,
        ConvKind::Depthwise => cin * k * k,
        ConvKind::Pointwise => cout * cin,
    } as u64;
    let bias_params = if bias { cout as u64 } else { 0 };
    (weights + bias_params, weights * pix)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub params: u64,
    pub macs: u64,
}

impl CostReport {
    /// Parameters in thousands and MACs in millions, as tabulated.
    pub fn summary(&self) -> String {
        format!(
            "{:.2}K params, {:.2}M MACs",
            self.params as f64 / 1e3,
            self.macs as f64 / 1e6
        )
    }
}

/// Per-layer costs. Batch norm contributes its two affine vectors and no
/// MACs (it folds into the preceding convolution at inference).
pub fn cost_report(cfg: &ArchConfig) -> Result<CostReport> {
    cfg.validate()?;
    let mut layers = Vec::new();
    let mut add = |name: String, (p, m): (u64, u64)| layers.push(LayerCost { name, params: p, macs: m });
    let bn = |c: usize| (2 * c as u64, 0u64);

    if cfg.resnorm != ResNormPlacement::None {
        add("resnorm".into(), (1, 0));
    }
    let (mut h, mut w) = cfg.input_size;
    let mut cin = cfg.input_channels;
    for i in 0..2 {
        h = conv_out_dim(h, 3, 2, 1)?;
        w = conv_out_dim(w, 3, 2, 1)?;
        let c = cfg.stem_channels;
        add(format!("stem.{i}"), conv_cost(ConvKind::Dense, cin, c, 3, h, w, false));
        add(format!("stem.{i}.bn"), bn(c));
        cin = c;
    }
    for (i, b) in cfg.blocks().iter().enumerate() {
        let oh = conv_out_dim(h, 3, b.stride, 1)?;
        let ow = conv_out_dim(w, 3, b.stride, 1)?;
        add(
            format!("block.{i}.dw"),
            conv_cost(ConvKind::Depthwise, b.in_channels, b.in_channels, 3, oh, ow, false),
        );
        add(format!("block.{i}.dw.bn"), bn(b.in_channels));
        add(
            format!("block.{i}.pw"),
            conv_cost(ConvKind::Pointwise, b.in_channels, b.out_channels, 1, oh, ow, false),
        );
        add(format!("block.{i}.pw.bn"), bn(b.out_channels));
        if b.has_projection() {
            add(
                format!("block.{i}.proj"),
                conv_cost(ConvKind::Pointwise, b.in_channels, b.out_channels, 1, oh, ow, false),
            );
            add(format!("block.{i}.proj.bn"), bn(b.out_channels));
        }
        h = oh;
        w = ow;
    }
    add(
        "head".into(),
        conv_cost(
            ConvKind::Pointwise,
            cfg.final_channels(),
            cfg.num_classes,
            1,
            1,
            1,
            true,
        ),
    );
    let params = layers.iter().map(|l| l.params).sum();
    let macs = layers.iter().map(|l| l.macs).sum();
    Ok(CostReport {
        layers,
        params,
        macs,
    })
}

/// Total `(params, macs)` of the network described by `cfg`.
pub fn count_params_macs(cfg: &ArchConfig) -> Result<(u64, u64)> {
    let r = cost_report(cfg)?;
    Ok((r.params, r.macs))
}
