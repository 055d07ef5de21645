//! Shipped architecture configurations at four complexity budgets.

use super::{ArchConfig, ResNormPlacement, StageSpec, NUM_CLASSES};
use crate::error::{Error, Result};

pub const PRESET_NAMES: [&str; 4] = ["sm-a", "sm-b", "sm-c", "sm-d"];

fn stages(spec: &[(usize, usize, usize)]) -> Vec<StageSpec> {
    spec.iter()
        .map(|&(blocks, channels, stride)| StageSpec {
            blocks,
            channels,
            stride,
        })
        .collect()
}

/// Looks up a shipped configuration by name.
pub fn preset(name: &str) -> Result<ArchConfig> {
    let (stem, layout): (usize, &[(usize, usize, usize)]) = match name {
        "sm-a" => (16, &[(2, 32, 2), (2, 56, 2)]),
        "sm-b" => (24, &[(2, 40, 2), (2, 64, 2), (1, 72, 1)]),
        "sm-c" => (32, &[(2, 56, 2), (2, 88, 2), (1, 104, 1)]),
        "sm-d" => (48, &[(2, 96, 2), (2, 128, 2), (1, 160, 1)]),
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}' (expected one of {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(ArchConfig {
        input_channels: 1,
        input_size: (256, 64),
        stem_channels: stem,
        stages: stages(layout),
        num_classes: NUM_CLASSES,
        resnorm: ResNormPlacement::Input,
        resnorm_lambda_init: 0.1,
        bn_momentum: 0.1,
    })
}
