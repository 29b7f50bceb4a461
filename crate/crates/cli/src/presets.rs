//! Named architecture presets.
//!
//! `mlp-<D>` is a D-layer perceptron with hidden width 128 — the
//! desk-scale depth-sweep family. The VGG presets follow the published
//! channel/kernel/stride/padding tables; pool placement is chosen per
//! depth so the spatial chain stays valid on 32x32 inputs and ends at the
//! single linear classifier.

use crate::config::BnMode;
use crate::error::{CliError, Result};
use pclab_core::layers::{Activation, BatchNorm, Block, BlockOp, ConvBlock, DenseLayer, Network};
use pclab_core::tensor::{rand_init, InitScheme, Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchPreset {
    /// `depth` weight layers: depth-1 hidden dense layers of width 128.
    Mlp { depth: usize },
    /// Conv channels with per-block padding and pool placement, then
    /// dense layers of the given widths before the classifier.
    Vgg {
        channels: Vec<usize>,
        paddings: Vec<usize>,
        pool_after: Vec<bool>,
        hidden_dense: Vec<usize>,
    },
}

pub fn parse_arch(name: &str) -> Result<ArchPreset> {
    if let Some(d) = name.strip_prefix("mlp-") {
        let depth: usize = d
            .parse()
            .map_err(|_| CliError::Config(format!("bad mlp depth in {name:?}")))?;
        if !(2..=64).contains(&depth) {
            return Err(CliError::Config(format!("mlp depth {depth} out of range 2..=64")));
        }
        return Ok(ArchPreset::Mlp { depth });
    }
    Ok(match name {
        "vgg5-narrow" => ArchPreset::Vgg {
            channels: vec![16, 32, 64, 64],
            paddings: vec![1, 1, 1, 0],
            pool_after: vec![true, true, true, true],
            hidden_dense: vec![],
        },
        "vgg5" => ArchPreset::Vgg {
            channels: vec![128, 256, 512, 512],
            paddings: vec![1, 1, 1, 0],
            pool_after: vec![true, true, true, true],
            hidden_dense: vec![],
        },
        "vgg7" => ArchPreset::Vgg {
            channels: vec![128, 128, 256, 256, 512, 512],
            paddings: vec![1, 1, 1, 0, 1, 0],
            pool_after: vec![true, true, false, true, false, false],
            hidden_dense: vec![],
        },
        "vgg10" => ArchPreset::Vgg {
            channels: vec![64, 128, 128, 128, 256, 256, 256, 256, 512],
            paddings: vec![1; 9],
            pool_after: vec![true, false, true, false, true, false, true, false, true],
            hidden_dense: vec![],
        },
        "vgg15" => ArchPreset::Vgg {
            channels: vec![64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512],
            paddings: vec![1; 13],
            pool_after: vec![
                false, true, false, true, false, false, true, false, false, true, false, false,
                true,
            ],
            hidden_dense: vec![512],
        },
        other => return Err(CliError::Config(format!("unknown arch preset {other:?}"))),
    })
}

/// Layer count L of a preset.
pub fn preset_depth(preset: &ArchPreset) -> usize {
    match preset {
        ArchPreset::Mlp { depth } => *depth,
        ArchPreset::Vgg {
            channels,
            hidden_dense,
            ..
        } => channels.len() + hidden_dense.len() + 1,
    }
}

/// Instantiate a preset. The first block always reads raw input (identity
/// activation); `act` applies to every later block. `bn` only affects
/// presets that carry batch norm (the conv families); MLP presets never
/// have it.
pub fn build_network(
    preset: &ArchPreset,
    input_shape: &[usize],
    classes: usize,
    bn: BnMode,
    act: Activation,
    rng: &mut Rng,
) -> Result<Network> {
    let net = match preset {
        ArchPreset::Mlp { depth } => {
            let flat: usize = input_shape.iter().product();
            let mut dims = vec![flat];
            dims.extend(std::iter::repeat(128).take(depth - 1));
            dims.push(classes);
            let blocks: Vec<Block> = dims
                .windows(2)
                .enumerate()
                .map(|(i, w)| Block {
                    act_in: if i == 0 { Activation::Identity } else { act },
                    op: BlockOp::Dense(DenseLayer {
                        w: rand_init(&[w[1], w[0]], InitScheme::KaimingUniform, rng),
                        b: Tensor::zeros(&[w[1]]),
                    }),
                    bn: None,
                })
                .collect();
            Network::new(blocks, input_shape.to_vec(), classes)
        }
        ArchPreset::Vgg {
            channels,
            paddings,
            pool_after,
            hidden_dense,
        } => {
            if input_shape.len() != 3 {
                return Err(CliError::Config(format!(
                    "conv preset needs [C,H,W] input, dataset gives {input_shape:?}"
                )));
            }
            let mut blocks = Vec::new();
            let mut in_ch = input_shape[0];
            for (i, &out_ch) in channels.iter().enumerate() {
                blocks.push(Block {
                    act_in: if i == 0 { Activation::Identity } else { act },
                    op: BlockOp::Conv(ConvBlock {
                        kernel: rand_init(&[out_ch, in_ch, 3, 3], InitScheme::KaimingUniform, rng),
                        bias: Tensor::zeros(&[out_ch]),
                        stride: 1,
                        padding: paddings[i],
                        pool: if pool_after[i] { Some((2, 2)) } else { None },
                    }),
                    bn: match bn {
                        BnMode::Off => None,
                        _ => Some(BatchNorm::new(out_ch, 0.1)),
                    },
                });
                in_ch = out_ch;
            }
            // Shape chain so far determines the classifier input width.
            let probe = Network {
                blocks: blocks.clone(),
                input_shape: input_shape.to_vec(),
                output_size: 0,
            };
            let mut shape = input_shape.to_vec();
            for (i, b) in probe.blocks.iter().enumerate() {
                shape = b
                    .out_shape(&shape)
                    .map_err(|e| CliError::Config(format!("{:?} block {i}: {e}", preset_name(preset))))?;
            }
            let mut flat: usize = shape.iter().product();
            for &width in hidden_dense {
                blocks.push(Block {
                    act_in: act,
                    op: BlockOp::Dense(DenseLayer {
                        w: rand_init(&[width, flat], InitScheme::KaimingUniform, rng),
                        b: Tensor::zeros(&[width]),
                    }),
                    bn: None,
                });
                flat = width;
            }
            blocks.push(Block {
                act_in: act,
                op: BlockOp::Dense(DenseLayer {
                    w: rand_init(&[classes, flat], InitScheme::KaimingUniform, rng),
                    b: Tensor::zeros(&[classes]),
                }),
                bn: None,
            });
            Network::new(blocks, input_shape.to_vec(), classes)
        }
    };
    net.map_err(|e| CliError::Config(format!("{}: {e}", preset_name(preset))))
}

fn preset_name(p: &ArchPreset) -> String {
    match p {
        ArchPreset::Mlp { depth } => format!("mlp-{depth}"),
        ArchPreset::Vgg { channels, .. } => format!("vgg ({} conv blocks)", channels.len()),
    }
}

pub fn parse_activation(s: &str) -> Result<Activation> {
    Ok(match s {
        "relu" => Activation::Relu,
        "leaky-relu" => Activation::leaky_default(),
        "gelu" => Activation::Gelu,
        "hard-tanh" => Activation::HardTanh,
        other => return Err(CliError::Config(format!("unknown activation {other:?}"))),
    })
}
