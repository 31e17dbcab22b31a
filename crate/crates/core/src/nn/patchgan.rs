//! Patch discriminator: five k=4 conv layers (strides 2,2,2,1,1) ending in
//! a one-channel logit map where each cell judges one receptive-field patch.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Result, TensorError};
use crate::kernels::conv::conv_out_extent;
use crate::nn::layers::{join, BatchNorm2d, Conv2d, Fwd, Module};
use crate::nn::unet::LEAKY_SLOPE;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

const KERNEL: usize = 4;
const PADDING: usize = 1;
const STRIDES: [usize; 5] = [2, 2, 2, 1, 1];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGanConfig {
    /// 2·image channels for the conditional pairing, image channels alone
    /// for unconditional use.
    pub in_channels: usize,
    pub channel_schedule: Vec<usize>,
}

impl Default for PatchGanConfig {
    fn default() -> Self {
        PatchGanConfig {
            in_channels: 6,
            channel_schedule: alloc::vec![64, 128, 256, 512],
        }
    }
}

impl PatchGanConfig {
    pub fn new(in_channels: usize, base_width: usize) -> Self {
        PatchGanConfig {
            in_channels,
            channel_schedule: alloc::vec![base_width, base_width * 2, base_width * 4, base_width * 8],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_schedule.len() != 4 || self.channel_schedule.iter().any(|&c| c == 0) {
            return Err(TensorError::InvalidConfig {
                what: format!(
                    "patch discriminator needs four positive widths, got {:?}",
                    self.channel_schedule
                ),
            });
        }
        if self.in_channels == 0 {
            return Err(TensorError::InvalidConfig {
                what: alloc::string::String::from("in_channels must be positive"),
            });
        }
        Ok(())
    }

    /// Spatial extent of the logit map for a given input size; errors when
    /// the input is too small to pass all five layers.
    pub fn logit_extent(&self, image_size: usize) -> Result<usize> {
        let mut extent = image_size;
        for stride in STRIDES {
            extent = conv_out_extent("patchgan", extent, KERNEL, stride, PADDING)?;
            if extent == 0 {
                return Err(TensorError::ConvGeometry {
                    op: "patchgan",
                    input: image_size,
                    kernel: KERNEL,
                    stride,
                    padding: PADDING,
                });
            }
        }
        Ok(extent)
    }
}

struct DiscLayer<E: Scalar> {
    conv: Conv2d<E>,
    bn: Option<BatchNorm2d<E>>,
    /// The final logit layer carries no activation.
    leaky: bool,
}

pub struct PatchGan<E: Scalar> {
    pub cfg: PatchGanConfig,
    layers: Vec<DiscLayer<E>>,
}

impl<E: Scalar> PatchGan<E> {
    pub fn new(cfg: PatchGanConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let s = &cfg.channel_schedule;
        let plan = [
            (cfg.in_channels, s[0], STRIDES[0], false),
            (s[0], s[1], STRIDES[1], true),
            (s[1], s[2], STRIDES[2], true),
            (s[2], s[3], STRIDES[3], true),
            (s[3], 1, STRIDES[4], false),
        ];
        let mut layers = Vec::with_capacity(5);
        for (idx, &(in_ch, out_ch, stride, bn)) in plan.iter().enumerate() {
            layers.push(DiscLayer {
                conv: Conv2d::new(in_ch, out_ch, KERNEL, stride, PADDING, rng),
                bn: bn.then(|| BatchNorm2d::new(out_ch, rng)),
                leaky: idx < 4,
            });
        }
        Ok(PatchGan { cfg, layers })
    }

    /// N×in×S×S → N×1×P×P raw logits.
    pub fn forward(&mut self, tape: &mut Tape<E>, x: NodeId, ctx: Fwd) -> Result<NodeId> {
        let mut h = x;
        for layer in self.layers.iter_mut() {
            h = layer.conv.forward(tape, h, ctx)?;
            if let Some(bn) = &mut layer.bn {
                h = bn.forward(tape, h, ctx)?;
            }
            if layer.leaky {
                h = tape.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }
}

impl<E: Scalar> Module<E> for PatchGan<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.conv.visit(&join(prefix, &format!("layer{i}")), f);
            if let Some(bn) = &l.bn {
                bn.visit(&join(prefix, &format!("layer{i}.bn")), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.conv.visit_mut(&join(prefix, &format!("layer{i}")), f);
            if let Some(bn) = &mut l.bn {
                bn.visit_mut(&join(prefix, &format!("layer{i}.bn")), f);
            }
        }
    }
}
