//! U-Net generator: a stride-2 conv encoder mirrored by a deconv decoder
//! with channel-concatenated skip connections and a tanh output head.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Result, TensorError};
use crate::nn::layers::{join, BatchNorm2d, Conv2d, ConvTranspose2d, Fwd, Module};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PADDING: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub channel_schedule: Vec<usize>,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            image_size: 256,
            in_channels: 3,
            out_channels: 3,
            depth: 8,
            channel_schedule: alloc::vec![64, 128, 256, 512, 512, 512, 512, 512],
        }
    }
}

impl UNetConfig {
    /// Full-depth configuration for a power-of-two image size: the encoder
    /// bottoms out at 1×1 and widths follow base·{1,2,4,8,8,…}.
    pub fn for_size(image_size: usize, channels: usize, base_width: usize) -> Self {
        let depth = image_size.trailing_zeros() as usize;
        let channel_schedule = (0..depth).map(|i| base_width << i.min(3)).collect();
        UNetConfig {
            image_size,
            in_channels: channels,
            out_channels: channels,
            depth,
            channel_schedule,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.channel_schedule.len() != self.depth {
            return Err(TensorError::InvalidConfig {
                what: format!(
                    "channel schedule length {} must equal depth {}",
                    self.channel_schedule.len(),
                    self.depth
                ),
            });
        }
        if !self.image_size.is_power_of_two() || self.image_size >> self.depth == 0 {
            return Err(TensorError::InvalidConfig {
                what: format!(
                    "image size {} is not divisible by 2^depth (depth {})",
                    self.image_size, self.depth
                ),
            });
        }
        if self.channel_schedule.iter().any(|&c| c == 0)
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(TensorError::InvalidConfig {
                what: alloc::string::String::from("channel counts must be positive"),
            });
        }
        Ok(())
    }

    /// Spatial extent at the bottleneck.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.depth
    }
}

pub struct EncoderBlock<E: Scalar> {
    pub conv: Conv2d<E>,
    pub bn: Option<BatchNorm2d<E>>,
}

pub struct DecoderBlock<E: Scalar> {
    pub deconv: ConvTranspose2d<E>,
    /// `None` marks the output block (deconv + tanh).
    pub bn: Option<BatchNorm2d<E>>,
}

pub struct UNetGenerator<E: Scalar> {
    pub cfg: UNetConfig,
    pub encoder: Vec<EncoderBlock<E>>,
    pub decoder: Vec<DecoderBlock<E>>,
}

impl<E: Scalar> UNetGenerator<E> {
    /// Batch statistics are degenerate at the 1×1 bottleneck and carry
    /// little signal on the raw input, so the first and innermost encoder
    /// blocks skip normalization.
    pub fn new(cfg: UNetConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let depth = cfg.depth;
        let sched = &cfg.channel_schedule;

        let mut encoder = Vec::with_capacity(depth);
        for i in 0..depth {
            let in_ch = if i == 0 { cfg.in_channels } else { sched[i - 1] };
            let conv = Conv2d::new(in_ch, sched[i], KERNEL, STRIDE, PADDING, rng);
            let bn = (i != 0 && i != depth - 1).then(|| BatchNorm2d::new(sched[i], rng));
            encoder.push(EncoderBlock { conv, bn });
        }

        // Decoder block j consumes the previous block's output concatenated
        // with the encoder output of the same spatial extent; the carried
        // width mirrors the encoder schedule.
        let mut decoder = Vec::with_capacity(depth);
        for j in 0..depth {
            let in_ch = if j == 0 {
                sched[depth - 1]
            } else {
                2 * sched[depth - 1 - j]
            };
            let (out_ch, bn) = if j + 1 == depth {
                (cfg.out_channels, None)
            } else {
                let out = sched[depth - 2 - j];
                (out, Some(BatchNorm2d::new(out, rng)))
            };
            decoder.push(DecoderBlock {
                deconv: ConvTranspose2d::new(in_ch, out_ch, KERNEL, STRIDE, PADDING, rng),
                bn,
            });
        }

        Ok(UNetGenerator {
            cfg,
            encoder,
            decoder,
        })
    }

    /// N×in×S×S → N×out×S×S with outputs in (−1, 1).
    pub fn forward(&mut self, tape: &mut Tape<E>, x: NodeId, ctx: Fwd) -> Result<NodeId> {
        let depth = self.cfg.depth;
        let mut skips: Vec<NodeId> = Vec::with_capacity(depth);
        let mut h = x;
        for block in self.encoder.iter_mut() {
            h = block.conv.forward(tape, h, ctx)?;
            if let Some(bn) = &mut block.bn {
                h = bn.forward(tape, h, ctx)?;
            }
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
            skips.push(h);
        }
        for (j, block) in self.decoder.iter_mut().enumerate() {
            let input = if j == 0 {
                h
            } else {
                tape.concat_channels(h, skips[depth - 1 - j])?
            };
            h = block.deconv.forward(tape, input, ctx)?;
            match &mut block.bn {
                Some(bn) => {
                    h = bn.forward(tape, h, ctx)?;
                    h = tape.relu(h)?;
                }
                None => {
                    h = tape.tanh(h)?;
                }
            }
        }
        Ok(h)
    }

    /// Eval-mode convenience over a single value tensor.
    pub fn infer(&mut self, input: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let x = tape.input(input)?;
        let y = self.forward(&mut tape, x, Fwd::eval())?;
        Ok(tape.to_tensor(y))
    }
}

impl<E: Scalar> Module<E> for UNetGenerator<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        for (i, b) in self.encoder.iter().enumerate() {
            b.conv.visit(&join(prefix, &format!("enc{i}")), f);
            if let Some(bn) = &b.bn {
                bn.visit(&join(prefix, &format!("enc{i}.bn")), f);
            }
        }
        for (j, b) in self.decoder.iter().enumerate() {
            b.deconv.visit(&join(prefix, &format!("dec{j}")), f);
            if let Some(bn) = &b.bn {
                bn.visit(&join(prefix, &format!("dec{j}.bn")), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.conv.visit_mut(&join(prefix, &format!("enc{i}")), f);
            if let Some(bn) = &mut b.bn {
                bn.visit_mut(&join(prefix, &format!("enc{i}.bn")), f);
            }
        }
        for (j, b) in self.decoder.iter_mut().enumerate() {
            b.deconv.visit_mut(&join(prefix, &format!("dec{j}")), f);
            if let Some(bn) = &mut b.bn {
                bn.visit_mut(&join(prefix, &format!("dec{j}.bn")), f);
            }
        }
    }
}
