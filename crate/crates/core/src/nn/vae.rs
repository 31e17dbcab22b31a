//! Convolutional VAE: a six-block stride-2 encoder to a Gaussian latent
//! (μ, log-variance heads), and a mirrored six-block deconv decoder from a
//! reshaped latent projection.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Result, TensorError};
use crate::nn::layers::{join, BatchNorm2d, Conv2d, ConvTranspose2d, Fwd, Linear, Module};
use crate::nn::unet::LEAKY_SLOPE;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PADDING: usize = 1;
const BLOCKS: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VaeConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub latent_dim: usize,
    pub channel_schedule: Vec<usize>,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            image_size: 256,
            in_channels: 3,
            out_channels: 3,
            latent_dim: 128,
            channel_schedule: alloc::vec![64, 128, 256, 512, 512, 512],
        }
    }
}

impl VaeConfig {
    pub fn new(image_size: usize, channels: usize, latent_dim: usize, base_width: usize) -> Self {
        VaeConfig {
            image_size,
            in_channels: channels,
            out_channels: channels,
            latent_dim,
            channel_schedule: (0..BLOCKS).map(|i| base_width << i.min(3)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % (1 << BLOCKS) != 0 || self.image_size == 0 {
            return Err(TensorError::InvalidConfig {
                what: format!("image size {} is not divisible by 64", self.image_size),
            });
        }
        if self.channel_schedule.len() != BLOCKS || self.channel_schedule.iter().any(|&c| c == 0) {
            return Err(TensorError::InvalidConfig {
                what: format!(
                    "encoder needs {BLOCKS} positive widths, got {:?}",
                    self.channel_schedule
                ),
            });
        }
        if self.latent_dim == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(TensorError::InvalidConfig {
                what: alloc::string::String::from("latent and channel sizes must be positive"),
            });
        }
        Ok(())
    }

    /// Spatial extent after the six stride-2 blocks.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> BLOCKS
    }

    /// Width of the flattened encoder output feeding the latent heads.
    pub fn flatten_width(&self) -> usize {
        let b = self.bottleneck_size();
        self.channel_schedule[BLOCKS - 1] * b * b
    }
}

struct EncBlock<E: Scalar> {
    conv: Conv2d<E>,
    bn: BatchNorm2d<E>,
}

struct DecBlock<E: Scalar> {
    deconv: ConvTranspose2d<E>,
    /// `None` marks the tanh output block.
    bn: Option<BatchNorm2d<E>>,
}

pub struct Vae<E: Scalar> {
    pub cfg: VaeConfig,
    enc: Vec<EncBlock<E>>,
    mu_head: Linear<E>,
    logvar_head: Linear<E>,
    dec_fc: Linear<E>,
    dec: Vec<DecBlock<E>>,
}

impl<E: Scalar> Vae<E> {
    pub fn new(cfg: VaeConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let sched = &cfg.channel_schedule;
        let mut enc = Vec::with_capacity(BLOCKS);
        for i in 0..BLOCKS {
            let in_ch = if i == 0 { cfg.in_channels } else { sched[i - 1] };
            enc.push(EncBlock {
                conv: Conv2d::new(in_ch, sched[i], KERNEL, STRIDE, PADDING, rng),
                bn: BatchNorm2d::new(sched[i], rng),
            });
        }
        let flat = cfg.flatten_width();
        let mu_head = Linear::new(flat, cfg.latent_dim, rng);
        let logvar_head = Linear::new(flat, cfg.latent_dim, rng);
        let dec_fc = Linear::new(cfg.latent_dim, flat, rng);
        let mut dec = Vec::with_capacity(BLOCKS);
        for j in 0..BLOCKS {
            let in_ch = sched[BLOCKS - 1 - j];
            let (out_ch, bn) = if j + 1 == BLOCKS {
                (cfg.out_channels, None)
            } else {
                let out = sched[BLOCKS - 2 - j];
                (out, Some(BatchNorm2d::new(out, rng)))
            };
            dec.push(DecBlock {
                deconv: ConvTranspose2d::new(in_ch, out_ch, KERNEL, STRIDE, PADDING, rng),
                bn,
            });
        }
        Ok(Vae {
            cfg,
            enc,
            mu_head,
            logvar_head,
            dec_fc,
            dec,
        })
    }

    /// N×C×S×S → (μ, logvar), both N×latent.
    pub fn encode(&mut self, tape: &mut Tape<E>, x: NodeId, ctx: Fwd) -> Result<(NodeId, NodeId)> {
        let mut h = x;
        for block in self.enc.iter_mut() {
            h = block.conv.forward(tape, h, ctx)?;
            h = block.bn.forward(tape, h, ctx)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let n = tape.shape(h)[0];
        let flat = self.cfg.flatten_width();
        let h = tape.reshape(h, &[n, flat])?;
        let mu = self.mu_head.forward(tape, h, ctx)?;
        let logvar = self.logvar_head.forward(tape, h, ctx)?;
        Ok((mu, logvar))
    }

    /// N×latent → N×C×S×S in (−1, 1).
    pub fn decode(&mut self, tape: &mut Tape<E>, z: NodeId, ctx: Fwd) -> Result<NodeId> {
        let n = tape.shape(z)[0];
        let b = self.cfg.bottleneck_size();
        let ch = self.cfg.channel_schedule[BLOCKS - 1];
        let mut h = self.dec_fc.forward(tape, z, ctx)?;
        h = tape.reshape(h, &[n, ch, b, b])?;
        for block in self.dec.iter_mut() {
            h = block.deconv.forward(tape, h, ctx)?;
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

    /// Deterministic reconstruction path (z = μ) over a value tensor.
    pub fn infer(&mut self, input: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let x = tape.input(input)?;
        let (mu, _) = self.encode(&mut tape, x, Fwd::eval())?;
        let y = self.decode(&mut tape, mu, Fwd::eval())?;
        Ok(tape.to_tensor(y))
    }
}

impl<E: Scalar> Module<E> for Vae<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        for (i, b) in self.enc.iter().enumerate() {
            b.conv.visit(&join(prefix, &format!("enc{i}")), f);
            b.bn.visit(&join(prefix, &format!("enc{i}.bn")), f);
        }
        self.mu_head.visit(&join(prefix, "mu"), f);
        self.logvar_head.visit(&join(prefix, "logvar"), f);
        self.dec_fc.visit(&join(prefix, "dec_fc"), f);
        for (j, b) in self.dec.iter().enumerate() {
            b.deconv.visit(&join(prefix, &format!("dec{j}")), f);
            if let Some(bn) = &b.bn {
                bn.visit(&join(prefix, &format!("dec{j}.bn")), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        for (i, b) in self.enc.iter_mut().enumerate() {
            b.conv.visit_mut(&join(prefix, &format!("enc{i}")), f);
            b.bn.visit_mut(&join(prefix, &format!("enc{i}.bn")), f);
        }
        self.mu_head.visit_mut(&join(prefix, "mu"), f);
        self.logvar_head.visit_mut(&join(prefix, "logvar"), f);
        self.dec_fc.visit_mut(&join(prefix, "dec_fc"), f);
        for (j, b) in self.dec.iter_mut().enumerate() {
            b.deconv.visit_mut(&join(prefix, &format!("dec{j}")), f);
            if let Some(bn) = &mut b.bn {
                bn.visit_mut(&join(prefix, &format!("dec{j}.bn")), f);
            }
        }
    }
}
