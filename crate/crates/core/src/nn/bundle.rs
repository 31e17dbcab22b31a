//! A trained model plus the configuration that rebuilds its architecture.

use alloc::format;

use crate::error::{Result, TensorError};
use crate::nn::layers::{Fwd, Module};
use crate::nn::patchgan::PatchGan;
use crate::nn::unet::UNetGenerator;
use crate::nn::vae::Vae;
use crate::rng::{Rng, STREAM_WEIGHTS};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Pix2Pix,
    CycleGan,
    Vae,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Pix2Pix => "pix2pix",
            ModelKind::CycleGan => "cyclegan",
            ModelKind::Vae => "vae",
        }
    }

    /// Human-facing label used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Pix2Pix => "Pix2Pix GAN",
            ModelKind::CycleGan => "CycleGAN",
            ModelKind::Vae => "VAE",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pix2pix" => Ok(ModelKind::Pix2Pix),
            "cyclegan" => Ok(ModelKind::CycleGan),
            "vae" => Ok(ModelKind::Vae),
            _ => Err(TensorError::InvalidConfig {
                what: format!("unknown model '{s}' (supported: pix2pix, cyclegan, vae)"),
            }),
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            ModelKind::Pix2Pix => 0,
            ModelKind::CycleGan => 1,
            ModelKind::Vae => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::Pix2Pix),
            1 => Some(ModelKind::CycleGan),
            2 => Some(ModelKind::Vae),
            _ => None,
        }
    }
}

impl core::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// Conditional GAN: one generator, one paired-input discriminator.
pub struct Pix2PixModel<E: Scalar> {
    pub gen: UNetGenerator<E>,
    pub disc: PatchGan<E>,
}

/// Cycle-consistent GAN: generators for both directions and one
/// unconditional discriminator per domain (a = source, b = target).
pub struct CycleGanModel<E: Scalar> {
    pub g_ab: UNetGenerator<E>,
    pub g_ba: UNetGenerator<E>,
    pub d_a: PatchGan<E>,
    pub d_b: PatchGan<E>,
}

pub enum ModelArch<E: Scalar> {
    Pix2Pix(Pix2PixModel<E>),
    CycleGan(CycleGanModel<E>),
    Vae(Vae<E>),
}

/// A model with its training configuration attached.
pub struct ModelBundle<E: Scalar> {
    pub cfg: TrainConfig,
    pub arch: ModelArch<E>,
}

impl<E: Scalar> core::fmt::Debug for ModelBundle<E> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "ModelBundle({}, image_size={}, params={})",
            self.kind(),
            self.cfg.image_size,
            self.param_count()
        )
    }
}

impl<E: Scalar> ModelBundle<E> {
    /// Build fresh parameters for `cfg`. Initialization draws from a
    /// substream of the config seed, so the same config always yields
    /// bit-identical parameters.
    pub fn build(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed).substream(STREAM_WEIGHTS);
        let arch = match cfg.kind {
            ModelKind::Pix2Pix => ModelArch::Pix2Pix(Pix2PixModel {
                gen: UNetGenerator::new(cfg.unet_config(), &mut rng)?,
                disc: PatchGan::new(cfg.patchgan_config(true), &mut rng)?,
            }),
            ModelKind::CycleGan => ModelArch::CycleGan(CycleGanModel {
                g_ab: UNetGenerator::new(cfg.unet_config(), &mut rng)?,
                g_ba: UNetGenerator::new(cfg.unet_config(), &mut rng)?,
                d_a: PatchGan::new(cfg.patchgan_config(false), &mut rng)?,
                d_b: PatchGan::new(cfg.patchgan_config(false), &mut rng)?,
            }),
            ModelKind::Vae => ModelArch::Vae(Vae::new(cfg.vae_config(), &mut rng)?),
        };
        Ok(ModelBundle {
            cfg: cfg.clone(),
            arch,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.cfg.kind
    }

    /// Source→target synthesis in eval mode (running statistics; the VAE
    /// decodes from μ so outputs are deterministic).
    pub fn generate(&mut self, source: &Tensor<E>) -> Result<Tensor<E>> {
        match &mut self.arch {
            ModelArch::Pix2Pix(m) => m.gen.infer(source),
            ModelArch::CycleGan(m) => m.g_ab.infer(source),
            ModelArch::Vae(v) => v.infer(source),
        }
    }

    /// Forward output on a fixed input, for checkpoint round-trip checks.
    pub fn probe(&mut self, source: &Tensor<E>) -> Result<Tensor<E>> {
        self.generate(source)
    }

    /// Make every parameter's `requires_grad` consistent with training.
    pub fn mark_trainable(&mut self) {
        self.visit_mut("", &mut |name, t| {
            // Running statistics are buffers; everything else trains.
            let buffer = name.contains("running_");
            t.requires_grad = !buffer;
        });
    }
}

impl<E: Scalar> Module<E> for ModelBundle<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        match &self.arch {
            ModelArch::Pix2Pix(m) => {
                m.gen.visit(&crate::nn::layers::join(prefix, "gen"), f);
                m.disc.visit(&crate::nn::layers::join(prefix, "disc"), f);
            }
            ModelArch::CycleGan(m) => {
                m.g_ab.visit(&crate::nn::layers::join(prefix, "g_ab"), f);
                m.g_ba.visit(&crate::nn::layers::join(prefix, "g_ba"), f);
                m.d_a.visit(&crate::nn::layers::join(prefix, "d_a"), f);
                m.d_b.visit(&crate::nn::layers::join(prefix, "d_b"), f);
            }
            ModelArch::Vae(v) => v.visit(&crate::nn::layers::join(prefix, "vae"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        match &mut self.arch {
            ModelArch::Pix2Pix(m) => {
                m.gen.visit_mut(&crate::nn::layers::join(prefix, "gen"), f);
                m.disc.visit_mut(&crate::nn::layers::join(prefix, "disc"), f);
            }
            ModelArch::CycleGan(m) => {
                m.g_ab.visit_mut(&crate::nn::layers::join(prefix, "g_ab"), f);
                m.g_ba.visit_mut(&crate::nn::layers::join(prefix, "g_ba"), f);
                m.d_a.visit_mut(&crate::nn::layers::join(prefix, "d_a"), f);
                m.d_b.visit_mut(&crate::nn::layers::join(prefix, "d_b"), f);
            }
            ModelArch::Vae(v) => v.visit_mut(&crate::nn::layers::join(prefix, "vae"), f),
        }
    }
}

/// Eval-mode forward pass shared by evaluation and synthesis; kept here so
/// callers can reuse a tape if they want intermediate access.
pub fn generate_on_tape<E: Scalar>(
    bundle: &mut ModelBundle<E>,
    tape: &mut Tape<E>,
    source: &Tensor<E>,
) -> Result<crate::tape::NodeId> {
    let x = tape.input(source)?;
    match &mut bundle.arch {
        ModelArch::Pix2Pix(m) => m.gen.forward(tape, x, Fwd::eval()),
        ModelArch::CycleGan(m) => m.g_ab.forward(tape, x, Fwd::eval()),
        ModelArch::Vae(v) => {
            let (mu, _) = v.encode(tape, x, Fwd::eval())?;
            v.decode(tape, mu, Fwd::eval())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_cfg(kind: ModelKind) -> TrainConfig {
        TrainConfig {
            kind,
            image_size: 64,
            in_channels: 1,
            base_width: 4,
            batch_size: 2,
            epochs: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn build_is_deterministic_per_config() {
        for kind in [ModelKind::Pix2Pix, ModelKind::CycleGan, ModelKind::Vae] {
            let cfg = desk_cfg(kind);
            let a = ModelBundle::<f32>::build(&cfg).unwrap();
            let b = ModelBundle::<f32>::build(&cfg).unwrap();
            let mut params = alloc::vec::Vec::new();
            a.visit("", &mut |n, t| params.push((String::from(n), t.clone())));
            let mut i = 0;
            b.visit("", &mut |n, t| {
                assert_eq!(params[i].0, n);
                assert!(params[i].1.bit_eq(t), "{n} differs between builds");
                i += 1;
            });
            assert_eq!(i, params.len());
        }
    }

    #[test]
    fn parameter_names_are_unique() {
        let cfg = desk_cfg(ModelKind::CycleGan);
        let bundle = ModelBundle::<f32>::build(&cfg).unwrap();
        let mut names = alloc::vec::Vec::new();
        bundle.visit("", &mut |n, _| names.push(String::from(n)));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn generate_produces_bounded_output() {
        let cfg = desk_cfg(ModelKind::Vae);
        let mut bundle = ModelBundle::<f32>::build(&cfg).unwrap();
        let mut rng = Rng::new(3);
        let x = Tensor::randn(&[1, 1, 64, 64], 0.0, 0.6, &mut rng);
        let y = bundle.generate(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }
}
