//! Parameterized layers and the parameter-visitor plumbing.
//!
//! Weights follow the DCGAN initialization convention: conv / deconv /
//! linear weights ~ N(0, 0.02), batch-norm gain ~ N(1, 0.02), every bias
//! and shift starts at zero.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const WEIGHT_INIT_STD: f64 = 0.02;

/// Forward-pass context.
#[derive(Clone, Copy, Debug)]
pub struct Fwd {
    /// Training mode: batch-norm uses batch statistics and updates its
    /// running estimates.
    pub train: bool,
    /// Track gradients for the parameters bound during this pass.
    pub grads: bool,
}

impl Fwd {
    /// Parameters are being optimized.
    pub fn train() -> Self {
        Fwd {
            train: true,
            grads: true,
        }
    }

    /// Training-mode statistics, but parameters held fixed (e.g. the
    /// discriminator while the generator is being updated).
    pub fn frozen() -> Self {
        Fwd {
            train: true,
            grads: false,
        }
    }

    /// Inference: running statistics, no gradient tracking.
    pub fn eval() -> Self {
        Fwd {
            train: false,
            grads: false,
        }
    }
}

/// Anything with named parameters. Visit order is fixed by structure and
/// is the canonical parameter order for checkpoints and the optimizer.
pub trait Module<E: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>));

    /// Fold gradients recorded on `tape` into the owning tensors.
    fn collect_grads(&mut self, tape: &Tape<E>)
    where
        Self: Sized,
    {
        self.visit_mut("", &mut |_, t| {
            if let Some(r) = t.tape_id {
                if r.tape == tape.tape_id() {
                    if let Some(g) = tape.grad(r.node) {
                        let g = g.to_vec();
                        t.accumulate_grad(&g);
                    }
                }
            }
        });
    }

    fn zero_grads(&mut self)
    where
        Self: Sized,
    {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }

    fn param_count(&self) -> usize
    where
        Self: Sized,
    {
        let mut n = 0;
        self.visit("", &mut |_, t| {
            if t.requires_grad {
                n += t.numel();
            }
        });
        n
    }

    fn named_shapes(&self) -> Vec<(String, Vec<usize>)>
    where
        Self: Sized,
    {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| {
            out.push((String::from(name), t.shape().to_vec()));
        });
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

// ── Conv2d ──────────────────────────────────────────────────────────────

pub struct Conv2d<E: Scalar> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub stride: usize,
    pub padding: usize,
}

impl<E: Scalar> Conv2d<E> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        Conv2d {
            weight: Tensor::randn(&[out_ch, in_ch, kernel, kernel], 0.0, WEIGHT_INIT_STD, rng)
                .requires_grad(true),
            bias: Tensor::zeros(&[out_ch]).requires_grad(true),
            stride,
            padding,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<E>, x: NodeId, ctx: Fwd) -> Result<NodeId> {
        let w = tape.bind(&mut self.weight, ctx.grads)?;
        let b = tape.bind(&mut self.bias, ctx.grads)?;
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

impl<E: Scalar> Module<E> for Conv2d<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

// ── ConvTranspose2d ─────────────────────────────────────────────────────

pub struct ConvTranspose2d<E: Scalar> {
    /// Laid out in×out×k×k, the adjoint orientation of [`Conv2d`].
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub stride: usize,
    pub padding: usize,
}

impl<E: Scalar> ConvTranspose2d<E> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        ConvTranspose2d {
            weight: Tensor::randn(&[in_ch, out_ch, kernel, kernel], 0.0, WEIGHT_INIT_STD, rng)
                .requires_grad(true),
            bias: Tensor::zeros(&[out_ch]).requires_grad(true),
            stride,
            padding,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<E>, x: NodeId, ctx: Fwd) -> Result<NodeId> {
        let w = tape.bind(&mut self.weight, ctx.grads)?;
        let b = tape.bind(&mut self.bias, ctx.grads)?;
        tape.conv_transpose2d(x, w, b, self.stride, self.padding)
    }
}

impl<E: Scalar> Module<E> for ConvTranspose2d<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

// ── BatchNorm2d ─────────────────────────────────────────────────────────

pub struct BatchNorm2d<E: Scalar> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    /// Running statistics; buffers, not parameters.
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub eps: f64,
    pub momentum: f64,
}

impl<E: Scalar> BatchNorm2d<E> {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        BatchNorm2d {
            gamma: Tensor::randn(&[channels], 1.0, WEIGHT_INIT_STD, rng).requires_grad(true),
            beta: Tensor::zeros(&[channels]).requires_grad(true),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], E::one()),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<E>, x: NodeId, ctx: Fwd) -> Result<NodeId> {
        let gamma = tape.bind(&mut self.gamma, ctx.grads)?;
        let beta = tape.bind(&mut self.beta, ctx.grads)?;
        if ctx.train {
            let (y, batch_mean, batch_var) = tape.batchnorm2d_train(x, gamma, beta, self.eps)?;
            // Unbiased variance feeds the running estimate.
            let count = {
                let s = tape.shape(x);
                s[0] * s[2] * s[3]
            };
            let bessel = E::from_f64(count as f64 / (count as f64 - 1.0));
            let mom = E::from_f64(self.momentum);
            let keep = E::one() - mom;
            for (rm, bm) in self.running_mean.data_mut().iter_mut().zip(&batch_mean) {
                *rm = keep * *rm + mom * *bm;
            }
            for (rv, bv) in self.running_var.data_mut().iter_mut().zip(&batch_var) {
                *rv = keep * *rv + mom * *bv * bessel;
            }
            Ok(y)
        } else {
            tape.batchnorm2d_eval(
                x,
                gamma,
                beta,
                self.running_mean.data(),
                self.running_var.data(),
                self.eps,
            )
        }
    }
}

impl<E: Scalar> Module<E> for BatchNorm2d<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

// ── Linear ──────────────────────────────────────────────────────────────

pub struct Linear<E: Scalar> {
    /// in×out.
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Scalar> Linear<E> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: Tensor::randn(&[in_dim, out_dim], 0.0, WEIGHT_INIT_STD, rng)
                .requires_grad(true),
            bias: Tensor::zeros(&[out_dim]).requires_grad(true),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<E>, x: NodeId, ctx: Fwd) -> Result<NodeId> {
        let w = tape.bind(&mut self.weight, ctx.grads)?;
        let b = tape.bind(&mut self.bias, ctx.grads)?;
        tape.linear(x, w, b)
    }
}

impl<E: Scalar> Module<E> for Linear<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
