//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Forward operations append nodes that own their output values plus
//! whatever the backward pass needs. `backward` walks the nodes in strict
//! reverse append order, accumulating gradient contributions additively:
//! a node consumed by k ops receives the sum of k contributions.
//!
//! A tape belongs to one logical training step. Model parameters are bound
//! onto it as leaves each step; after `backward`, their gradients are read
//! back through the [`crate::tensor::TapeRef`] handles and folded into the
//! owning tensors.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;

use crate::error::{Result, TensorError};
use crate::kernels::batchnorm::{
    bn_backward_eval, bn_backward_train, bn_batch_stats, bn_forward_eval, bn_forward_train,
    BnStats,
};
use crate::kernels::conv::{
    conv2d_bwd_bias, conv2d_bwd_input, conv2d_bwd_weight, conv2d_fwd, ConvGeom,
};
use crate::kernels::matmul::{matmul, matmul_a_bt, matmul_at_b};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{TapeRef, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
}

enum Op<E: Scalar> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    /// Transposed convolution; `geom` describes the convolution this op is
    /// the adjoint of (mapping the *output* of this op back to its input).
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    BnTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: BnStats<E>,
        plane: usize,
    },
    BnEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<E>,
        inv_std: Vec<E>,
        plane: usize,
    },
    Act {
        x: NodeId,
        act: Activation,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
        ca: usize,
        cb: usize,
        plane: usize,
    },
    Reshape {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: E,
    },
    BceLogits {
        logits: NodeId,
        target: NodeId,
    },
    L1 {
        a: NodeId,
        b: NodeId,
    },
    Mse {
        a: NodeId,
        b: NodeId,
    },
    Reparam {
        mu: NodeId,
        logvar: NodeId,
        eps: Vec<E>,
    },
    Kl {
        mu: NodeId,
        logvar: NodeId,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<E>,
    },
    /// Identity forward, gradient multiplied by `c`. Used as a negative
    /// control by the gradient checker.
    GradScale {
        x: NodeId,
        c: E,
    },
}

struct Node<E: Scalar> {
    op: Op<E>,
    shape: Vec<usize>,
    value: Vec<E>,
    requires_grad: bool,
}

pub struct Tape<E: Scalar> {
    id: u64,
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    /// Scan every op output for non-finite values and fail fast.
    pub check_finite: bool,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: true,
        }
    }

    /// Identity of this tape, used to validate [`TapeRef`] handles.
    pub fn tape_id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op: Op<E>,
        shape: Vec<usize>,
        value: Vec<E>,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<NodeId> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.check_finite && !value.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn node(&self, id: NodeId) -> Result<&Node<E>> {
        self.nodes.get(id.0).ok_or(TensorError::DetachedTape)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[E] {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> E {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor<E> {
        Tensor::from_vec(&self.nodes[id.0].shape, self.nodes[id.0].value.clone())
            .expect("node shape is consistent by construction")
    }

    pub fn grad(&self, id: NodeId) -> Option<&[E]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Enter a tensor as a leaf. This is the boundary where input
    /// finiteness is enforced.
    pub fn leaf(&mut self, t: &Tensor<E>, requires_grad: bool) -> Result<NodeId> {
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            requires_grad,
            "leaf",
        )
    }

    /// Enter a constant (non-differentiable) leaf.
    pub fn input(&mut self, t: &Tensor<E>) -> Result<NodeId> {
        self.leaf(t, false)
    }

    /// Bind a tensor as a leaf and remember the node handle on the tensor
    /// so its gradient can be collected after `backward`. Gradients are
    /// tracked only when both `track` and `t.requires_grad` hold.
    pub fn bind(&mut self, t: &mut Tensor<E>, track: bool) -> Result<NodeId> {
        let id = self.leaf(t, track && t.requires_grad)?;
        t.tape_id = Some(TapeRef {
            tape: self.id,
            node: id,
        });
        Ok(id)
    }

    /// Re-enter a node's value as a fresh constant leaf, cutting the
    /// gradient path.
    pub fn detach(&mut self, id: NodeId) -> Result<NodeId> {
        let (shape, value) = {
            let n = self.node(id)?;
            (n.shape.clone(), n.value.clone())
        };
        self.push(Op::Leaf, shape, value, false, "detach")
    }

    // ── Structure ops ───────────────────────────────────────────────────

    pub fn reshape(&mut self, x: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        let n = self.node(x)?;
        let numel: usize = new_shape.iter().product();
        if numel != n.value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: n.shape.clone(),
                rhs: new_shape.to_vec(),
            });
        }
        let value = n.value.clone();
        let rg = n.requires_grad;
        self.push(Op::Reshape { x }, new_shape.to_vec(), value, rg, "reshape")
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, ca, ha, wa) = dims4_of(self.node(a)?, "concat_channels")?;
        let (nb, cb, hb, wb) = dims4_of(self.node(b)?, "concat_channels")?;
        if na != nb || ha != hb || wa != wb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: self.node(a)?.shape.clone(),
                rhs: self.node(b)?.shape.clone(),
            });
        }
        let plane = ha * wa;
        let mut value = vec![E::zero(); na * (ca + cb) * plane];
        {
            let av = &self.node(a)?.value;
            let bv = &self.node(b)?.value;
            for n in 0..na {
                let dst = &mut value[n * (ca + cb) * plane..(n + 1) * (ca + cb) * plane];
                dst[..ca * plane].copy_from_slice(&av[n * ca * plane..(n + 1) * ca * plane]);
                dst[ca * plane..].copy_from_slice(&bv[n * cb * plane..(n + 1) * cb * plane]);
            }
        }
        let rg = self.node(a)?.requires_grad || self.node(b)?.requires_grad;
        self.push(
            Op::Concat { a, b, ca, cb, plane },
            vec![na, ca + cb, ha, wa],
            value,
            rg,
            "concat_channels",
        )
    }

    // ── Convolutions ────────────────────────────────────────────────────

    /// 2D convolution: x is N×Ci×H×W, weight is Co×Ci×k×k, bias is Co.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (n, ci, h, wd) = dims4_of(self.node(x)?, "conv2d")?;
        let (co, wci, kh, kw) = dims4_of(self.node(w)?, "conv2d")?;
        if wci != ci || kh != kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.node(x)?.shape.clone(),
                rhs: self.node(w)?.shape.clone(),
            });
        }
        expect_shape(self.node(b)?, &[co], "conv2d")?;
        let geom = ConvGeom::new("conv2d", n, ci, h, wd, co, kh, stride, padding)?;
        let value = conv2d_fwd(
            &self.node(x)?.value,
            &self.node(w)?.value,
            Some(&self.node(b)?.value),
            &geom,
        );
        let rg = self.node(x)?.requires_grad
            || self.node(w)?.requires_grad
            || self.node(b)?.requires_grad;
        self.push(
            Op::Conv2d { x, w, b, geom },
            vec![n, co, geom.oh, geom.ow],
            value,
            rg,
            "conv2d",
        )
    }

    /// Transposed 2D convolution (the linear adjoint of [`Tape::conv2d`]
    /// with the same weight): x is N×Ci×H×W, weight is Ci×Co×k×k, bias is
    /// Co, output extent is (H−1)·stride − 2·padding + k.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (n, ci, h, wd) = dims4_of(self.node(x)?, "conv_transpose2d")?;
        let (wci, co, kh, kw) = dims4_of(self.node(w)?, "conv_transpose2d")?;
        if wci != ci || kh != kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: self.node(x)?.shape.clone(),
                rhs: self.node(w)?.shape.clone(),
            });
        }
        expect_shape(self.node(b)?, &[co], "conv_transpose2d")?;
        let k = kh;
        let oh_plus = (h - 1) * stride + k;
        let ow_plus = (wd - 1) * stride + k;
        if oh_plus <= 2 * padding || ow_plus <= 2 * padding {
            return Err(TensorError::ConvGeometry {
                op: "conv_transpose2d",
                input: h,
                kernel: k,
                stride,
                padding,
            });
        }
        let (oh, ow) = (oh_plus - 2 * padding, ow_plus - 2 * padding);
        // The convolution this op is the adjoint of maps (n, ci=co, oh, ow)
        // down to (n, co=ci, h, wd); our weight layout Ci×Co×k×k is exactly
        // that convolution's Co'×Ci'×k×k.
        let geom = ConvGeom::new("conv_transpose2d", n, co, oh, ow, ci, k, stride, padding)?;
        debug_assert_eq!((geom.oh, geom.ow), (h, wd));
        let mut value = conv2d_bwd_input(&self.node(x)?.value, &self.node(w)?.value, &geom);
        {
            let bias = &self.node(b)?.value;
            let plane = oh * ow;
            for ni in 0..n {
                for c in 0..co {
                    let bv = bias[c];
                    let base = (ni * co + c) * plane;
                    for v in &mut value[base..base + plane] {
                        *v += bv;
                    }
                }
            }
        }
        let rg = self.node(x)?.requires_grad
            || self.node(w)?.requires_grad
            || self.node(b)?.requires_grad;
        self.push(
            Op::ConvTranspose2d { x, w, b, geom },
            vec![n, co, oh, ow],
            value,
            rg,
            "conv_transpose2d",
        )
    }

    // ── Normalization ───────────────────────────────────────────────────

    /// Training-mode batch normalization. Returns the node plus the batch
    /// statistics so the caller can update its running estimates.
    pub fn batchnorm2d_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<E>, Vec<E>)> {
        let (n, c, h, w) = dims4_of(self.node(x)?, "batchnorm2d")?;
        expect_shape(self.node(gamma)?, &[c], "batchnorm2d")?;
        expect_shape(self.node(beta)?, &[c], "batchnorm2d")?;
        let plane = h * w;
        let stats = bn_batch_stats(&self.node(x)?.value, n, c, plane, eps)?;
        let value = bn_forward_train(
            &self.node(x)?.value,
            n,
            c,
            plane,
            &stats,
            &self.node(gamma)?.value,
            &self.node(beta)?.value,
        );
        let rg = self.node(x)?.requires_grad
            || self.node(gamma)?.requires_grad
            || self.node(beta)?.requires_grad;
        let (batch_mean, batch_var) = (stats.mean.clone(), stats.var.clone());
        let id = self.push(
            Op::BnTrain {
                x,
                gamma,
                beta,
                stats,
                plane,
            },
            vec![n, c, h, w],
            value,
            rg,
            "batchnorm2d",
        )?;
        Ok((id, batch_mean, batch_var))
    }

    /// Eval-mode batch normalization using fixed running statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[E],
        running_var: &[E],
        eps: f64,
    ) -> Result<NodeId> {
        let (n, c, h, w) = dims4_of(self.node(x)?, "batchnorm2d")?;
        expect_shape(self.node(gamma)?, &[c], "batchnorm2d")?;
        expect_shape(self.node(beta)?, &[c], "batchnorm2d")?;
        let plane = h * w;
        let value = bn_forward_eval(
            &self.node(x)?.value,
            n,
            c,
            plane,
            running_mean,
            running_var,
            &self.node(gamma)?.value,
            &self.node(beta)?.value,
            eps,
        );
        let inv_std: Vec<E> = running_var
            .iter()
            .map(|&v| E::one() / Float::sqrt(v + E::from_f64(eps)))
            .collect();
        let rg = self.node(x)?.requires_grad
            || self.node(gamma)?.requires_grad
            || self.node(beta)?.requires_grad;
        self.push(
            Op::BnEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
                plane,
            },
            vec![n, c, h, w],
            value,
            rg,
            "batchnorm2d",
        )
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn activation(&mut self, x: NodeId, act: Activation) -> Result<NodeId> {
        let xn = self.node(x)?;
        let value: Vec<E> = match act {
            Activation::Relu => xn
                .value
                .iter()
                .map(|&v| if v > E::zero() { v } else { E::zero() })
                .collect(),
            Activation::LeakyRelu { slope } => {
                let s = E::from_f64(slope);
                xn.value
                    .iter()
                    .map(|&v| if v > E::zero() { v } else { v * s })
                    .collect()
            }
            Activation::Tanh => xn.value.iter().map(|&v| Float::tanh(v)).collect(),
            Activation::Sigmoid => xn.value.iter().map(|&v| sigmoid(v)).collect(),
        };
        let shape = xn.shape.clone();
        let rg = xn.requires_grad;
        self.push(Op::Act { x, act }, shape, value, rg, "activation")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        self.activation(x, Activation::LeakyRelu { slope })
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (an, bn) = (self.node(a)?, self.node(b)?);
        if an.shape != bn.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: an.shape.clone(),
                rhs: bn.shape.clone(),
            });
        }
        let value: Vec<E> = an.value.iter().zip(&bn.value).map(|(&x, &y)| x + y).collect();
        let shape = an.shape.clone();
        let rg = an.requires_grad || bn.requires_grad;
        self.push(Op::Add { a, b }, shape, value, rg, "add")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let xn = self.node(x)?;
        let ce = E::from_f64(c);
        let value: Vec<E> = xn.value.iter().map(|&v| v * ce).collect();
        let shape = xn.shape.clone();
        let rg = xn.requires_grad;
        self.push(Op::Scale { x, c: ce }, shape, value, rg, "scale")
    }

    /// Identity forward whose backward multiplies the gradient by `c`.
    pub fn grad_scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let xn = self.node(x)?;
        let value = xn.value.clone();
        let shape = xn.shape.clone();
        let rg = xn.requires_grad;
        self.push(
            Op::GradScale {
                x,
                c: E::from_f64(c),
            },
            shape,
            value,
            rg,
            "grad_scale",
        )
    }

    // ── Dense ───────────────────────────────────────────────────────────

    /// Affine map: x is N×F, weight is F×G, bias is G.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, f) = dims2_of(self.node(x)?, "linear")?;
        let (wf, g) = dims2_of(self.node(w)?, "linear")?;
        if wf != f {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: self.node(x)?.shape.clone(),
                rhs: self.node(w)?.shape.clone(),
            });
        }
        expect_shape(self.node(b)?, &[g], "linear")?;
        let mut value = matmul(&self.node(x)?.value, &self.node(w)?.value, n, f, g);
        {
            let bias = &self.node(b)?.value;
            for row in value.chunks_mut(g) {
                for (v, &bv) in row.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        let rg = self.node(x)?.requires_grad
            || self.node(w)?.requires_grad
            || self.node(b)?.requires_grad;
        self.push(Op::Linear { x, w, b }, vec![n, g], value, rg, "linear")
    }

    // ── Losses ──────────────────────────────────────────────────────────

    /// Softplus-stabilized binary cross-entropy on raw logits, averaged
    /// over all elements. Targets must lie in [0, 1].
    pub fn bce_with_logits(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        let (ln, tn) = (self.node(logits)?, self.node(target)?);
        if ln.shape != tn.shape {
            return Err(TensorError::ShapeMismatch {
                op: "loss_bce_logits",
                lhs: ln.shape.clone(),
                rhs: tn.shape.clone(),
            });
        }
        let (mut tmin, mut tmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for &t in &tn.value {
            let t = t.as_f64();
            tmin = tmin.min(t);
            tmax = tmax.max(t);
        }
        if !tn.value.is_empty() && (tmin < 0.0 || tmax > 1.0) {
            return Err(TensorError::InvalidTarget {
                min: tmin,
                max: tmax,
            });
        }
        let n = ln.value.len();
        let inv_n = E::from_f64(1.0 / n as f64);
        let mut acc = E::zero();
        for (&x, &t) in ln.value.iter().zip(&tn.value) {
            // max(x,0) − x·t + ln(1 + e^{−|x|})
            let pos = if x > E::zero() { x } else { E::zero() };
            acc += pos - x * t + Float::ln_1p(Float::exp(-Float::abs(x)));
        }
        let value = vec![acc * inv_n];
        let rg = ln.requires_grad || tn.requires_grad;
        self.push(
            Op::BceLogits { logits, target },
            vec![1],
            value,
            rg,
            "loss_bce_logits",
        )
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (an, bn) = (self.node(a)?, self.node(b)?);
        if an.shape != bn.shape {
            return Err(TensorError::ShapeMismatch {
                op: "loss_l1",
                lhs: an.shape.clone(),
                rhs: bn.shape.clone(),
            });
        }
        let inv_n = E::from_f64(1.0 / an.value.len() as f64);
        let mut acc = E::zero();
        for (&x, &y) in an.value.iter().zip(&bn.value) {
            acc += Float::abs(x - y);
        }
        let value = vec![acc * inv_n];
        let rg = an.requires_grad || bn.requires_grad;
        self.push(Op::L1 { a, b }, vec![1], value, rg, "loss_l1")
    }

    /// Mean squared difference.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (an, bn) = (self.node(a)?, self.node(b)?);
        if an.shape != bn.shape {
            return Err(TensorError::ShapeMismatch {
                op: "loss_mse",
                lhs: an.shape.clone(),
                rhs: bn.shape.clone(),
            });
        }
        let inv_n = E::from_f64(1.0 / an.value.len() as f64);
        let mut acc = E::zero();
        for (&x, &y) in an.value.iter().zip(&bn.value) {
            let d = x - y;
            acc += d * d;
        }
        let value = vec![acc * inv_n];
        let rg = an.requires_grad || bn.requires_grad;
        self.push(Op::Mse { a, b }, vec![1], value, rg, "loss_mse")
    }

    /// z = μ + exp(logvar/2)·ε with ε ~ N(0, I) drawn from `rng` and saved
    /// for the backward pass and replay determinism.
    pub fn reparameterize(&mut self, mu: NodeId, logvar: NodeId, rng: &mut Rng) -> Result<NodeId> {
        let n = self.node(mu)?.value.len();
        let mut eps = vec![E::zero(); n];
        rng.fill_normal(&mut eps, 0.0, 1.0);
        self.reparameterize_with(mu, logvar, eps)
    }

    /// Reparameterization with explicit noise (ε = 0 gives z = μ).
    pub fn reparameterize_with(
        &mut self,
        mu: NodeId,
        logvar: NodeId,
        eps: Vec<E>,
    ) -> Result<NodeId> {
        let (mn, ln) = (self.node(mu)?, self.node(logvar)?);
        if mn.shape != ln.shape {
            return Err(TensorError::ShapeMismatch {
                op: "reparameterize",
                lhs: mn.shape.clone(),
                rhs: ln.shape.clone(),
            });
        }
        debug_assert_eq!(eps.len(), mn.value.len());
        let half = E::from_f64(0.5);
        let value: Vec<E> = mn
            .value
            .iter()
            .zip(&ln.value)
            .zip(&eps)
            .map(|((&m, &lv), &e)| m + Float::exp(lv * half) * e)
            .collect();
        let shape = mn.shape.clone();
        let rg = mn.requires_grad || ln.requires_grad;
        self.push(
            Op::Reparam { mu, logvar, eps },
            shape,
            value,
            rg,
            "reparameterize",
        )
    }

    /// KL divergence from N(μ, diag exp(logvar)) to N(0, I): sum over the
    /// latent dimension, mean over the batch (rows).
    pub fn kl_divergence(&mut self, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
        let (rows, _cols) = dims2_of(self.node(mu)?, "kl_divergence")?;
        let (mn, ln) = (self.node(mu)?, self.node(logvar)?);
        if mn.shape != ln.shape {
            return Err(TensorError::ShapeMismatch {
                op: "kl_divergence",
                lhs: mn.shape.clone(),
                rhs: ln.shape.clone(),
            });
        }
        let half = E::from_f64(0.5);
        let mut acc = E::zero();
        for (&m, &lv) in mn.value.iter().zip(&ln.value) {
            acc += -half * (E::one() + lv - m * m - Float::exp(lv));
        }
        let value = vec![acc / E::from_usize(rows)];
        let rg = mn.requires_grad || ln.requires_grad;
        self.push(
            Op::Kl { mu, logvar },
            vec![1],
            value,
            rg,
            "kl_divergence",
        )
    }

    /// Fixed-weight inner product reducing any node to a scalar.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<E>) -> Result<NodeId> {
        let xn = self.node(x)?;
        if weights.len() != xn.value.len() {
            return Err(TensorError::DataLength {
                expected: xn.value.len(),
                got: weights.len(),
            });
        }
        let mut acc = E::zero();
        for (&v, &w) in xn.value.iter().zip(&weights) {
            acc += v * w;
        }
        let value = vec![acc];
        let rg = xn.requires_grad;
        self.push(
            Op::WeightedSum { x, weights },
            vec![1],
            value,
            rg,
            "weighted_sum",
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populate gradients for every grad-requiring ancestor of `loss`.
    /// Each call re-derives the tape's gradient buffers from scratch;
    /// accumulation across calls happens when the caller folds them into
    /// tensors with [`Tensor::accumulate_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let n_nodes = self.nodes.len();
        if loss.0 >= n_nodes {
            return Err(TensorError::DetachedTape);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![E::one()]);

        let Tape { nodes, grads, .. } = self;
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            if !nodes[idx].requires_grad {
                continue;
            }
            step_backward(nodes, grads, idx, &gout);
            // Keep leaf gradients readable after the pass.
            if matches!(nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gout);
            }
        }
        Ok(())
    }
}

fn dims4_of<E: Scalar>(node: &Node<E>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match node.shape.as_slice() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        _ => Err(TensorError::BadRank {
            op,
            expected: 4,
            shape: node.shape.clone(),
        }),
    }
}

fn dims2_of<E: Scalar>(node: &Node<E>, op: &'static str) -> Result<(usize, usize)> {
    match node.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::BadRank {
            op,
            expected: 2,
            shape: node.shape.clone(),
        }),
    }
}

fn expect_shape<E: Scalar>(node: &Node<E>, want: &[usize], op: &'static str) -> Result<()> {
    if node.shape != want {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: node.shape.clone(),
            rhs: want.to_vec(),
        });
    }
    Ok(())
}

#[inline]
fn sigmoid<E: Scalar>(x: E) -> E {
    E::one() / (E::one() + Float::exp(-x))
}

fn add_grad<E: Scalar>(slot: &mut Option<Vec<E>>, contribution: Vec<E>) {
    match slot {
        Some(g) => {
            for (gv, cv) in g.iter_mut().zip(contribution) {
                *gv += cv;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn add_grad_if<E: Scalar>(
    nodes: &[Node<E>],
    grads: &mut [Option<Vec<E>>],
    id: NodeId,
    contribution: impl FnOnce() -> Vec<E>,
) {
    if nodes[id.0].requires_grad {
        add_grad(&mut grads[id.0], contribution());
    }
}

/// Distribute `gout` from node `idx` to its inputs.
fn step_backward<E: Scalar>(
    nodes: &[Node<E>],
    grads: &mut [Option<Vec<E>>],
    idx: usize,
    gout: &[E],
) {
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom } => {
            add_grad_if(nodes, grads, *x, || {
                conv2d_bwd_input(gout, &nodes[w.0].value, geom)
            });
            add_grad_if(nodes, grads, *w, || {
                conv2d_bwd_weight(&nodes[x.0].value, gout, geom)
            });
            add_grad_if(nodes, grads, *b, || conv2d_bwd_bias(gout, geom));
        }
        Op::ConvTranspose2d { x, w, b, geom } => {
            // Forward was conv2d_bwd_input, so the roles swap back.
            add_grad_if(nodes, grads, *x, || {
                conv2d_fwd(gout, &nodes[w.0].value, None, geom)
            });
            add_grad_if(nodes, grads, *w, || {
                conv2d_bwd_weight(gout, &nodes[x.0].value, geom)
            });
            add_grad_if(nodes, grads, *b, || {
                // Bias spans the output channels (geom.ci here).
                let plane = geom.h * geom.w;
                let c = geom.ci;
                let mut db = vec![E::zero(); c];
                for n in 0..geom.n {
                    for ci in 0..c {
                        let base = (n * c + ci) * plane;
                        let mut acc = E::zero();
                        for &v in &gout[base..base + plane] {
                            acc += v;
                        }
                        db[ci] += acc;
                    }
                }
                db
            });
        }
        Op::BnTrain {
            x,
            gamma,
            beta,
            stats,
            plane,
        } => {
            let [n, c, ..] = nodes[idx].shape[..] else {
                unreachable!()
            };
            let (dx, dgamma, dbeta) = bn_backward_train(
                &nodes[x.0].value,
                gout,
                n,
                c,
                *plane,
                stats,
                &nodes[gamma.0].value,
            );
            add_grad_if(nodes, grads, *x, || dx);
            add_grad_if(nodes, grads, *gamma, || dgamma);
            add_grad_if(nodes, grads, *beta, || dbeta);
        }
        Op::BnEval {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            plane,
        } => {
            let [n, c, ..] = nodes[idx].shape[..] else {
                unreachable!()
            };
            let (dx, dgamma, dbeta) = bn_backward_eval(
                &nodes[x.0].value,
                gout,
                n,
                c,
                *plane,
                mean,
                inv_std,
                &nodes[gamma.0].value,
            );
            add_grad_if(nodes, grads, *x, || dx);
            add_grad_if(nodes, grads, *gamma, || dgamma);
            add_grad_if(nodes, grads, *beta, || dbeta);
        }
        Op::Act { x, act } => {
            add_grad_if(nodes, grads, *x, || match act {
                Activation::Relu => nodes[x.0]
                    .value
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| if v > E::zero() { g } else { E::zero() })
                    .collect(),
                Activation::LeakyRelu { slope } => {
                    let s = E::from_f64(*slope);
                    nodes[x.0]
                        .value
                        .iter()
                        .zip(gout)
                        .map(|(&v, &g)| if v > E::zero() { g } else { g * s })
                        .collect()
                }
                Activation::Tanh => nodes[idx]
                    .value
                    .iter()
                    .zip(gout)
                    .map(|(&y, &g)| g * (E::one() - y * y))
                    .collect(),
                Activation::Sigmoid => nodes[idx]
                    .value
                    .iter()
                    .zip(gout)
                    .map(|(&y, &g)| g * y * (E::one() - y))
                    .collect(),
            });
        }
        Op::Linear { x, w, b } => {
            let [n, f] = nodes[x.0].shape[..] else {
                unreachable!()
            };
            let g_dim = nodes[idx].shape[1];
            add_grad_if(nodes, grads, *x, || {
                matmul_a_bt(gout, &nodes[w.0].value, n, g_dim, f)
            });
            add_grad_if(nodes, grads, *w, || {
                matmul_at_b(&nodes[x.0].value, gout, f, n, g_dim)
            });
            add_grad_if(nodes, grads, *b, || {
                let mut db = vec![E::zero(); g_dim];
                for row in gout.chunks(g_dim) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                db
            });
        }
        Op::Concat { a, b, ca, cb, plane } => {
            let n = nodes[idx].shape[0];
            let ctot = ca + cb;
            add_grad_if(nodes, grads, *a, || {
                let mut da = vec![E::zero(); n * ca * plane];
                for ni in 0..n {
                    da[ni * ca * plane..(ni + 1) * ca * plane].copy_from_slice(
                        &gout[ni * ctot * plane..ni * ctot * plane + ca * plane],
                    );
                }
                da
            });
            add_grad_if(nodes, grads, *b, || {
                let mut db = vec![E::zero(); n * cb * plane];
                for ni in 0..n {
                    db[ni * cb * plane..(ni + 1) * cb * plane].copy_from_slice(
                        &gout[ni * ctot * plane + ca * plane..(ni + 1) * ctot * plane],
                    );
                }
                db
            });
        }
        Op::Reshape { x } => {
            add_grad_if(nodes, grads, *x, || gout.to_vec());
        }
        Op::Add { a, b } => {
            add_grad_if(nodes, grads, *a, || gout.to_vec());
            add_grad_if(nodes, grads, *b, || gout.to_vec());
        }
        Op::Scale { x, c } => {
            let c = *c;
            add_grad_if(nodes, grads, *x, || gout.iter().map(|&g| g * c).collect());
        }
        Op::GradScale { x, c } => {
            let c = *c;
            add_grad_if(nodes, grads, *x, || gout.iter().map(|&g| g * c).collect());
        }
        Op::BceLogits { logits, target } => {
            let g = gout[0];
            let inv_n = E::from_f64(1.0 / nodes[logits.0].value.len() as f64);
            add_grad_if(nodes, grads, *logits, || {
                nodes[logits.0]
                    .value
                    .iter()
                    .zip(&nodes[target.0].value)
                    .map(|(&x, &t)| g * inv_n * (sigmoid(x) - t))
                    .collect()
            });
            add_grad_if(nodes, grads, *target, || {
                nodes[logits.0]
                    .value
                    .iter()
                    .map(|&x| -g * inv_n * x)
                    .collect()
            });
        }
        Op::L1 { a, b } => {
            let g = gout[0];
            let inv_n = E::from_f64(1.0 / nodes[a.0].value.len() as f64);
            let signs = |flip: bool| {
                let s = if flip { -E::one() } else { E::one() };
                nodes[a.0]
                    .value
                    .iter()
                    .zip(&nodes[b.0].value)
                    .map(|(&x, &y)| {
                        let d = x - y;
                        // Subgradient at a tie is 0.
                        let sign = if d > E::zero() {
                            E::one()
                        } else if d < E::zero() {
                            -E::one()
                        } else {
                            E::zero()
                        };
                        g * inv_n * sign * s
                    })
                    .collect::<Vec<E>>()
            };
            add_grad_if(nodes, grads, *a, || signs(false));
            add_grad_if(nodes, grads, *b, || signs(true));
        }
        Op::Mse { a, b } => {
            let g = gout[0];
            let two_inv_n = E::from_f64(2.0 / nodes[a.0].value.len() as f64);
            let diffs = |flip: bool| {
                let s = if flip { -E::one() } else { E::one() };
                nodes[a.0]
                    .value
                    .iter()
                    .zip(&nodes[b.0].value)
                    .map(|(&x, &y)| g * two_inv_n * (x - y) * s)
                    .collect::<Vec<E>>()
            };
            add_grad_if(nodes, grads, *a, || diffs(false));
            add_grad_if(nodes, grads, *b, || diffs(true));
        }
        Op::Reparam { mu, logvar, eps } => {
            add_grad_if(nodes, grads, *mu, || gout.to_vec());
            add_grad_if(nodes, grads, *logvar, || {
                let half = E::from_f64(0.5);
                nodes[logvar.0]
                    .value
                    .iter()
                    .zip(eps)
                    .zip(gout)
                    .map(|((&lv, &e), &g)| g * half * Float::exp(lv * half) * e)
                    .collect()
            });
        }
        Op::Kl { mu, logvar } => {
            let g = gout[0];
            let rows = nodes[mu.0].shape[0];
            let inv_rows = E::from_f64(1.0 / rows as f64);
            add_grad_if(nodes, grads, *mu, || {
                nodes[mu.0]
                    .value
                    .iter()
                    .map(|&m| g * inv_rows * m)
                    .collect()
            });
            add_grad_if(nodes, grads, *logvar, || {
                let half = E::from_f64(0.5);
                nodes[logvar.0]
                    .value
                    .iter()
                    .map(|&lv| g * inv_rows * half * (Float::exp(lv) - E::one()))
                    .collect()
            });
        }
        Op::WeightedSum { x, weights } => {
            let g = gout[0];
            add_grad_if(nodes, grads, *x, || {
                weights.iter().map(|&w| g * w).collect()
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn mean_square_gradient() {
        // loss = mean(x²) for x = [1, 2] → grad = 2x/n = [1, 2]
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(&t64(&[2], &[1.0, 2.0]).requires_grad(true), true)
            .unwrap();
        let zeros = tape.input(&Tensor::zeros(&[2])).unwrap();
        let loss = tape.mse_loss(x, zeros).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn two_branches_accumulate() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(&t64(&[2], &[1.0, 2.0]).requires_grad(true), true)
            .unwrap();
        let zeros = tape.input(&Tensor::zeros(&[2])).unwrap();
        let l1 = tape.mse_loss(x, zeros).unwrap();
        let l2 = tape.mse_loss(x, zeros).unwrap();
        let loss = tape.add(l1, l2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates_into_tensor() {
        let mut tape = Tape::<f64>::new();
        let mut x = t64(&[2], &[1.0, 2.0]).requires_grad(true);
        let xid = tape.bind(&mut x, true).unwrap();
        let zeros = tape.input(&Tensor::zeros(&[2])).unwrap();
        let loss = tape.mse_loss(xid, zeros).unwrap();
        tape.backward(loss).unwrap();
        x.accumulate_grad(tape.grad(xid).unwrap());
        tape.backward(loss).unwrap();
        x.accumulate_grad(tape.grad(xid).unwrap());
        assert_eq!(x.grad.as_deref().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[2], &[1.0, 2.0]), false).unwrap();
        let err = tape.backward(x).unwrap_err();
        assert_eq!(err, TensorError::NotScalar { shape: vec![2] });
    }

    #[test]
    fn backward_rejects_foreign_handle() {
        let mut tape = Tape::<f64>::new();
        let err = tape.backward(NodeId(3)).unwrap_err();
        assert_eq!(err, TensorError::DetachedTape);
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[3], &[-1.0, 0.0, 2.0]), false).unwrap();
        let leaky = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(leaky), &[-0.2, 0.0, 2.0]);
        let th = tape.tanh(x).unwrap();
        assert_eq!(tape.value(th)[1], 0.0);
        let sg = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(sg)[1], 0.5);
    }

    #[test]
    fn bce_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let zero = tape.leaf(&t64(&[1], &[0.0]), false).unwrap();
        let one = tape.leaf(&t64(&[1], &[1.0]), false).unwrap();
        let loss = tape.bce_with_logits(zero, one).unwrap();
        assert!((tape.scalar(loss) - core::f64::consts::LN_2).abs() < 1e-12);

        let big = tape.leaf(&t64(&[1], &[20.0]), false).unwrap();
        let loss = tape.bce_with_logits(big, one).unwrap();
        assert!((tape.scalar(loss) - 2.0611536181902037e-9).abs() < 1e-15);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let mut rng = Rng::new(4);
        let mut tape = Tape::<f64>::new();
        let logits: Vec<f64> = (0..64).map(|_| 3.0 * rng.normal_f64()).collect();
        let targets: Vec<f64> = (0..64).map(|_| rng.uniform_f64()).collect();
        let l = tape.leaf(&t64(&[64], &logits), false).unwrap();
        let t = tape.leaf(&t64(&[64], &targets), false).unwrap();
        let loss = tape.bce_with_logits(l, t).unwrap();
        let direct: f64 = logits
            .iter()
            .zip(&targets)
            .map(|(&x, &t)| {
                let s = 1.0 / (1.0 + (-x).exp());
                -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / 64.0;
        assert!((tape.scalar(loss) - direct).abs() < 1e-12);
    }

    #[test]
    fn bce_is_finite_for_extreme_logits() {
        let mut tape = Tape::<f32>::new();
        let l = tape
            .leaf(
                &Tensor::from_vec(&[4], vec![-1e4f32, -1.0, 1.0, 1e4]).unwrap(),
                false,
            )
            .unwrap();
        let t = tape
            .leaf(&Tensor::from_vec(&[4], vec![0.0f32, 1.0, 0.0, 1.0]).unwrap(), false)
            .unwrap();
        let loss = tape.bce_with_logits(l, t).unwrap();
        assert!(tape.scalar(loss).is_finite());
    }

    #[test]
    fn bce_rejects_out_of_range_targets() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(&t64(&[1], &[0.0]), false).unwrap();
        let t = tape.leaf(&t64(&[1], &[1.5]), false).unwrap();
        let err = tape.bce_with_logits(l, t).unwrap_err();
        assert!(matches!(err, TensorError::InvalidTarget { .. }));
    }

    #[test]
    fn l1_values_and_tie_subgradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape
            .leaf(&t64(&[2], &[1.0, -1.0]).requires_grad(true), true)
            .unwrap();
        let b = tape.leaf(&t64(&[2], &[0.0, 0.0]), false).unwrap();
        let loss = tape.l1_loss(a, b).unwrap();
        assert_eq!(tape.scalar(loss), 1.0);

        let mut tape = Tape::<f64>::new();
        let a = tape
            .leaf(&t64(&[2], &[0.5, 0.5]).requires_grad(true), true)
            .unwrap();
        let b = tape.leaf(&t64(&[2], &[0.5, 0.5]), false).unwrap();
        let loss = tape.l1_loss(a, b).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(&[1], &[2.0]), false).unwrap();
        let b = tape.leaf(&t64(&[1], &[0.0]), false).unwrap();
        let loss = tape.mse_loss(a, b).unwrap();
        assert_eq!(tape.scalar(loss), 4.0);
    }

    #[test]
    fn concat_splits_gradient_bit_exactly() {
        let mut rng = Rng::new(9);
        let mut tape = Tape::<f64>::new();
        let adata: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.normal_f64()).collect();
        let bdata: Vec<f64> = (0..2 * 2 * 4 * 4).map(|_| rng.normal_f64()).collect();
        let a = tape
            .leaf(&t64(&[2, 3, 4, 4], &adata).requires_grad(true), true)
            .unwrap();
        let b = tape
            .leaf(&t64(&[2, 2, 4, 4], &bdata).requires_grad(true), true)
            .unwrap();
        let cat = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(cat), &[2, 5, 4, 4]);

        let weights: Vec<f64> = (0..2 * 5 * 4 * 4).map(|_| rng.normal_f64()).collect();
        let loss = tape.weighted_sum(cat, weights.clone()).unwrap();
        tape.backward(loss).unwrap();

        let ga = tape.grad(a).unwrap();
        let gb = tape.grad(b).unwrap();
        let plane = 16;
        for n in 0..2 {
            for (i, &g) in ga[n * 3 * plane..(n + 1) * 3 * plane].iter().enumerate() {
                assert_eq!(g.to_bits(), weights[n * 5 * plane + i].to_bits());
            }
            for (i, &g) in gb[n * 2 * plane..(n + 1) * 2 * plane].iter().enumerate() {
                assert_eq!(g.to_bits(), weights[n * 5 * plane + 3 * plane + i].to_bits());
            }
        }
    }

    #[test]
    fn concat_with_empty_channel_block_is_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(&[1, 2, 2, 2], &[1.0; 8]), false).unwrap();
        let empty = tape.leaf(&Tensor::zeros(&[1, 0, 2, 2]), false).unwrap();
        let cat = tape.concat_channels(a, empty).unwrap();
        assert_eq!(tape.shape(cat), &[1, 2, 2, 2]);
        assert_eq!(tape.value(cat), tape.value(a));
    }

    #[test]
    fn reparameterize_examples() {
        // ε = 0 → z = μ
        let mut tape = Tape::<f64>::new();
        let mu = tape.leaf(&t64(&[1, 2], &[0.3, -0.7]), false).unwrap();
        let lv = tape.leaf(&t64(&[1, 2], &[0.1, 0.2]), false).unwrap();
        let z = tape.reparameterize_with(mu, lv, vec![0.0, 0.0]).unwrap();
        assert_eq!(tape.value(z), tape.value(mu));

        // μ=0, logvar=ln 4, ε=1 → z = 2
        let mut tape = Tape::<f64>::new();
        let mu = tape.leaf(&t64(&[1, 1], &[0.0]), false).unwrap();
        let lv = tape.leaf(&t64(&[1, 1], &[4.0f64.ln()]), false).unwrap();
        let z = tape.reparameterize_with(mu, lv, vec![1.0]).unwrap();
        assert!((tape.value(z)[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn reparameterize_sample_moments() {
        let mut rng = Rng::new(123).substream(crate::rng::STREAM_NOISE);
        let n = 100_000;
        let (mu, sigma) = (0.4, 1.5);
        let logvar = (sigma * sigma as f64).ln();
        let mut tape = Tape::<f64>::new();
        let m = tape
            .leaf(&Tensor::full(&[n, 1], mu), false)
            .unwrap();
        let lv = tape.leaf(&Tensor::full(&[n, 1], logvar), false).unwrap();
        let z = tape.reparameterize(m, lv, &mut rng).unwrap();
        let vals = tape.value(z);
        let mean = vals.iter().sum::<f64>() / n as f64;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
        let tol = 4.0 / (n as f64).sqrt();
        assert!((mean - mu).abs() < tol * sigma, "mean {mean}");
        assert!((std - sigma).abs() < 4.0 * tol * sigma, "std {std}");
    }

    #[test]
    fn kl_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let mu = tape.leaf(&t64(&[1, 1], &[0.0]), false).unwrap();
        let lv = tape.leaf(&t64(&[1, 1], &[0.0]), false).unwrap();
        let kl = tape.kl_divergence(mu, lv).unwrap();
        assert_eq!(tape.scalar(kl), 0.0);

        let mu = tape.leaf(&t64(&[1, 1], &[1.0]), false).unwrap();
        let lv = tape.leaf(&t64(&[1, 1], &[0.0]), false).unwrap();
        let kl = tape.kl_divergence(mu, lv).unwrap();
        assert!((tape.scalar(kl) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_is_nonnegative_on_random_inputs() {
        let mut rng = Rng::new(31);
        for _ in 0..200 {
            let mut tape = Tape::<f64>::new();
            let mu_v: Vec<f64> = (0..8).map(|_| 2.0 * rng.normal_f64()).collect();
            let lv_v: Vec<f64> = (0..8).map(|_| 1.5 * rng.normal_f64()).collect();
            let mu = tape.leaf(&t64(&[2, 4], &mu_v), false).unwrap();
            let lv = tape.leaf(&t64(&[2, 4], &lv_v), false).unwrap();
            let kl = tape.kl_divergence(mu, lv).unwrap();
            assert!(tape.scalar(kl) >= 0.0);
        }
    }

    #[test]
    fn conv_identity_case_via_tape() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(&t64(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]), false)
            .unwrap();
        let w = tape.leaf(&t64(&[1, 1, 1, 1], &[1.0]), false).unwrap();
        let b = tape.leaf(&t64(&[1], &[0.0]), false).unwrap();
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_transpose_shape_formula() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 512, 1, 1]), false).unwrap();
        let w = tape
            .leaf(&Tensor::zeros(&[512, 64, 4, 4]), false)
            .unwrap();
        let b = tape.leaf(&Tensor::zeros(&[64]), false).unwrap();
        let y = tape.conv_transpose2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 64, 2, 2]);

        let x = tape.leaf(&Tensor::zeros(&[1, 8, 128, 128]), false).unwrap();
        let w = tape.leaf(&Tensor::zeros(&[8, 4, 4, 4]), false).unwrap();
        let b = tape.leaf(&Tensor::zeros(&[4]), false).unwrap();
        let y = tape.conv_transpose2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 256, 256]);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let err = tape
            .leaf(&t64(&[1], &[f64::NAN]), false)
            .unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "leaf" });
    }

    #[test]
    fn conv_shape_mismatch_is_structured() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 3, 8, 8]), false).unwrap();
        let w = tape.leaf(&Tensor::zeros(&[4, 2, 3, 3]), false).unwrap();
        let b = tape.leaf(&Tensor::zeros(&[4]), false).unwrap();
        let err = tape.conv2d(x, w, b, 1, 1).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "conv2d", .. }));
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(&t64(&[2], &[1.0, 2.0]).requires_grad(true), true)
            .unwrap();
        let d = tape.detach(x).unwrap();
        let zeros = tape.input(&Tensor::zeros(&[2])).unwrap();
        let loss = tape.mse_loss(d, zeros).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
    }
}
