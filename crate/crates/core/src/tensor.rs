//! Dense N-dimensional tensors.
//!
//! A tensor is a contiguous row-major buffer plus its shape. Images follow
//! the N×C×H×W convention. Gradients are held next to the data so that a
//! parameter can accumulate contributions across several backward passes
//! before an optimizer consumes them.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Result, TensorError};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::NodeId;

/// Handle tying a tensor to the node that carries it on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapeRef {
    pub tape: u64,
    pub node: NodeId,
}

#[derive(Clone, Debug)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Vec<E>,
    pub requires_grad: bool,
    pub grad: Option<Vec<E>>,
    pub tape_id: Option<TapeRef>,
}

impl<E: Scalar> Tensor<E> {
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                expected: numel,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
            tape_id: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); numel],
            requires_grad: false,
            grad: None,
            tape_id: None,
        }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
            tape_id: None,
        }
    }

    /// Normally distributed values; used for weight initialization.
    pub fn randn(shape: &[usize], mean: f64, std: f64, rng: &mut Rng) -> Self {
        let mut t = Tensor::zeros(shape);
        rng.fill_normal(&mut t.data, mean, std);
        t
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Interpret as N×C×H×W.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            _ => Err(TensorError::BadRank {
                op,
                expected: 4,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Interpret as rows×cols.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::BadRank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Add a contribution into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, contribution: &[E]) {
        debug_assert_eq!(contribution.len(), self.data.len());
        match &mut self.grad {
            Some(g) => {
                for (gv, &cv) in g.iter_mut().zip(contribution) {
                    *gv += cv;
                }
            }
            None => {
                self.grad = Some(contribution.to_vec());
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
        self.tape_id = None;
    }

    /// Overwrite contents in place; shapes must match.
    pub fn copy_from(&mut self, other: &[E]) -> Result<()> {
        if other.len() != self.data.len() {
            return Err(TensorError::DataLength {
                expected: self.data.len(),
                got: other.len(),
            });
        }
        self.data.copy_from_slice(other);
        Ok(())
    }

    /// Exact bitwise equality of shape and contents.
    pub fn bit_eq(&self, other: &Tensor<E>) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data_length() {
        let err = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(err, TensorError::DataLength { expected: 6, got: 5 });
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::<f64>::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[0.5, 0.5, 0.5]);
        assert_eq!(t.grad.as_deref().unwrap(), &[1.5, 2.5, 3.5]);
        t.zero_grad();
        assert!(t.grad.is_none());
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Tensor::<f32>::randn(&[64], 0.0, 0.02, &mut Rng::new(1));
        let b = Tensor::<f32>::randn(&[64], 0.0, 0.02, &mut Rng::new(1));
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn zero_size_dims_are_allowed() {
        let t = Tensor::<f32>::zeros(&[1, 0, 4, 4]);
        assert_eq!(t.numel(), 0);
    }
}
