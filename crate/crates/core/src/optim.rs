//! Adam with bias correction.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Result, TensorError};
use crate::nn::layers::Module;
use crate::scalar::Scalar;
use crate::train::TrainConfig;

struct Slot<E> {
    m: Vec<E>,
    v: Vec<E>,
}

/// Adam over one logical parameter group. Moments are keyed by parameter
/// name, so results are independent of visit order.
pub struct Adam<E: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    slots: BTreeMap<String, Slot<E>>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Adam::new(cfg.lr, cfg.beta1, cfg.beta2)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every trainable parameter of `parts`. Each part is
    /// a name prefix plus a module; prefixes keep moment slots distinct
    /// when several modules share one optimizer.
    ///
    /// Gradients must be present and finite for every trainable parameter;
    /// on failure no parameter is modified.
    pub fn step(&mut self, parts: &mut [(&str, &mut dyn Module<E>)]) -> Result<()> {
        // Validate first so a failure cannot leave a half-updated model.
        let mut problem: Option<TensorError> = None;
        for (prefix, module) in parts.iter_mut() {
            module.visit_mut(prefix, &mut |name, t| {
                if problem.is_some() || !t.requires_grad {
                    return;
                }
                match &t.grad {
                    None => {
                        problem = Some(TensorError::MissingGrad {
                            name: name.to_string(),
                        })
                    }
                    Some(g) => {
                        if !g.iter().all(|v| v.is_finite()) {
                            problem = Some(TensorError::NonFinite { op: "adam_step" });
                        }
                    }
                }
            });
        }
        if let Some(e) = problem {
            return Err(e);
        }

        self.t += 1;
        let bc1 = E::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = E::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let (b1, b2) = (E::from_f64(self.beta1), E::from_f64(self.beta2));
        let (one_b1, one_b2) = (E::one() - b1, E::one() - b2);
        let (lr, eps) = (E::from_f64(self.lr), E::from_f64(self.eps));

        let slots = &mut self.slots;
        for (prefix, module) in parts.iter_mut() {
            module.visit_mut(prefix, &mut |name, t| {
                if !t.requires_grad {
                    return;
                }
                let g = t.grad.as_ref().expect("validated above").clone();
                let slot = slots.entry(String::from(name)).or_insert_with(|| Slot {
                    m: vec![E::zero(); g.len()],
                    v: vec![E::zero(); g.len()],
                });
                for ((theta, &gi), (m, v)) in t
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
                {
                    *m = b1 * *m + one_b1 * gi;
                    *v = b2 * *v + one_b2 * gi * gi;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *theta = *theta - lr * m_hat / (Float::sqrt(v_hat) + eps);
                }
            });
        }
        Ok(())
    }

    /// Snapshot of the moment state as (name, m, v) triples in key order.
    pub fn snapshot(&self) -> Vec<(String, Vec<E>, Vec<E>)> {
        self.slots
            .iter()
            .map(|(k, s)| (k.clone(), s.m.clone(), s.v.clone()))
            .collect()
    }

    /// Restore moments saved by [`Adam::snapshot`].
    pub fn restore(&mut self, t: u64, slots: Vec<(String, Vec<E>, Vec<E>)>) {
        self.t = t;
        self.slots = slots
            .into_iter()
            .map(|(k, m, v)| (k, Slot { m, v }))
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::join;
    use crate::tensor::Tensor;

    struct Params {
        items: Vec<(String, Tensor<f64>)>,
    }

    impl Module<f64> for Params {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
            for (n, t) in &self.items {
                f(&join(prefix, n), t);
            }
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
            for (n, t) in &mut self.items {
                f(&join(prefix, n), t);
            }
        }
    }

    fn param(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[v.len()], v.to_vec())
            .unwrap()
            .requires_grad(true)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Params {
            items: vec![(String::from("w"), param(&[0.0, 1.0]))],
        };
        p.items[0].1.grad = Some(vec![1.0, 1.0]);
        let mut adam = Adam::new(2e-4, 0.5, 0.999);
        adam.step(&mut [("", &mut p)]).unwrap();
        for (i, want) in [(0usize, 0.0), (1, 1.0)] {
            let got = p.items[0].1.data()[i];
            assert!((got - (want - 2e-4)).abs() < 1e-9, "param {i}: {got}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Params {
            items: vec![(String::from("w"), param(&[0.7]))],
        };
        p.items[0].1.grad = Some(vec![0.0]);
        let mut adam = Adam::new(1e-2, 0.9, 0.999);
        adam.step(&mut [("", &mut p)]).unwrap();
        assert_eq!(p.items[0].1.data()[0], 0.7);
        let snap = adam.snapshot();
        assert!(snap[0].1.iter().all(|&m| m == 0.0));
        assert!(snap[0].2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut p = Params {
            items: vec![(String::from("theta"), param(&[1.0]))],
        };
        let mut adam = Adam::new(0.01, 0.9, 0.999);
        let mut prev = 1.0f64;
        for _ in 0..100 {
            let theta = p.items[0].1.data()[0];
            p.items[0].1.grad = Some(vec![2.0 * theta]);
            adam.step(&mut [("", &mut p)]).unwrap();
            let next = p.items[0].1.data()[0].abs();
            assert!(next < prev, "|theta| rose from {prev} to {next}");
            prev = next;
        }
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut p = Params {
            items: vec![(String::from("w"), param(&[1.0]))],
        };
        let mut adam = Adam::new(1e-3, 0.9, 0.999);
        let err = adam.step(&mut [("gen", &mut p)]).unwrap_err();
        assert_eq!(
            err,
            TensorError::MissingGrad {
                name: String::from("gen.w")
            }
        );
    }

    #[test]
    fn update_is_invariant_to_registration_order() {
        let mk = || {
            let mut a = Params {
                items: vec![(String::from("a"), param(&[0.3]))],
            };
            let mut b = Params {
                items: vec![(String::from("b"), param(&[-0.8]))],
            };
            a.items[0].1.grad = Some(vec![0.5]);
            b.items[0].1.grad = Some(vec![-0.25]);
            (a, b)
        };

        let (mut a1, mut b1) = mk();
        let mut adam1 = Adam::new(1e-3, 0.9, 0.999);
        adam1.step(&mut [("x", &mut a1), ("y", &mut b1)]).unwrap();

        let (mut a2, mut b2) = mk();
        let mut adam2 = Adam::new(1e-3, 0.9, 0.999);
        adam2.step(&mut [("y", &mut b2), ("x", &mut a2)]).unwrap();

        assert!(a1.items[0].1.bit_eq(&a2.items[0].1));
        assert!(b1.items[0].1.bit_eq(&b2.items[0].1));
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut p = Params {
            items: vec![(String::from("w"), param(&[1.0]))],
        };
        p.items[0].1.grad = Some(vec![f64::NAN]);
        let mut adam = Adam::new(1e-3, 0.9, 0.999);
        let err = adam.step(&mut [("", &mut p)]).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "adam_step" });
        assert_eq!(p.items[0].1.data()[0], 1.0);
    }
}
