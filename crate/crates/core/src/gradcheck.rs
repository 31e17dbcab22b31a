//! Finite-difference verification of analytic gradients.
//!
//! Every check runs in `f64`. A graph builder closure assembles the op
//! under test on a fresh tape; its (possibly non-scalar) output is reduced
//! to a scalar through a fixed random projection so one backward pass
//! yields every input gradient at once. Central differences with step
//! h = 1e-4 provide the reference.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Outcome of checking one op.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    /// Worst relative error over all inputs, elements and seeds.
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// How leaf values are sampled. Ops with kinks resample away from them.
#[derive(Clone, Copy)]
pub enum InputKind {
    /// Standard normal values.
    Normal,
    /// Normal values with magnitude kept ≥ 0.15 (away from a kink at 0).
    AwayFromZero,
    /// Uniform in [0.05, 0.95] (valid classification targets).
    UnitInterval,
}

fn sample(kind: InputKind, shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| match kind {
            InputKind::Normal => rng.normal_f64(),
            InputKind::AwayFromZero => {
                let v = rng.normal_f64();
                let sign = if v >= 0.0 { 1.0 } else { -1.0 };
                sign * (v.abs() + 0.15)
            }
            InputKind::UnitInterval => 0.05 + 0.9 * rng.uniform_f64(),
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Relative error as |a − n| / max(|a|, |n|, 1e-8).
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// One differentiable graph under test.
pub struct GradCheckCase<F>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, InputKind)>,
    /// <= 0 checks every input; otherwise only the first `n` inputs are
    /// differentiated (the rest act as constants).
    pub grad_inputs: usize,
    pub build: F,
}

/// Check one case at one sampled point. Reports, never panics.
pub fn grad_check<F>(case: &GradCheckCase<F>, tolerance: f64, rng: &mut Rng) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let inputs: Vec<Tensor<f64>> = case
        .inputs
        .iter()
        .map(|(shape, kind)| sample(*kind, shape, rng))
        .collect();
    let n_grad = if case.grad_inputs == 0 {
        inputs.len()
    } else {
        case.grad_inputs
    };

    // Forward once to learn the output size, then fix the projection.
    let out_numel = {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<NodeId> = match inputs
            .iter()
            .map(|t| tape.leaf(t, false))
            .collect::<Result<_>>()
        {
            Ok(ids) => ids,
            Err(e) => return failure(case.name, tolerance, &e),
        };
        match (case.build)(&mut tape, &ids) {
            Ok(out) => tape.value(out).len(),
            Err(e) => return failure(case.name, tolerance, &e),
        }
    };
    let projection: Vec<f64> = (0..out_numel).map(|_| rng.normal_f64()).collect();

    let eval = |points: &[Tensor<f64>]| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<NodeId> = points
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(t, i < n_grad))
            .collect::<Result<_>>()?;
        let out = (case.build)(&mut tape, &ids)?;
        let loss = tape.weighted_sum(out, projection.clone())?;
        tape.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()))
            .collect();
        Ok((tape.scalar(loss), grads))
    };

    let (_, analytic) = match eval(&inputs) {
        Ok(v) => v,
        Err(e) => return failure(case.name, tolerance, &e),
    };

    let mut max_err = 0.0f64;
    for (i, input) in inputs.iter().enumerate().take(n_grad) {
        let Some(agrad) = analytic.get(i).and_then(|g| g.clone()) else {
            return GradCheckReport {
                op: format!("{} (missing gradient for input {i})", case.name),
                max_rel_err: f64::INFINITY,
                tolerance,
            };
        };
        for e in 0..input.numel() {
            let mut perturbed = inputs.clone();
            perturbed[i].data_mut()[e] = input.data()[e] + FD_STEP;
            let plus = match eval(&perturbed) {
                Ok((v, _)) => v,
                Err(err) => return failure(case.name, tolerance, &err),
            };
            perturbed[i].data_mut()[e] = input.data()[e] - FD_STEP;
            let minus = match eval(&perturbed) {
                Ok((v, _)) => v,
                Err(err) => return failure(case.name, tolerance, &err),
            };
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(agrad[e], numeric));
        }
    }

    GradCheckReport {
        op: String::from(case.name),
        max_rel_err: max_err,
        tolerance,
    }
}

fn failure(name: &str, tolerance: f64, err: &crate::TensorError) -> GradCheckReport {
    GradCheckReport {
        op: format!("{name} (error: {err})"),
        max_rel_err: f64::INFINITY,
        tolerance,
    }
}

/// Run every differentiable op through the checker across `seeds` sampled
/// points each. Returns one report per op carrying the worst error seen.
pub fn standard_suite(tolerance: f64, seed: u64, seeds: usize) -> Vec<GradCheckReport> {
    let mut reports = Vec::new();

    macro_rules! check {
        ($case:expr) => {{
            let case = $case;
            let mut worst = GradCheckReport {
                op: String::from(case.name),
                max_rel_err: 0.0,
                tolerance,
            };
            for round in 0..seeds {
                let mut rng = Rng::new(seed ^ ((round as u64 + 1) << 32)).substream(round as u64);
                let rep = grad_check(&case, tolerance, &mut rng);
                if rep.max_rel_err > worst.max_rel_err {
                    worst.max_rel_err = rep.max_rel_err;
                    worst.op = rep.op;
                }
            }
            reports.push(worst);
        }};
    }

    check!(GradCheckCase {
        name: "conv2d",
        inputs: alloc::vec![
            (alloc::vec![2, 3, 8, 8], InputKind::Normal),
            (alloc::vec![4, 3, 4, 4], InputKind::Normal),
            (alloc::vec![4], InputKind::Normal),
        ],
        grad_inputs: 0,
        build: |tape, ids| tape.conv2d(ids[0], ids[1], ids[2], 2, 1),
    });
    check!(GradCheckCase {
        name: "conv_transpose2d",
        inputs: alloc::vec![
            (alloc::vec![2, 4, 4, 4], InputKind::Normal),
            (alloc::vec![4, 3, 4, 4], InputKind::Normal),
            (alloc::vec![3], InputKind::Normal),
        ],
        grad_inputs: 0,
        build: |tape, ids| tape.conv_transpose2d(ids[0], ids[1], ids[2], 2, 1),
    });
    check!(GradCheckCase {
        name: "batchnorm2d",
        inputs: alloc::vec![
            (alloc::vec![3, 2, 5, 5], InputKind::Normal),
            (alloc::vec![2], InputKind::AwayFromZero),
            (alloc::vec![2], InputKind::Normal),
        ],
        grad_inputs: 0,
        build: |tape, ids| {
            tape.batchnorm2d_train(ids[0], ids[1], ids[2], 1e-5)
                .map(|(id, _, _)| id)
        },
    });
    check!(GradCheckCase {
        name: "relu",
        inputs: alloc::vec![(alloc::vec![4, 6], InputKind::AwayFromZero)],
        grad_inputs: 0,
        build: |tape, ids| tape.relu(ids[0]),
    });
    check!(GradCheckCase {
        name: "leaky_relu",
        inputs: alloc::vec![(alloc::vec![4, 6], InputKind::AwayFromZero)],
        grad_inputs: 0,
        build: |tape, ids| tape.leaky_relu(ids[0], 0.2),
    });
    check!(GradCheckCase {
        name: "tanh",
        inputs: alloc::vec![(alloc::vec![4, 4], InputKind::Normal)],
        grad_inputs: 0,
        build: |tape, ids| tape.tanh(ids[0]),
    });
    check!(GradCheckCase {
        name: "sigmoid",
        inputs: alloc::vec![(alloc::vec![4, 4], InputKind::Normal)],
        grad_inputs: 0,
        build: |tape, ids| tape.sigmoid(ids[0]),
    });
    check!(GradCheckCase {
        name: "linear",
        inputs: alloc::vec![
            (alloc::vec![3, 7], InputKind::Normal),
            (alloc::vec![7, 5], InputKind::Normal),
            (alloc::vec![5], InputKind::Normal),
        ],
        grad_inputs: 0,
        build: |tape, ids| tape.linear(ids[0], ids[1], ids[2]),
    });
    check!(GradCheckCase {
        name: "concat_channels",
        inputs: alloc::vec![
            (alloc::vec![2, 3, 4, 4], InputKind::Normal),
            (alloc::vec![2, 2, 4, 4], InputKind::Normal),
        ],
        grad_inputs: 0,
        build: |tape, ids| tape.concat_channels(ids[0], ids[1]),
    });
    check!(GradCheckCase {
        name: "loss_bce_logits",
        inputs: alloc::vec![
            (alloc::vec![3, 9], InputKind::Normal),
            (alloc::vec![3, 9], InputKind::UnitInterval),
        ],
        grad_inputs: 1,
        build: |tape, ids| tape.bce_with_logits(ids[0], ids[1]),
    });
    check!(GradCheckCase {
        name: "loss_l1",
        // Independent samples make exact ties (the kink of |·|) improbable.
        inputs: alloc::vec![
            (alloc::vec![5, 5], InputKind::Normal),
            (alloc::vec![5, 5], InputKind::Normal),
        ],
        grad_inputs: 0,
        build: |tape, ids| tape.l1_loss(ids[0], ids[1]),
    });
    check!(GradCheckCase {
        name: "loss_mse",
        inputs: alloc::vec![
            (alloc::vec![5, 5], InputKind::Normal),
            (alloc::vec![5, 5], InputKind::Normal),
        ],
        grad_inputs: 0,
        build: |tape, ids| tape.mse_loss(ids[0], ids[1]),
    });
    check!(GradCheckCase {
        name: "reparameterize",
        inputs: alloc::vec![
            (alloc::vec![3, 6], InputKind::Normal),
            (alloc::vec![3, 6], InputKind::Normal),
        ],
        grad_inputs: 0,
        build: |tape, ids| {
            let mut noise = Rng::new(0xE9).substream(crate::rng::STREAM_NOISE);
            tape.reparameterize(ids[0], ids[1], &mut noise)
        },
    });
    check!(GradCheckCase {
        name: "kl_divergence",
        inputs: alloc::vec![
            (alloc::vec![3, 6], InputKind::Normal),
            (alloc::vec![3, 6], InputKind::Normal),
        ],
        grad_inputs: 0,
        build: |tape, ids| tape.kl_divergence(ids[0], ids[1]),
    });
    check!(GradCheckCase {
        name: "composite_conv_bn_leaky_l1",
        inputs: alloc::vec![
            (alloc::vec![2, 2, 6, 6], InputKind::Normal),
            (alloc::vec![3, 2, 4, 4], InputKind::Normal),
            (alloc::vec![3], InputKind::Normal),
            (alloc::vec![3], InputKind::AwayFromZero),
            (alloc::vec![3], InputKind::Normal),
            (alloc::vec![2, 3, 3, 3], InputKind::Normal),
        ],
        grad_inputs: 5,
        build: |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
            let (y, _, _) = tape.batchnorm2d_train(y, ids[3], ids[4], 1e-5)?;
            let y = tape.leaky_relu(y, 0.2)?;
            tape.l1_loss(y, ids[5])
        },
    });

    reports
}
