//! Per-channel batch normalization over N×C×H×W data.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Batch statistics for one forward pass.
#[derive(Clone, Debug)]
pub struct BnStats<E> {
    pub mean: Vec<E>,
    /// Biased (1/m) variance used for normalization.
    pub var: Vec<E>,
    pub inv_std: Vec<E>,
    /// Values per channel (N·H·W).
    pub count: usize,
}

/// Compute per-channel mean / biased variance / 1/√(var+eps).
pub fn bn_batch_stats<E: Scalar>(
    x: &[E],
    n: usize,
    c: usize,
    plane: usize,
    eps: f64,
) -> Result<BnStats<E>> {
    let m = n * plane;
    if m < 2 {
        return Err(TensorError::DegenerateStats { count: m });
    }
    let inv_m = E::from_f64(1.0 / m as f64);
    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mut acc = E::zero();
            for &v in &x[base..base + plane] {
                acc += v;
            }
            mean[ci] += acc;
        }
    }
    for v in mean.iter_mut() {
        *v *= inv_m;
    }
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mu = mean[ci];
            let mut acc = E::zero();
            for &v in &x[base..base + plane] {
                let d = v - mu;
                acc += d * d;
            }
            var[ci] += acc;
        }
    }
    for v in var.iter_mut() {
        *v *= inv_m;
    }
    let inv_std = var
        .iter()
        .map(|&v| E::one() / Float::sqrt(v + E::from_f64(eps)))
        .collect();
    Ok(BnStats {
        mean,
        var,
        inv_std,
        count: m,
    })
}

fn affine_per_channel<E: Scalar>(
    x: &[E],
    n: usize,
    c: usize,
    plane: usize,
    mean: &[E],
    inv_std: &[E],
    gamma: &[E],
    beta: &[E],
) -> Vec<E> {
    let mut y = vec![E::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (mu, is, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            let scale = g * is;
            for (yv, &xv) in y[base..base + plane].iter_mut().zip(&x[base..base + plane]) {
                *yv = (xv - mu) * scale + b;
            }
        }
    }
    y
}

pub fn bn_forward_train<E: Scalar>(
    x: &[E],
    n: usize,
    c: usize,
    plane: usize,
    stats: &BnStats<E>,
    gamma: &[E],
    beta: &[E],
) -> Vec<E> {
    affine_per_channel(x, n, c, plane, &stats.mean, &stats.inv_std, gamma, beta)
}

pub fn bn_forward_eval<E: Scalar>(
    x: &[E],
    n: usize,
    c: usize,
    plane: usize,
    running_mean: &[E],
    running_var: &[E],
    gamma: &[E],
    beta: &[E],
    eps: f64,
) -> Vec<E> {
    let inv_std: Vec<E> = running_var
        .iter()
        .map(|&v| E::one() / Float::sqrt(v + E::from_f64(eps)))
        .collect();
    affine_per_channel(x, n, c, plane, running_mean, &inv_std, gamma, beta)
}

/// Backward through training-mode normalization (batch statistics are a
/// function of the input, so their gradient terms are included).
pub fn bn_backward_train<E: Scalar>(
    x: &[E],
    dy: &[E],
    n: usize,
    c: usize,
    plane: usize,
    stats: &BnStats<E>,
    gamma: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let m = stats.count;
    let inv_m = E::from_f64(1.0 / m as f64);
    let mut dx = vec![E::zero(); x.len()];
    let mut dgamma = vec![E::zero(); c];
    let mut dbeta = vec![E::zero(); c];

    // Per channel: sum(dy) and sum(dy · xhat).
    let mut sum_dy = vec![E::zero(); c];
    let mut sum_dy_xhat = vec![E::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (mu, is) = (stats.mean[ci], stats.inv_std[ci]);
            let mut s1 = E::zero();
            let mut s2 = E::zero();
            for (&dv, &xv) in dy[base..base + plane].iter().zip(&x[base..base + plane]) {
                s1 += dv;
                s2 += dv * (xv - mu) * is;
            }
            sum_dy[ci] += s1;
            sum_dy_xhat[ci] += s2;
        }
    }
    for ci in 0..c {
        dbeta[ci] = sum_dy[ci];
        dgamma[ci] = sum_dy_xhat[ci];
    }

    // dx = (gamma·inv_std/m)·(m·dy − sum(dy) − xhat·sum(dy·xhat))
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (mu, is) = (stats.mean[ci], stats.inv_std[ci]);
            let scale = gamma[ci] * is * inv_m;
            let m_e = E::from_usize(m);
            let (s1, s2) = (sum_dy[ci], sum_dy_xhat[ci]);
            for ((dxv, &dv), &xv) in dx[base..base + plane]
                .iter_mut()
                .zip(&dy[base..base + plane])
                .zip(&x[base..base + plane])
            {
                let xhat = (xv - mu) * is;
                *dxv = scale * (m_e * dv - s1 - xhat * s2);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Backward through eval-mode normalization (running statistics are
/// constants, so this is a plain per-channel affine map).
pub fn bn_backward_eval<E: Scalar>(
    x: &[E],
    dy: &[E],
    n: usize,
    c: usize,
    plane: usize,
    mean: &[E],
    inv_std: &[E],
    gamma: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let mut dx = vec![E::zero(); x.len()];
    let mut dgamma = vec![E::zero(); c];
    let mut dbeta = vec![E::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (mu, is) = (mean[ci], inv_std[ci]);
            let scale = gamma[ci] * is;
            let mut s1 = E::zero();
            let mut s2 = E::zero();
            for ((dxv, &dv), &xv) in dx[base..base + plane]
                .iter_mut()
                .zip(&dy[base..base + plane])
                .zip(&x[base..base + plane])
            {
                *dxv = dv * scale;
                s1 += dv;
                s2 += dv * (xv - mu) * is;
            }
            dbeta[ci] += s1;
            dgamma[ci] += s2;
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn training_mode_normalizes_to_zero_mean_unit_var() {
        let (n, c, plane) = (4, 3, 16);
        let mut rng = Rng::new(2);
        let x: Vec<f64> = (0..n * c * plane)
            .map(|_| 1.5 + 2.0 * rng.normal_f64())
            .collect();
        let eps = 1e-5;
        let stats = bn_batch_stats(&x, n, c, plane, eps).unwrap();
        let y = bn_forward_train(
            &x,
            n,
            c,
            plane,
            &stats,
            &vec![1.0; c],
            &vec![0.0; c],
        );
        for ci in 0..c {
            let mut vals = Vec::new();
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                vals.extend_from_slice(&y[base..base + plane]);
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6, "channel mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "channel var {v}");
        }
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let (n, c, plane) = (2, 1, 8);
        let x = vec![0.73; n * c * plane];
        let stats = bn_batch_stats(&x, n, c, plane, 1e-5).unwrap();
        let y = bn_forward_train(&x, n, c, plane, &stats, &[1.0], &[0.0]);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_with_unit_running_stats_is_identity_at_zero_eps() {
        let (n, c, plane) = (1, 2, 9);
        let x: Vec<f64> = (0..n * c * plane).map(|i| i as f64 * 0.1 - 0.7).collect();
        let y = bn_forward_eval(
            &x,
            n,
            c,
            plane,
            &[0.0, 0.0],
            &[1.0, 1.0],
            &[1.0, 1.0],
            &[0.0, 0.0],
            0.0,
        );
        assert_eq!(x, y);
    }

    #[test]
    fn single_value_per_channel_is_degenerate() {
        let x = vec![1.0f64];
        let err = bn_batch_stats(&x, 1, 1, 1, 1e-5).unwrap_err();
        assert_eq!(err, TensorError::DegenerateStats { count: 1 });
    }
}
