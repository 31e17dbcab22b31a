//! Paired-slice data handling: intensity normalization, bilinear resize,
//! seeded batching and the procedural phantom generator. All of it is pure
//! buffer work; decoding and file layout live in the CLI crate.

pub mod batch;
pub mod phantom;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use batch::epoch_batches;
pub use phantom::{ClassTable, PhantomImage, PhantomSpec, TissueClass};

/// One aligned source/target pair in normalized [−1, 1] space, C×S×S.
#[derive(Clone, Debug)]
pub struct SlicePair<E: Scalar> {
    pub id: String,
    pub source: Tensor<E>,
    pub target: Tensor<E>,
}

/// A dataset materialized in memory, the form the trainers consume.
pub struct PairedData<E: Scalar> {
    pub pairs: Vec<SlicePair<E>>,
}

impl<E: Scalar> PairedData<E> {
    pub fn new(pairs: Vec<SlicePair<E>>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(TensorError::EmptyDataset);
        }
        let shape = pairs[0].source.shape().to_vec();
        for p in &pairs {
            if p.source.shape() != shape.as_slice() || p.target.shape() != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "paired_dataset",
                    lhs: shape,
                    rhs: p.source.shape().to_vec(),
                });
            }
        }
        Ok(PairedData { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stack the selected pairs into N×C×S×S source and target tensors.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<E>, Tensor<E>) {
        let shape = self.pairs[0].source.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let n = indices.len();
        let mut src = vec![E::zero(); n * c * h * w];
        let mut tgt = vec![E::zero(); n * c * h * w];
        let plane = c * h * w;
        for (row, &i) in indices.iter().enumerate() {
            src[row * plane..(row + 1) * plane].copy_from_slice(self.pairs[i].source.data());
            tgt[row * plane..(row + 1) * plane].copy_from_slice(self.pairs[i].target.data());
        }
        (
            Tensor::from_vec(&[n, c, h, w], src).expect("consistent shapes"),
            Tensor::from_vec(&[n, c, h, w], tgt).expect("consistent shapes"),
        )
    }

    /// Stack only the source (or target) images for one domain.
    pub fn gather_domain(&self, indices: &[usize], target_domain: bool) -> Tensor<E> {
        let (s, t) = self.gather(indices);
        if target_domain {
            t
        } else {
            s
        }
    }
}

/// [0, 1] intensities to [−1, 1]: (x − 0.5) / 0.5.
pub fn normalize<E: Scalar>(img: &[E]) -> Result<Vec<E>> {
    let half = E::from_f64(0.5);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in img {
        let v = v.as_f64();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !img.is_empty() && (lo < 0.0 || hi > 1.0) {
        return Err(TensorError::OutOfRange {
            op: "normalize",
            min: lo,
            max: hi,
        });
    }
    Ok(img.iter().map(|&v| (v - half) / half).collect())
}

/// Bilinear resize with half-pixel centers. Output values are convex
/// combinations of inputs, so the source range is never exceeded.
pub fn resize_bilinear<E: Scalar>(
    src: &[E],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<E> {
    debug_assert_eq!(src.len(), h * w);
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let mut out = vec![E::zero(); out_h * out_w];
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).max(0.0);
        let y0 = (sy as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = E::from_f64(sy - y0 as f64);
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).max(0.0);
            let x0 = (sx as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = E::from_f64(sx - x0 as f64);
            let one = E::one();
            let v00 = src[y0 * w + x0];
            let v01 = src[y0 * w + x1];
            let v10 = src[y1 * w + x0];
            let v11 = src[y1 * w + x1];
            let top = v00 * (one - fx) + v01 * fx;
            let bottom = v10 * (one - fx) + v11 * fx;
            out[oy * out_w + ox] = top * (one - fy) + bottom * fy;
        }
    }
    out
}
