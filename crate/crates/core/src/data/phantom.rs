//! Procedural paired-modality phantoms.
//!
//! Each image is a stack of rotated ellipses over a tissue-label map with
//! four classes. Source and target intensities are pure per-pixel
//! functions of the label (plus small, independently seeded noise), with
//! the fluid class dark in the source and bright in the target so the two
//! modalities carry genuinely different contrasts. Everything is a
//! deterministic function of (spec, index).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::data::{normalize, SlicePair};
use crate::error::{Result, TensorError};
use crate::rng::{Rng, STREAM_PHANTOM};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum TissueClass {
    Background = 0,
    Matter = 1,
    Fluid = 2,
    Lesion = 3,
}

/// Per-class intensity tables for both modalities, in [0, 1].
#[derive(Clone, Debug)]
pub struct ClassTable {
    pub source: [f64; 4],
    pub target: [f64; 4],
}

impl Default for ClassTable {
    fn default() -> Self {
        ClassTable {
            source: [0.05, 0.60, 0.25, 0.45],
            target: [0.05, 0.35, 0.90, 0.80],
        }
    }
}

#[derive(Clone, Debug)]
pub struct PhantomSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    /// Ellipses per image, inclusive bounds.
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub classes: ClassTable,
    pub noise_sigma: f64,
}

impl PhantomSpec {
    pub fn new(count: usize, size: usize, seed: u64) -> Self {
        PhantomSpec {
            count,
            size,
            seed,
            min_shapes: 2,
            max_shapes: 6,
            classes: ClassTable::default(),
            noise_sigma: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(TensorError::InvalidConfig {
                what: format!("phantom size must be at least 32, got {}", self.size),
            });
        }
        if self.count == 0 {
            return Err(TensorError::InvalidConfig {
                what: String::from("phantom count must be at least 1"),
            });
        }
        if self.min_shapes < 1 || self.max_shapes < self.min_shapes {
            return Err(TensorError::InvalidConfig {
                what: format!(
                    "shape count bounds [{}, {}] are invalid",
                    self.min_shapes, self.max_shapes
                ),
            });
        }
        Ok(())
    }

    /// Largest |noise| added to any class intensity (noise is clamped).
    pub fn noise_bound(&self) -> f64 {
        3.0 * self.noise_sigma
    }
}

/// One generated pair plus its ground-truth label map.
#[derive(Clone, Debug)]
pub struct PhantomImage {
    pub size: usize,
    pub labels: Vec<u8>,
    /// Source-modality intensities in [0, 1].
    pub source: Vec<f64>,
    /// Target-modality intensities in [0, 1].
    pub target: Vec<f64>,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
    class: TissueClass,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * self.cos_t + dy * self.sin_t;
        let v = -dx * self.sin_t + dy * self.cos_t;
        (u / self.a) * (u / self.a) + (v / self.b) * (v / self.b) <= 1.0
    }
}

fn clamp01(v: f64) -> f64 {
    v.max(0.0).min(1.0)
}

/// Clamped gaussian noise so every pixel stays within a hard band of its
/// class value.
fn clamped_noise(rng: &mut Rng, sigma: f64) -> f64 {
    let z = rng.normal_f64();
    sigma * z.max(-3.0).min(3.0)
}

/// Generate image `index` of the spec. Pure: same (spec, index) in, same
/// pixels out.
pub fn generate(spec: &PhantomSpec, index: usize) -> PhantomImage {
    let s = spec.size as f64;
    let base = Rng::new(spec.seed)
        .substream(STREAM_PHANTOM)
        .substream(index as u64);
    let mut geo = base.substream(1);
    let mut src_noise = base.substream(2);
    let mut tgt_noise = base.substream(3);

    let n_shapes = geo.range(spec.min_shapes, spec.max_shapes + 1);
    let mut shapes: Vec<Ellipse> = Vec::with_capacity(n_shapes);

    // A large head-like matter region first, then smaller structures.
    let theta = geo.uniform_f64() * core::f64::consts::PI;
    shapes.push(Ellipse {
        cy: s * (0.5 + 0.08 * (geo.uniform_f64() - 0.5)),
        cx: s * (0.5 + 0.08 * (geo.uniform_f64() - 0.5)),
        a: s * (0.32 + 0.10 * geo.uniform_f64()),
        b: s * (0.26 + 0.12 * geo.uniform_f64()),
        cos_t: Float::cos(theta),
        sin_t: Float::sin(theta),
        class: TissueClass::Matter,
    });
    for _ in 1..n_shapes {
        let class = match geo.below(10) {
            0..=4 => TissueClass::Fluid,
            5..=7 => TissueClass::Lesion,
            _ => TissueClass::Matter,
        };
        let theta = geo.uniform_f64() * core::f64::consts::PI;
        shapes.push(Ellipse {
            cy: s * (0.5 + 0.44 * (geo.uniform_f64() - 0.5)),
            cx: s * (0.5 + 0.44 * (geo.uniform_f64() - 0.5)),
            a: s * (0.05 + 0.13 * geo.uniform_f64()),
            b: s * (0.05 + 0.13 * geo.uniform_f64()),
            cos_t: Float::cos(theta),
            sin_t: Float::sin(theta),
            class,
        });
    }

    let n = spec.size * spec.size;
    let mut labels = vec![TissueClass::Background as u8; n];
    for shape in &shapes {
        for y in 0..spec.size {
            for x in 0..spec.size {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    labels[y * spec.size + x] = shape.class as u8;
                }
            }
        }
    }

    let mut source = vec![0.0f64; n];
    let mut target = vec![0.0f64; n];
    for i in 0..n {
        let label = labels[i] as usize;
        source[i] = clamp01(
            spec.classes.source[label] + clamped_noise(&mut src_noise, spec.noise_sigma),
        );
        target[i] = clamp01(
            spec.classes.target[label] + clamped_noise(&mut tgt_noise, spec.noise_sigma),
        );
    }

    PhantomImage {
        size: spec.size,
        labels,
        source,
        target,
    }
}

/// Canonical id of image `index` within a generated set.
pub fn image_id(index: usize) -> String {
    format!("phantom_{index:05}")
}

impl PhantomImage {
    /// Normalize to [−1, 1] and replicate the grayscale plane across
    /// `channels`.
    pub fn to_slice_pair<E: Scalar>(&self, index: usize, channels: usize) -> Result<SlicePair<E>> {
        let to_tensor = |plane: &[f64]| -> Result<Tensor<E>> {
            let gray: Vec<E> = plane.iter().map(|&v| E::from_f64(v)).collect();
            let norm = normalize(&gray)?;
            let mut data = Vec::with_capacity(channels * norm.len());
            for _ in 0..channels {
                data.extend_from_slice(&norm);
            }
            Tensor::from_vec(&[channels, self.size, self.size], data)
        };
        Ok(SlicePair {
            id: image_id(index),
            source: to_tensor(&self.source)?,
            target: to_tensor(&self.target)?,
        })
    }
}

/// Generate the whole spec as an in-memory dataset.
pub fn generate_dataset<E: Scalar>(
    spec: &PhantomSpec,
    channels: usize,
) -> Result<crate::data::PairedData<E>> {
    spec.validate()?;
    let pairs: Result<Vec<SlicePair<E>>> = (0..spec.count)
        .map(|i| generate(spec, i).to_slice_pair(i, channels))
        .collect();
    crate::data::PairedData::new(pairs?)
}
