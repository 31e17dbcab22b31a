//! Image quality metrics over denormalized [0, 1] images, evaluation of a
//! trained bundle on a paired test set, and report rendering.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::data::SlicePair;
use crate::error::{Result, TensorError};
use crate::nn::bundle::ModelBundle;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to MSE inside PSNR so identical images report the 100 dB
/// cap instead of infinity.
pub const PSNR_MSE_FLOOR: f64 = 1e-10;

/// [−1, 1] to [0, 1]: x/2 + 1/2, clamped.
pub fn denormalize<E: Scalar>(img: &[E]) -> Vec<E> {
    let half = E::from_f64(0.5);
    img.iter()
        .map(|&v| {
            let y = v * half + half;
            y.max(E::zero()).min(E::one())
        })
        .collect()
}

/// Average the channel planes of a C×H×W tensor into one f64 image.
pub fn channel_mean<E: Scalar>(data: &[E], channels: usize, plane: usize) -> Vec<f64> {
    debug_assert_eq!(data.len(), channels * plane);
    let inv_c = 1.0 / channels as f64;
    let mut out = vec![0.0f64; plane];
    for c in 0..channels {
        for (o, &v) in out.iter_mut().zip(&data[c * plane..(c + 1) * plane]) {
            *o += v.as_f64();
        }
    }
    for o in out.iter_mut() {
        *o *= inv_c;
    }
    out
}

pub fn metric_mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TensorError::DataLength {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc / a.len() as f64)
}

pub fn metric_psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    let m = mse.max(PSNR_MSE_FLOOR);
    10.0 * Float::log10(max_val * max_val / m)
}

pub fn metric_psnr(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    Ok(metric_psnr_from_mse(metric_mse(a, b)?, max_val))
}

/// Windowed structural similarity parameters.
#[derive(Clone, Debug)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        let v = self.k1 * self.data_range;
        v * v
    }

    pub fn c2(&self) -> f64 {
        let v = self.k2 * self.data_range;
        v * v
    }

    /// Normalized 1D gaussian taps.
    pub fn window_taps(&self) -> Vec<f64> {
        let half = (self.window / 2) as f64;
        let mut taps: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - half;
                Float::exp(-(d * d) / (2.0 * self.sigma * self.sigma))
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        for t in taps.iter_mut() {
            *t /= sum;
        }
        taps
    }
}

/// Valid-mode separable correlation with the window taps.
fn window_filter(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut horiz = vec![0.0f64; h * ow];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        let dst = &mut horiz[y * ow..(y + 1) * ow];
        for (x, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (t, &tap) in taps.iter().enumerate() {
                acc += tap * row[x + t];
            }
            *d = acc;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &tap) in taps.iter().enumerate() {
                acc += tap * horiz[(y + t) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean SSIM over all fully-valid window positions of two single-channel
/// images.
pub fn metric_ssim(a: &[f64], b: &[f64], h: usize, w: usize, params: &SsimParams) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(TensorError::DataLength {
            expected: h * w,
            got: a.len().min(b.len()),
        });
    }
    if h < params.window || w < params.window {
        return Err(TensorError::ConvGeometry {
            op: "metric_ssim",
            input: h.min(w),
            kernel: params.window,
            stride: 1,
            padding: 0,
        });
    }
    let taps = params.window_taps();
    let aa: Vec<f64> = a.iter().map(|&v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|&v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();

    let mu_a = window_filter(a, h, w, &taps);
    let mu_b = window_filter(b, h, w, &taps);
    let e_aa = window_filter(&aa, h, w, &taps);
    let e_bb = window_filter(&bb, h, w, &taps);
    let e_ab = window_filter(&ab, h, w, &taps);

    let (c1, c2) = (params.c1(), params.c2());
    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        acc += num / den;
    }
    Ok(acc / mu_a.len() as f64)
}

/// Per-image metric triple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Aggregated evaluation of one model over a test set: per-image metrics
/// averaged across images.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub n_images: usize,
    pub image_size: usize,
    pub seed: u64,
    pub mse_mean: f64,
    pub psnr_mean_db: f64,
    pub ssim_mean: f64,
    pub per_image: Vec<ImageMetrics>,
}

/// Evaluate an arbitrary source→target map over paired slices. `synth`
/// receives a 1×C×S×S source batch and must return a same-shape
/// prediction in [−1, 1].
pub fn evaluate_with<E, F>(
    model: &str,
    image_size: usize,
    seed: u64,
    pairs: &[SlicePair<E>],
    params: &SsimParams,
    mut synth: F,
) -> Result<MetricsReport>
where
    E: Scalar,
    F: FnMut(&Tensor<E>) -> Result<Tensor<E>>,
{
    if pairs.is_empty() {
        return Err(TensorError::EmptyDataset);
    }
    let mut per_image = Vec::with_capacity(pairs.len());
    let (mut mse_sum, mut psnr_sum, mut ssim_sum) = (0.0f64, 0.0f64, 0.0f64);
    for pair in pairs {
        let shape = pair.source.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if h != image_size || w != image_size {
            return Err(TensorError::ShapeMismatch {
                op: "evaluate",
                lhs: vec![image_size, image_size],
                rhs: vec![h, w],
            });
        }
        let batched =
            Tensor::from_vec(&[1, c, h, w], pair.source.data().to_vec()).expect("shape");
        let pred = synth(&batched)?;
        let pred_img = channel_mean(&denormalize(pred.data()), c, h * w);
        let tgt_img = channel_mean(&denormalize(pair.target.data()), c, h * w);
        let mse = metric_mse(&pred_img, &tgt_img)?;
        let psnr = metric_psnr_from_mse(mse, params.data_range);
        let ssim = metric_ssim(&pred_img, &tgt_img, h, w, params)?;
        per_image.push(ImageMetrics {
            mse,
            psnr_db: psnr,
            ssim,
        });
        mse_sum += mse;
        psnr_sum += psnr;
        ssim_sum += ssim;
    }
    let n = pairs.len() as f64;
    Ok(MetricsReport {
        model: String::from(model),
        n_images: pairs.len(),
        image_size,
        seed,
        mse_mean: mse_sum / n,
        psnr_mean_db: psnr_sum / n,
        ssim_mean: ssim_sum / n,
        per_image,
    })
}

/// Evaluate a trained bundle in eval mode (the VAE decodes from μ, so two
/// evaluations of one checkpoint produce identical reports).
pub fn evaluate<E: Scalar>(
    bundle: &mut ModelBundle<E>,
    pairs: &[SlicePair<E>],
    params: &SsimParams,
) -> Result<MetricsReport> {
    let name = bundle.kind().display_name();
    let size = bundle.cfg.image_size;
    let seed = bundle.cfg.seed;
    evaluate_with(name, size, seed, pairs, params, |src| bundle.generate(src))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

pub const CSV_HEADER: &str = "model,n_images,image_size,seed,mse,psnr_db,ssim";

/// Render reports in input order. CSV keeps full precision; markdown
/// rounds to the table precision (MSE 4, PSNR 2, SSIM 2 decimals).
pub fn render_reports(reports: &[MetricsReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from(CSV_HEADER);
            out.push('\n');
            for r in reports {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.model, r.n_images, r.image_size, r.seed, r.mse_mean, r.psnr_mean_db,
                    r.ssim_mean
                ));
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::from("| Model | MSE ↓ | PSNR (dB) ↑ | SSIM ↑ |\n");
            out.push_str("| --- | --- | --- | --- |\n");
            for r in reports {
                out.push_str(&format!(
                    "| {} | {:.4} | {:.2} | {:.2} |\n",
                    r.model, r.mse_mean, r.psnr_mean_db, r.ssim_mean
                ));
            }
            out
        }
    }
}

/// Parse a CSV produced by [`render_reports`]. Per-image detail is not
/// part of the wire format and comes back empty.
pub fn parse_reports_csv(text: &str) -> Result<Vec<MetricsReport>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == CSV_HEADER => {}
        other => {
            return Err(TensorError::InvalidConfig {
                what: format!(
                    "row 1: expected header '{CSV_HEADER}', got '{}'",
                    other.map(|(_, l)| l).unwrap_or("")
                ),
            })
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let row = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(TensorError::InvalidConfig {
                what: format!("row {row}: expected 7 fields, got {}", fields.len()),
            });
        }
        let parse_usize = |s: &str, what: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| TensorError::InvalidConfig {
                what: format!("row {row}: bad {what} '{s}'"),
            })
        };
        let parse_f64 = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| TensorError::InvalidConfig {
                what: format!("row {row}: bad {what} '{s}'"),
            })
        };
        out.push(MetricsReport {
            model: fields[0].trim().to_string(),
            n_images: parse_usize(fields[1], "n_images")?,
            image_size: parse_usize(fields[2], "image_size")?,
            seed: fields[3].trim().parse().map_err(|_| TensorError::InvalidConfig {
                what: format!("row {row}: bad seed '{}'", fields[3]),
            })?,
            mse_mean: parse_f64(fields[4], "mse")?,
            psnr_mean_db: parse_f64(fields[5], "psnr_db")?,
            ssim_mean: parse_f64(fields[6], "ssim")?,
            per_image: Vec::new(),
        });
    }
    if out.is_empty() {
        return Err(TensorError::EmptyDataset);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct per-window SSIM, the independent reference.
    fn ssim_naive(a: &[f64], b: &[f64], h: usize, w: usize, p: &SsimParams) -> f64 {
        let taps = p.window_taps();
        let k = p.window;
        let (c1, c2) = (p.c1(), p.c2());
        let mut acc = 0.0;
        let mut count = 0usize;
        for wy in 0..=(h - k) {
            for wx in 0..=(w - k) {
                let (mut ma, mut mb) = (0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let wgt = taps[dy] * taps[dx];
                        ma += wgt * a[(wy + dy) * w + wx + dx];
                        mb += wgt * b[(wy + dy) * w + wx + dx];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let wgt = taps[dy] * taps[dx];
                        let av = a[(wy + dy) * w + wx + dx];
                        let bv = b[(wy + dy) * w + wx + dx];
                        va += wgt * av * av;
                        vb += wgt * bv * bv;
                        cov += wgt * av * bv;
                    }
                }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn denormalize_endpoints() {
        assert_eq!(denormalize(&[-1.0f64, 0.0, 1.0]), vec![0.0, 0.5, 1.0]);
        // Out-of-range values clamp.
        assert_eq!(denormalize(&[-1.5f64, 1.5]), vec![0.0, 1.0]);
    }

    #[test]
    fn mse_basics() {
        assert_eq!(metric_mse(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(metric_mse(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        let mut rng = Rng::new(2);
        let a: Vec<f64> = (0..64).map(|_| rng.uniform_f64()).collect();
        let b: Vec<f64> = (0..64).map(|_| rng.uniform_f64()).collect();
        let direct = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 64.0;
        assert!((metric_mse(&a, &b).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn psnr_formula_and_cap() {
        assert!((metric_psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-9);
        assert!((metric_psnr_from_mse(0.0, 1.0) - 100.0).abs() < 1e-9);
        // 22.33 dB from the pooled formula at MSE 0.005846.
        assert!((metric_psnr_from_mse(0.005846, 1.0) - 22.331_411_889_785_823).abs() < 1e-9);
    }

    #[test]
    fn psnr_is_strictly_monotone_in_mse() {
        let mut prev = f64::INFINITY;
        for i in 1..50 {
            let mse = i as f64 * 1e-3;
            let p = metric_psnr_from_mse(mse, 1.0);
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn ssim_self_similarity_is_exactly_one() {
        let mut rng = Rng::new(3);
        let img: Vec<f64> = (0..32 * 32).map(|_| rng.uniform_f64()).collect();
        let s = metric_ssim(&img, &img, 32, 32, &SsimParams::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_naive_oracle() {
        let mut rng = Rng::new(4);
        let p = SsimParams::default();
        for _ in 0..5 {
            let a: Vec<f64> = (0..24 * 24).map(|_| rng.uniform_f64()).collect();
            let b: Vec<f64> = (0..24 * 24)
                .map(|i| (a[i] * 0.7 + 0.3 * rng.uniform_f64()).min(1.0))
                .collect();
            let fast = metric_ssim(&a, &b, 24, 24, &p).unwrap();
            let slow = ssim_naive(&a, &b, 24, 24, &p);
            assert!((fast - slow).abs() < 1e-6, "fast {fast} vs naive {slow}");
        }
    }

    #[test]
    fn independent_noise_scores_near_zero() {
        let p = SsimParams::default();
        for seed in 0..5 {
            let mut rng = Rng::new(100 + seed);
            let a: Vec<f64> = (0..64 * 64).map(|_| rng.uniform_f64()).collect();
            let b: Vec<f64> = (0..64 * 64).map(|_| rng.uniform_f64()).collect();
            let s = metric_ssim(&a, &b, 64, 64, &p).unwrap();
            assert!(s.abs() < 0.1, "seed {seed}: ssim {s}");
        }
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let p = SsimParams::default();
        let mut rng = Rng::new(9);
        for _ in 0..10 {
            let a: Vec<f64> = (0..16 * 16).map(|_| rng.uniform_f64()).collect();
            let b: Vec<f64> = (0..16 * 16).map(|_| rng.uniform_f64()).collect();
            let ab = metric_ssim(&a, &b, 16, 16, &p).unwrap();
            let ba = metric_ssim(&b, &a, 16, 16, &p).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn image_smaller_than_window_errors() {
        let p = SsimParams::default();
        let img = vec![0.5; 64];
        assert!(metric_ssim(&img, &img, 8, 8, &p).is_err());
    }

    #[test]
    fn markdown_render_matches_published_rows() {
        let mk = |model: &str, mse: f64, psnr: f64, ssim: f64| MetricsReport {
            model: String::from(model),
            n_images: 2000,
            image_size: 256,
            seed: 0,
            mse_mean: mse,
            psnr_mean_db: psnr,
            ssim_mean: ssim,
            per_image: Vec::new(),
        };
        let reports = vec![
            mk("Pix2Pix GAN", 0.0058, 29.55, 0.87),
            mk("CycleGAN", 0.0069, 32.28, 0.90),
            mk("VAE", 0.0069, 24.95, 0.67),
        ];
        let md = render_reports(&reports, ReportFormat::Markdown);
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines[0], "| Model | MSE ↓ | PSNR (dB) ↑ | SSIM ↑ |");
        assert_eq!(lines[2], "| Pix2Pix GAN | 0.0058 | 29.55 | 0.87 |");
        assert_eq!(lines[3], "| CycleGAN | 0.0069 | 32.28 | 0.90 |");
        assert_eq!(lines[4], "| VAE | 0.0069 | 24.95 | 0.67 |");
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let report = MetricsReport {
            model: String::from("Pix2Pix GAN"),
            n_images: 50,
            image_size: 64,
            seed: 7,
            mse_mean: 0.004_271_839_422_11,
            psnr_mean_db: 23.694_210_481_3,
            ssim_mean: 0.812_345_678_9,
            per_image: Vec::new(),
        };
        let csv = render_reports(core::slice::from_ref(&report), ReportFormat::Csv);
        let parsed = parse_reports_csv(&csv).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0], report);
    }

    #[test]
    fn malformed_csv_reports_row_number() {
        let text = format!("{CSV_HEADER}\na,b\n");
        let err = parse_reports_csv(&text).unwrap_err();
        match err {
            TensorError::InvalidConfig { what } => assert!(what.contains("row 2"), "{what}"),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
