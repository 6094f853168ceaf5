//! Image-quality metrics (PSNR, SSIM) and evaluation reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazegen::ScenePair;
use crate::tensor::Tensor;
use crate::Real;

/// Reported PSNR for identical images (zero MSE); also the overall cap.
pub const PSNR_CAP: Real = 99.0;

const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: Real = 1.5;

/// Peak signal-to-noise ratio in dB: 10·log10(range² / MSE), clamped to
/// [0, 99]. Identical images report the cap.
pub fn psnr(a: &Tensor, b: &Tensor, data_range: Real) -> Result<Real> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(
            "psnr",
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    if data_range <= 0.0 {
        return Err(Error::contract("psnr", format!("data_range must be > 0, got {data_range}")));
    }
    let mse: Real = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<Real>()
        / a.numel() as Real;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).clamp(0.0, PSNR_CAP))
}

fn gaussian_window() -> Vec<Real> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for i in -half..=half {
        for j in -half..=half {
            let d2 = (i * i + j * j) as Real;
            w.push((-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: Real = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Structural similarity with a 7x7 Gaussian window (sigma = 1.5),
/// C1 = (0.01·range)², C2 = (0.03·range)². Windows are evaluated fully
/// inside the image (no padding), per channel, then averaged.
pub fn ssim(a: &Tensor, b: &Tensor, data_range: Real) -> Result<Real> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(
            "ssim",
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    if data_range <= 0.0 {
        return Err(Error::contract("ssim", format!("data_range must be > 0, got {data_range}")));
    }
    let shape = a.shape();
    if shape.len() != 3 {
        return Err(Error::dimension("ssim", format!("expected [c,h,w], got {:?}", shape)));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let win = gaussian_window();
    let c1 = (0.01 * data_range) * (0.01 * data_range);
    let c2 = (0.03 * data_range) * (0.03 * data_range);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let xa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let xb = &b.data()[ch * h * w..(ch + 1) * h * w];
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let (mut mu_a, mut mu_b) = (0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = win[dy * SSIM_WINDOW + dx];
                        mu_a += wgt * xa[(y0 + dy) * w + x0 + dx];
                        mu_b += wgt * xb[(y0 + dy) * w + x0 + dx];
                    }
                }
                let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = win[dy * SSIM_WINDOW + dx];
                        let da = xa[(y0 + dy) * w + x0 + dx] - mu_a;
                        let db = xb[(y0 + dy) * w + x0 + dx] - mu_b;
                        var_a += wgt * da * da;
                        var_b += wgt * db * db;
                        cov += wgt * da * db;
                    }
                }
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as Real)
}

/// Mean absolute difference, the training-loss metric.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Real> {
    a.mean_abs_diff(b)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerImageMetrics {
    pub image_id: u32,
    pub psnr: Real,
    pub ssim: Real,
    pub l1: Real,
}

/// Evaluation summary over a test set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub seed: u64,
    pub n_images: usize,
    pub mean_psnr: Real,
    pub mean_ssim: Real,
    pub mean_l1: Real,
    pub median_psnr: Real,
    pub median_ssim: Real,
    pub per_image: Vec<PerImageMetrics>,
}

/// Median of a finite sample; the mean of the two middle values for even
/// counts. Used wherever orderings are taken over per-seed medians.
pub fn median(mut vals: Vec<Real>) -> Real {
    vals.sort_by(|a, b| a.partial_cmp(b).expect("metric values are finite"));
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

/// Score a restoration function over scene pairs: for each pair the function
/// maps the hazy image to a restored image, which is clamped to [0,1] and
/// compared against the clean image. Images are processed and reported in
/// input order.
pub fn evaluate_with(
    restore: &mut dyn FnMut(&ScenePair) -> Result<Tensor>,
    pairs: &[ScenePair],
    config_hash: &str,
    seed: u64,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::contract("evaluate_with", "empty test set"));
    }
    let mut per_image = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let raw = restore(pair)?;
        if raw.shape() != pair.clean.shape() {
            return Err(Error::dimension(
                "evaluate_with",
                format!(
                    "restored image {:?} does not match clean image {:?}",
                    raw.shape(),
                    pair.clean.shape()
                ),
            ));
        }
        let restored = raw.map(|v| v.clamp(0.0, 1.0));
        per_image.push(PerImageMetrics {
            image_id: pair.image_id,
            psnr: psnr(&restored, &pair.clean, 1.0)?,
            ssim: ssim(&restored, &pair.clean, 1.0)?,
            l1: l1(&restored, &pair.clean)?,
        });
    }
    let n = per_image.len();
    let mean = |f: &dyn Fn(&PerImageMetrics) -> Real| -> Real {
        per_image.iter().map(|m| f(m)).sum::<Real>() / n as Real
    };
    Ok(MetricReport {
        config_hash: config_hash.to_string(),
        seed,
        n_images: n,
        mean_psnr: mean(&|m| m.psnr),
        mean_ssim: mean(&|m| m.ssim),
        mean_l1: mean(&|m| m.l1),
        median_psnr: median(per_image.iter().map(|m| m.psnr).collect()),
        median_ssim: median(per_image.iter().map(|m| m.ssim).collect()),
        per_image,
    })
}

/// The no-op reference: score the hazy inputs themselves.
pub fn identity_baseline(pairs: &[ScenePair], config_hash: &str, seed: u64) -> Result<MetricReport> {
    evaluate_with(&mut |p| Ok(p.hazy.clone()), pairs, config_hash, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hazegen::{make_scene_pair, HazeRanges};
    use crate::tensor::Rng;

    #[test]
    fn psnr_hand_values_and_cap() {
        let a = Tensor::zeros(&[3, 8, 8]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
        // Uniform squared error of 0.01: every pixel differs by 0.1.
        let b = Tensor::full(&[3, 8, 8], 0.1);
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "{p}");
        // MSE 0.0025 -> 26.0206 dB.
        let c = Tensor::full(&[3, 8, 8], 0.05);
        let p = psnr(&a, &c, 1.0).unwrap();
        assert!((p - 26.0206).abs() < 1e-3, "{p}");
    }

    #[test]
    fn psnr_is_strictly_decreasing_in_mse() {
        let a = Tensor::zeros(&[3, 8, 8]);
        let mut prev = Real::INFINITY;
        for k in 1..=6 {
            let b = Tensor::full(&[3, 8, 8], 0.05 * k as Real);
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_range() {
        let mut rng = Rng::new(3);
        let a = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
        let ab = ssim(&a, &b, 1.0).unwrap();
        let ba = ssim(&b, &a, 1.0).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn ssim_constant_offset_matches_the_closed_form() {
        // Flat images: variances and covariance vanish in every window, so
        // SSIM reduces to the luminance term (2 μa μb + C1)/(μa² + μb² + C1).
        let a = Tensor::full(&[1, 8, 8], 0.25);
        let b = Tensor::full(&[1, 8, 8], 0.75);
        let c1 = 0.01 * 0.01;
        let expected = (2.0 * 0.25 * 0.75 + c1) / (0.25 * 0.25 + 0.75 * 0.75 + c1);
        let got = ssim(&a, &b, 1.0).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn ssim_rejects_images_smaller_than_the_window() {
        let a = Tensor::zeros(&[1, 6, 6]);
        assert!(ssim(&a, &a, 1.0).is_err());
    }

    #[test]
    fn metrics_are_invariant_to_identical_permutations() {
        let mut rng = Rng::new(5);
        let a = Tensor::rand_uniform(&[3, 12, 12], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[3, 12, 12], 0.0, 1.0, &mut rng);
        // Flip both images horizontally: per-window statistics are mirrored
        // but the means over all windows are unchanged.
        let flip = |t: &Tensor| -> Tensor {
            let (c, h, w) = (3, 12, 12);
            let mut out = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[ch * h * w + y * w + x] = t.data()[ch * h * w + y * w + (w - 1 - x)];
                    }
                }
            }
            Tensor::from_vec(&[c, h, w], out).unwrap()
        };
        let p1 = psnr(&a, &b, 1.0).unwrap();
        let p2 = psnr(&flip(&a), &flip(&b), 1.0).unwrap();
        assert!((p1 - p2).abs() < 1e-9);
        let s1 = ssim(&a, &b, 1.0).unwrap();
        let s2 = ssim(&flip(&a), &flip(&b), 1.0).unwrap();
        assert!((s1 - s2).abs() < 1e-9);
    }

    #[test]
    fn identity_baseline_scores_the_raw_hazy_images() {
        let pairs: Vec<_> = (0..4)
            .map(|i| make_scene_pair(i, 32, &HazeRanges::default(), 7).unwrap())
            .collect();
        let report = identity_baseline(&pairs, "hash", 1).unwrap();
        assert_eq!(report.n_images, 4);
        for (m, p) in report.per_image.iter().zip(&pairs) {
            assert_eq!(m.image_id, p.image_id);
            assert_eq!(m.psnr, psnr(&p.hazy, &p.clean, 1.0).unwrap());
            assert_eq!(m.ssim, ssim(&p.hazy, &p.clean, 1.0).unwrap());
        }
        // Substantial haze: the no-op baseline stays clearly below the cap.
        assert!(report.mean_psnr < 30.0);
        // JSON round-trip for the report schema.
        let text = serde_json::to_string(&report).unwrap();
        let back: MetricReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.mean_psnr, report.mean_psnr);
        assert_eq!(back.per_image.len(), 4);
    }

    #[test]
    fn median_handles_even_and_odd_counts() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
