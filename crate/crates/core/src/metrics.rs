//! Image quality metrics.

use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};

/// Returned for identical images, where the MSE is zero.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn check_same_size(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Dimension(format!(
            "images are {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(pred: &RgbImage, truth: &RgbImage) -> Result<f64> {
    check_same_size(pred, truth)?;
    let n = pred.as_slice().len() as f64;
    Ok(pred
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10·log₁₀(1/MSE)` over all channels with peak 1, capped at 100 dB.
pub fn psnr(pred: &RgbImage, truth: &RgbImage) -> Result<f64> {
    let m = mse(pred, truth)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region only.
fn filter_valid(data: &[f64], width: usize, height: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let ow = width + 1 - SSIM_WINDOW;
    let oh = height + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * height];
    for r in 0..height {
        let row = &data[r * width..(r + 1) * width];
        for c in 0..ow {
            tmp[r * ow + c] = k.iter().zip(&row[c..c + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = k.iter().enumerate().map(|(i, w)| w * tmp[(r + i) * ow + c]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean luminance term and mean contrast-structure term of single-scale SSIM.
fn ssim_terms(a: &GrayImage, b: &GrayImage) -> (f64, f64) {
    let (w, h) = (a.width(), a.height());
    let k = gaussian_kernel();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, ow, oh) = filter_valid(a.as_slice(), w, h, &k);
    let (mu_b, _, _) = filter_valid(b.as_slice(), w, h, &k);
    let (aa, _, _) = filter_valid(&prod(a.as_slice(), a.as_slice()), w, h, &k);
    let (bb, _, _) = filter_valid(&prod(b.as_slice(), b.as_slice()), w, h, &k);
    let (ab, _, _) = filter_valid(&prod(a.as_slice(), b.as_slice()), w, h, &k);
    let mut lum_cs = 0.0;
    let mut cs = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let l = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
        let c = (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2);
        cs += c;
        lum_cs += l * c;
    }
    let n = (ow * oh) as f64;
    (lum_cs / n, cs / n)
}

/// Number of scales usable for a `width × height` image: each scale halves
/// the image and must still fit the 11-pixel window; at most 5.
pub fn ms_ssim_scales(width: usize, height: usize) -> usize {
    let mut m = width.min(height);
    let mut s = 0;
    while s < MS_SSIM_WEIGHTS.len() && m >= SSIM_WINDOW {
        s += 1;
        m /= 2;
    }
    s
}

/// Multi-scale SSIM on the luma of both images.
///
/// Windows cover the valid region only. Images too small for five scales
/// use the leading exponents renormalized to sum to one. Negative mean
/// terms are clamped to zero before exponentiation.
pub fn ms_ssim(pred: &RgbImage, truth: &RgbImage) -> Result<f64> {
    check_same_size(pred, truth)?;
    let scales = ms_ssim_scales(pred.width(), pred.height());
    if scales == 0 {
        return Err(Error::Dimension(format!(
            "image {}x{} is smaller than the {SSIM_WINDOW}-pixel window",
            pred.width(),
            pred.height()
        )));
    }
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let mut a = pred.grayscale();
    let mut b = truth.grayscale();
    let mut score = 1.0;
    for (s, w) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
        let (lum_cs, cs) = ssim_terms(&a, &b);
        let exponent = w / total;
        if s + 1 == scales {
            score *= lum_cs.max(0.0).powf(exponent);
        } else {
            score *= cs.max(0.0).powf(exponent);
            a = a.downsample()?;
            b = b.downsample()?;
        }
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn textured(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |c, r| {
            let base = 0.5 + 0.3 * ((c as f64) * 0.4).sin() * ((r as f64) * 0.25).cos();
            [base, rng.random::<f64>() * 0.2 + base * 0.5, 1.0 - base]
        })
        .unwrap()
    }

    #[test]
    fn psnr_formula() {
        let a = textured(8, 8, 0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let zero = RgbImage::from_fn(4, 4, |_, _| [0.0; 3]).unwrap();
        let tenth = RgbImage::from_fn(4, 4, |_, _| [0.1; 3]).unwrap();
        assert!((psnr(&tenth, &zero).unwrap() - 20.0).abs() < 1e-9);
        let half = RgbImage::from_fn(4, 4, |_, _| [0.5; 3]).unwrap();
        assert!((psnr(&half, &zero).unwrap() - 6.020599913279624).abs() < 1e-12);
        assert!(psnr(&a, &zero).is_err());
    }

    #[test]
    fn ms_ssim_identity_and_symmetry() {
        let a = textured(64, 48, 1);
        let b = textured(64, 48, 2);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let ab = ms_ssim(&a, &b).unwrap();
        let ba = ms_ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() <= 1e-12);
        assert!((0.0..1.0).contains(&ab));
    }

    #[test]
    fn ms_ssim_prefers_light_noise_to_flat_mean() {
        let truth = textured(96, 96, 3);
        let mean: [f64; 3] = {
            let mut m = [0.0; 3];
            for i in 0..truth.pixel_count() {
                let p = truth.pixel_at(i);
                for c in 0..3 {
                    m[c] += p[c] / truth.pixel_count() as f64;
                }
            }
            m
        };
        let flat = RgbImage::from_fn(96, 96, |_, _| mean).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let noisy = RgbImage::from_vec(
            96,
            96,
            truth.as_slice().iter().map(|v| v + noise.sample(&mut rng)).collect(),
        )
        .unwrap();
        let s_flat = ms_ssim(&flat, &truth).unwrap();
        let s_noisy = ms_ssim(&noisy, &truth).unwrap();
        assert!(s_flat < 1.0 && s_flat < s_noisy, "{s_flat} vs {s_noisy}");
    }

    #[test]
    fn scale_count() {
        assert_eq!(ms_ssim_scales(176, 200), 5);
        assert_eq!(ms_ssim_scales(64, 64), 3);
        assert_eq!(ms_ssim_scales(11, 11), 1);
        assert_eq!(ms_ssim_scales(10, 64), 0);
        let tiny = RgbImage::from_fn(8, 8, |_, _| [0.0; 3]).unwrap();
        assert!(ms_ssim(&tiny, &tiny).is_err());
    }
}
