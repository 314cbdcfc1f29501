//! Image quality metrics: PSNR, SSIM, RMSE.
//!
//! Inputs are (1,3,H,W) tensors in [0,1]. PSNR uses MAX = 1 and caps at
//! 100 dB for identical images; RMSE is reported on the 0-255 scale;
//! SSIM is the single-scale variant with an 11x11 Gaussian window
//! (sigma 1.5), K1 = 0.01, K2 = 0.03, computed per channel on valid
//! windows and averaged.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub rmse: f64,
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b, "shape")?;
    let n = a.numel() as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / n)
}

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

/// Root mean squared error on the 0-255 scale.
pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((mse(a, b)? * 255.0 * 255.0).sqrt())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable Gaussian filter, valid windows only: (H,W) -> (H-10, W-10).
fn blur_valid(img: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * img[y * w + x + k];
            }
            rows[y * ow + x] = acc;
        }
    }
    let oh = h - SSIM_WINDOW + 1;
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b, "shape")?;
    let [n, c, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(
            "spatial",
            format!("ssim needs at least {0}x{0} pixels, got {h}x{w}", SSIM_WINDOW),
        ));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let hw = h * w;
    let mut total = 0.0;
    let mut planes = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            let pa: Vec<f64> = a.data()[off..off + hw].iter().map(|&v| v as f64).collect();
            let pb: Vec<f64> = b.data()[off..off + hw].iter().map(|&v| v as f64).collect();
            let mu_a = blur_valid(&pa, h, w, &win);
            let mu_b = blur_valid(&pb, h, w, &win);
            let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
            let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
            let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
            let mu_aa = blur_valid(&aa, h, w, &win);
            let mu_bb = blur_valid(&bb, h, w, &win);
            let mu_ab = blur_valid(&ab, h, w, &win);
            let mut acc = 0.0;
            for i in 0..mu_a.len() {
                let va = mu_aa[i] - mu_a[i] * mu_a[i];
                let vb = mu_bb[i] - mu_b[i] * mu_b[i];
                let cov = mu_ab[i] - mu_a[i] * mu_b[i];
                let num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
                let den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
                acc += num / den;
            }
            total += acc / mu_a.len() as f64;
            planes += 1;
        }
    }
    Ok(total / planes as f64)
}

pub fn report(a: &Tensor, b: &Tensor) -> Result<MetricReport> {
    Ok(MetricReport { psnr_db: psnr(a, b)?, ssim: ssim(a, b)?, rmse: rmse(a, b)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn pair(h: usize, w: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = Rng::seed_from(seed);
        let a = Tensor::rand_uniform([1, 3, h, w], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform([1, 3, h, w], 0.0, 1.0, &mut rng);
        (a, b)
    }

    #[test]
    fn psnr_of_identical_is_capped() {
        let (a, _) = pair(12, 12, 1);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn psnr_of_constant_offsets() {
        // Zero base keeps the f32 difference to a single rounding.
        let a = Tensor::zeros([1, 3, 8, 8]);
        let b = Tensor::full([1, 3, 8, 8], 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);
        let c = Tensor::full([1, 3, 8, 8], 1.0 / 255.0);
        let expect = 20.0 * 255.0f64.log10();
        assert!((psnr(&a, &c).unwrap() - expect).abs() < 1e-3);
        assert!((expect - 48.1308).abs() < 1e-3);
    }

    #[test]
    fn rmse_values() {
        let (a, _) = pair(8, 8, 2);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let zero = Tensor::zeros([1, 3, 8, 8]);
        let b = Tensor::full([1, 3, 8, 8], 1.0 / 255.0);
        assert!((rmse(&zero, &b).unwrap() - 1.0).abs() < 1e-6);
        let c = Tensor::full([1, 3, 8, 8], 0.1);
        assert!((rmse(&zero, &c).unwrap() - 25.5).abs() < 1e-4);
    }

    #[test]
    fn ssim_identical_is_one() {
        let (a, _) = pair(16, 16, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_flat_black_vs_white() {
        // Constant planes: variance terms vanish, luminance term remains.
        let a = Tensor::full([1, 3, 12, 12], 1.0);
        let b = Tensor::full([1, 3, 12, 12], 0.0);
        let c1 = 0.0001;
        let expect = c1 / (1.0 + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::zeros([1, 3, 10, 16]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn metrics_are_symmetric() {
        for seed in 0..5 {
            let (a, b) = pair(14, 18, 100 + seed);
            assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() < 1e-12);
            assert!((rmse(&a, &b).unwrap() - rmse(&b, &a).unwrap()).abs() < 1e-12);
            assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn rmse_and_psnr_are_linked_through_mse() {
        for seed in 0..10 {
            let (a, b) = pair(9, 9, 200 + seed);
            let p = psnr(&a, &b).unwrap();
            let r = rmse(&a, &b).unwrap();
            let implied = 255.0f64 * 255.0 * 10.0f64.powf(-p / 10.0);
            assert!(
                ((r * r - implied) / implied).abs() < 1e-6,
                "seed {seed}: rmse^2 {} vs implied {}",
                r * r,
                implied
            );
        }
    }
}
