//! Image and surface quality metrics.

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::render::Dsm;

/// PSNR reported for identical images.
pub const PSNR_IDENTICAL: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch(format!(
            "images are {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean squared error over all channels.
pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)` for images in [0,1].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { PSNR_IDENTICAL } else { -10.0 * m.log10() })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" correlation of a `w x h` plane with the window.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; ow * h];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..n).map(|i| k[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, k: &[f64]) -> f64 {
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let mu_a = filter_valid(a, w, h, k);
    let mu_b = filter_valid(b, w, h, k);
    let e_aa = filter_valid(&aa, w, h, k);
    let e_bb = filter_valid(&bb, w, h, k);
    let e_ab = filter_valid(&ab, w, h, k);
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    sum / mu_a.len() as f64
}

/// Structural similarity of the channel-mean gray images, with an 11x11
/// Gaussian window (sigma 1.5), averaged over valid window positions.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_dims(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: a.width,
            height: a.height,
            window: SSIM_WINDOW,
        });
    }
    Ok(ssim_plane(&a.gray(), &b.gray(), a.width, a.height, &gaussian_window()))
}

/// Mean absolute altitude error over cells valid in both grids.
pub fn altitude_mae(pred: &Dsm, truth: &Dsm) -> Result<f64> {
    if !pred.same_grid(truth) {
        return Err(Error::ShapeMismatch("DSM grids differ".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, t) in pred.values.iter().zip(&truth.values) {
        if p.is_finite() && t.is_finite() {
            sum += (p - t).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidCells);
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = RgbImage::new(w, h);
        img.data.iter_mut().for_each(|v| *v = rng.gen());
        img
    }

    #[test]
    fn psnr_examples() {
        let a = RgbImage::filled(16, 16, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_IDENTICAL);
        let b = RgbImage::filled(16, 16, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = RgbImage::filled(8, 16, [0.6; 3]);
        assert!(psnr(&a, &c).is_err());
    }

    #[test]
    fn ssim_identity_and_size() {
        let a = noise_image(32, 24, 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let small = noise_image(10, 30, 2);
        assert!(matches!(ssim(&small, &small), Err(Error::ImageTooSmall { .. })));
        let b = noise_image(32, 24, 3);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.2 && s > -1.0);
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        // Brute-force 2-D window at one position against the separable filter.
        let a = noise_image(11, 11, 4);
        let b = noise_image(11, 11, 5);
        let r = 5.0;
        let mut w2 = vec![0.0; 121];
        for i in 0..11 {
            for j in 0..11 {
                let d2 = (i as f64 - r).powi(2) + (j as f64 - r).powi(2);
                w2[i * 11 + j] = (-d2 / (2.0 * 1.5 * 1.5)).exp();
            }
        }
        let s: f64 = w2.iter().sum();
        w2.iter_mut().for_each(|v| *v /= s);
        let (ga, gb) = (a.gray(), b.gray());
        let expect = {
            let x = |i: usize| ga[i];
            let y = |i: usize| gb[i];
            let ma: f64 = (0..121).map(|i| w2[i] * x(i)).sum();
            let mb: f64 = (0..121).map(|i| w2[i] * y(i)).sum();
            let va: f64 = (0..121).map(|i| w2[i] * (x(i) - ma).powi(2)).sum();
            let vb: f64 = (0..121).map(|i| w2[i] * (y(i) - mb).powi(2)).sum();
            let cov: f64 = (0..121).map(|i| w2[i] * (x(i) - ma) * (y(i) - mb)).sum();
            ((2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4)) / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4))
        };
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn ssim_of_constants_is_luminance_term() {
        let a = RgbImage::filled(16, 16, [0.4; 3]);
        let b = RgbImage::filled(16, 16, [0.5; 3]);
        let expect = (2.0 * 0.4 * 0.5 + 1e-4) / (0.16 + 0.25 + 1e-4);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn inverted_binary_image_is_anticorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut a = RgbImage::new(20, 20);
        let mut b = RgbImage::new(20, 20);
        for i in 0..400 {
            let v = if rng.gen::<bool>() { 1.0 } else { 0.0 };
            a.data[3 * i..3 * i + 3].fill(v);
            b.data[3 * i..3 * i + 3].fill(1.0 - v);
        }
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn halving_mse_adds_three_db() {
        let a = RgbImage::filled(4, 4, [0.5; 3]);
        let b = RgbImage::filled(4, 4, [0.7; 3]);
        let c = RgbImage::filled(4, 4, [0.5 + 0.2 / 2f64.sqrt(); 3]);
        let gain = psnr(&a, &c).unwrap() - psnr(&a, &b).unwrap();
        assert!((gain - 10.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn mae_skips_invalid_cells() {
        let grid = |values: Vec<f64>| Dsm {
            nrows: 1,
            ncols: 3,
            xll: 0.0,
            yll: 0.0,
            cellsize: 1.0,
            values,
        };
        let p = grid(vec![1.0, f64::NAN, 3.0]);
        let t = grid(vec![2.0, 5.0, 3.5]);
        assert!((altitude_mae(&p, &t).unwrap() - 0.75).abs() < 1e-12);
        let empty = grid(vec![f64::NAN; 3]);
        assert!(matches!(altitude_mae(&empty, &t), Err(Error::NoValidCells)));
    }
}
