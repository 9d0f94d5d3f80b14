//! Real spherical harmonics up to degree 3.

use crate::real::{sigmoid, Real};

pub const MAX_SH_DEGREE: usize = 3;

pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Orthonormal real SH basis evaluated at a unit direction, ordered by
/// degree then `m = -l..=l`.
pub fn sh_basis<T: Real>(degree: usize, dir: &[T; 3]) -> Vec<T> {
    assert!(degree <= MAX_SH_DEGREE, "SH degree above {MAX_SH_DEGREE}");
    let [x, y, z] = *dir;
    let c = T::c;
    let mut out = Vec::with_capacity(sh_coeff_count(degree));
    out.push(c(0.282_094_791_773_878_14));
    if degree >= 1 {
        let k = c(0.488_602_511_902_919_9);
        out.extend([k * y, k * z, k * x]);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.extend([
            c(1.092_548_430_592_079_2) * x * y,
            c(1.092_548_430_592_079_2) * y * z,
            c(0.315_391_565_252_520_05) * (c(3.0) * zz - c(1.0)),
            c(1.092_548_430_592_079_2) * x * z,
            c(0.546_274_215_296_039_6) * (xx - yy),
        ]);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.extend([
            c(0.590_043_589_926_643_5) * y * (c(3.0) * xx - yy),
            c(2.890_611_442_640_554) * x * y * z,
            c(0.457_045_799_464_465_8) * y * (c(5.0) * zz - c(1.0)),
            c(0.373_176_332_590_115_4) * z * (c(5.0) * zz - c(3.0)),
            c(0.457_045_799_464_465_8) * x * (c(5.0) * zz - c(1.0)),
            c(1.445_305_721_320_277) * z * (xx - yy),
            c(0.590_043_589_926_643_5) * x * (xx - c(3.0) * yy),
        ]);
    }
    out
}

/// RGB from per-channel SH coefficients (`[3, (degree+1)^2]`), squashed by
/// a sigmoid.
pub fn sh_encode<T: Real>(dir: &[T; 3], degree: usize, coeffs: &[T]) -> [T; 3] {
    let basis = sh_basis(degree, dir);
    let n = basis.len();
    assert_eq!(coeffs.len(), 3 * n);
    [0, 1, 2].map(|ch| {
        let s: T = coeffs[ch * n..(ch + 1) * n]
            .iter()
            .zip(&basis)
            .map(|(a, b)| *a * *b)
            .sum();
        sigmoid(s)
    })
}
