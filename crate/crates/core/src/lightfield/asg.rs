//! Anisotropic spherical Gaussian encoding of the view direction.

use crate::real::{softplus, Real};

/// Fixed lobe frames: axis plus two tangent directions per lobe.
#[derive(Debug, Clone, PartialEq)]
pub struct AsgLobes {
    pub axis: Vec<[f64; 3]>,
    pub tangent_lambda: Vec<[f64; 3]>,
    pub tangent_mu: Vec<[f64; 3]>,
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalized(a: [f64; 3]) -> [f64; 3] {
    let n = dot3(&a, &a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl AsgLobes {
    /// `n` axes on a Fibonacci lattice over the sphere. Tangents come from
    /// Gram-Schmidt against +Z, switching to +X near the poles.
    pub fn fibonacci(n: usize) -> Self {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let mut lobes = Self {
            axis: Vec::with_capacity(n),
            tangent_lambda: Vec::with_capacity(n),
            tangent_mu: Vec::with_capacity(n),
        };
        for i in 0..n {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            lobes.push_axis([r * phi.cos(), r * phi.sin(), z]);
        }
        lobes
    }

    pub fn from_axes(axes: &[[f64; 3]]) -> Self {
        let mut lobes = Self {
            axis: Vec::new(),
            tangent_lambda: Vec::new(),
            tangent_mu: Vec::new(),
        };
        for a in axes {
            lobes.push_axis(*a);
        }
        lobes
    }

    fn push_axis(&mut self, axis: [f64; 3]) {
        let axis = normalized(axis);
        let reference = if axis[2].abs() > 0.9 {
            [1.0, 0.0, 0.0]
        } else {
            [0.0, 0.0, 1.0]
        };
        let proj = dot3(&reference, &axis);
        let t = normalized([
            reference[0] - proj * axis[0],
            reference[1] - proj * axis[1],
            reference[2] - proj * axis[2],
        ]);
        let b = cross3(&axis, &t);
        self.axis.push(axis);
        self.tangent_lambda.push(t);
        self.tangent_mu.push(b);
    }

    pub fn len(&self) -> usize {
        self.axis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.axis.is_empty()
    }

    /// Per-lobe `(gate, a, b)` for a direction: the clamped axis cosine and
    /// the two tangent projections.
    #[inline]
    pub(crate) fn projections<T: Real>(&self, i: usize, w: &[T; 3]) -> (T, T, T) {
        let d = |v: &[f64; 3]| w[0] * T::c(v[0]) + w[1] * T::c(v[1]) + w[2] * T::c(v[2]);
        (d(&self.axis[i]).max(T::zero()), d(&self.tangent_lambda[i]), d(&self.tangent_mu[i]))
    }
}

/// Per-point lobe parameters: features `F_i` and bandwidths.
#[derive(Debug, Clone, PartialEq)]
pub struct AsgBank<T> {
    pub dim: usize,
    /// `[lobes, dim]`
    pub features: Vec<T>,
    pub lambda: Vec<T>,
    pub mu: Vec<T>,
}

/// Lower bound added to the softplus bandwidths.
pub const BANDWIDTH_FLOOR: f64 = 1e-4;

impl<T: Real> AsgBank<T> {
    /// Unpacks a raw head output laid out per lobe as `[F_i, lambda_raw, mu_raw]`.
    pub fn from_raw(raw: &[T], lobes: usize, dim: usize) -> Self {
        assert_eq!(raw.len(), lobes * (dim + 2));
        let mut bank = Self {
            dim,
            features: Vec::with_capacity(lobes * dim),
            lambda: Vec::with_capacity(lobes),
            mu: Vec::with_capacity(lobes),
        };
        for chunk in raw.chunks_exact(dim + 2) {
            bank.features.extend_from_slice(&chunk[..dim]);
            bank.lambda.push(softplus(chunk[dim]) + T::c(BANDWIDTH_FLOOR));
            bank.mu.push(softplus(chunk[dim + 1]) + T::c(BANDWIDTH_FLOOR));
        }
        bank
    }
}

/// `F_s(w) = sum_i F_i max(w . axis_i, 0) exp(-lambda_i (w . t_i)^2 - mu_i (w . b_i)^2)`.
pub fn asg_encode<T: Real>(view: &[T; 3], lobes: &AsgLobes, bank: &AsgBank<T>) -> Vec<T> {
    let dim = bank.dim;
    let mut out = vec![T::zero(); dim];
    for i in 0..lobes.len() {
        let (gate, a, b) = lobes.projections(i, view);
        if gate == T::zero() {
            continue;
        }
        let g = gate * (-(bank.lambda[i] * a * a) - bank.mu[i] * b * b).exp();
        for (o, f) in out.iter_mut().zip(&bank.features[i * dim..(i + 1) * dim]) {
            *o += *f * g;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lobe_frames_are_orthonormal() {
        for n in [1, 2, 16, 33] {
            let lobes = AsgLobes::fibonacci(n);
            for i in 0..n {
                let (a, t, b) = (&lobes.axis[i], &lobes.tangent_lambda[i], &lobes.tangent_mu[i]);
                for v in [a, t, b] {
                    assert!((dot3(v, v) - 1.0).abs() < 1e-9);
                }
                assert!(dot3(a, t).abs() < 1e-9);
                assert!(dot3(a, b).abs() < 1e-9);
                assert!(dot3(t, b).abs() < 1e-9);
            }
        }
        let pole = AsgLobes::from_axes(&[[0.0, 0.0, 1.0]]);
        assert!(dot3(&pole.axis[0], &pole.tangent_lambda[0]).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_view_gates_everything() {
        let lobes = AsgLobes::from_axes(&[[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]);
        let bank = AsgBank::<f64> {
            dim: 2,
            features: vec![1.0, 2.0, 3.0, 4.0],
            lambda: vec![1.0, 1.0],
            mu: vec![1.0, 1.0],
        };
        assert_eq!(asg_encode(&[1.0, 0.0, 0.0], &lobes, &bank), vec![0.0, 0.0]);
    }

    #[test]
    fn aligned_view_returns_feature() {
        let lobes = AsgLobes::from_axes(&[[0.0, 1.0, 0.0], [0.0, -1.0, 0.0]]);
        let bank = AsgBank::<f64> {
            dim: 3,
            features: vec![0.5, -1.5, 2.0, 9.0, 9.0, 9.0],
            lambda: vec![3.0, 3.0],
            mu: vec![7.0, 7.0],
        };
        let out = asg_encode(&[0.0, 1.0, 0.0], &lobes, &bank);
        for (o, e) in out.iter().zip([0.5, -1.5, 2.0]) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_raw_bandwidth() {
        let bank = AsgBank::<f64>::from_raw(&[0.3, 0.0, 0.0], 1, 1);
        assert!((bank.lambda[0] - (2f64.ln() + 1e-4)).abs() < 1e-15);
        assert!((bank.mu[0] - (2f64.ln() + 1e-4)).abs() < 1e-15);
    }
}
