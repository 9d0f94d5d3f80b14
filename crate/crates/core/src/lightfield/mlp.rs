use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::real::Real;

/// Fully connected layer, `y = W x + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    /// He-normal weights, zero bias.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut l = Self::zeros(in_dim, out_dim);
        let normal = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).expect("finite std");
        for w in &mut l.weight {
            *w = T::c(normal.sample(rng));
        }
        l
    }

    pub fn forward_one(&self, x: &[T]) -> Vec<T> {
        let mut y = self.bias.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *yo += row.iter().zip(x).map(|(w, v)| *w * *v).sum::<T>();
        }
        y
    }

    /// `y[n, out] = x[n, in] W^T + b`.
    pub fn forward_batch(&self, x: &[T], n: usize, y: &mut [T]) {
        assert_eq!(x.len(), n * self.in_dim);
        assert_eq!(y.len(), n * self.out_dim);
        for row in y.chunks_exact_mut(self.out_dim) {
            row.copy_from_slice(&self.bias);
        }
        if n == 0 {
            return;
        }
        // SAFETY: shapes asserted above; strides stay inside each buffer.
        unsafe {
            T::gemm_raw(
                n,
                self.in_dim,
                self.out_dim,
                T::one(),
                x.as_ptr(),
                self.in_dim as isize,
                1,
                self.weight.as_ptr(),
                1,
                self.in_dim as isize,
                T::one(),
                y.as_mut_ptr(),
                self.out_dim as isize,
                1,
            );
        }
    }

    /// Accumulates `dx += dy W`, `dW += dy^T x`, `db += sum dy`.
    pub fn backward_batch(
        &self,
        x: &[T],
        n: usize,
        dy: &[T],
        dx: Option<&mut [T]>,
        grad: &mut Linear<T>,
    ) {
        assert_eq!(dy.len(), n * self.out_dim);
        if n == 0 {
            return;
        }
        let (i, o) = (self.in_dim, self.out_dim);
        // SAFETY: as in `forward_batch`.
        unsafe {
            if let Some(dx) = dx {
                assert_eq!(dx.len(), n * i);
                T::gemm_raw(
                    n,
                    o,
                    i,
                    T::one(),
                    dy.as_ptr(),
                    o as isize,
                    1,
                    self.weight.as_ptr(),
                    i as isize,
                    1,
                    T::one(),
                    dx.as_mut_ptr(),
                    i as isize,
                    1,
                );
            }
            T::gemm_raw(
                o,
                n,
                i,
                T::one(),
                dy.as_ptr(),
                1,
                o as isize,
                x.as_ptr(),
                i as isize,
                1,
                T::one(),
                grad.weight.as_mut_ptr(),
                i as isize,
                1,
            );
        }
        for row in dy.chunks_exact(o) {
            for (b, g) in grad.bias.iter_mut().zip(row) {
                *b += *g;
            }
        }
    }
}

/// Stack of linear layers with ReLU between them. The last layer is left
/// linear; each head applies its own output activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> Mlp<T> {
    /// `sizes` lists every width including input and output.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2);
        Self {
            layers: sizes.windows(2).map(|w| Linear::random(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            layers: sizes.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Single-vector forward. Returns the raw output and the last hidden
    /// activation (the input itself for one-layer stacks).
    pub fn forward_one(&self, x: &[T]) -> (Vec<T>, Vec<T>) {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            h = layer.forward_one(&h);
            for v in &mut h {
                *v = v.max(T::zero());
            }
        }
        (self.layers[last].forward_one(&h), h)
    }
}
