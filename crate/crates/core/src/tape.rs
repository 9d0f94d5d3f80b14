//! Reverse-mode differentiation over the rendering pipeline.
//!
//! Nodes are batched: each holds a row-major `[rows, cols]` value computed
//! eagerly when it is recorded. Parameters are not nodes; field and linear
//! nodes scatter their parameter gradients straight into a
//! [`ModelGradients`] buffer during the backward sweep.

use crate::error::{Error, Result};
use crate::lightfield::{sh_basis, sh_coeff_count, AsgLobes, BANDWIDTH_FLOOR, FALLBACK_NORMAL, NORMAL_EPS};
use crate::losses::{loss_l1, loss_l1_backward, loss_tv, loss_tv_backward, Regularizer};
use crate::model::{FieldKind, HeadKind, ModelGradients, RadianceModel};
use crate::real::{sigmoid, softplus, Real};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Sigmoid,
    Softplus,
}

impl Act {
    #[inline]
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Act::Relu => x.max(T::zero()),
            Act::Sigmoid => sigmoid(x),
            Act::Softplus => softplus(x),
        }
    }

    /// Derivative from the input `x` and output `y`.
    #[inline]
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Act::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Act::Sigmoid => y * (T::one() - y),
            Act::Softplus => sigmoid(x),
        }
    }
}

enum Op<T> {
    Leaf,
    Field {
        kind: FieldKind,
        points: Vec<[T; 3]>,
    },
    Linear {
        x: NodeId,
        head: HeadKind,
        layer: usize,
    },
    Act {
        x: NodeId,
        act: Act,
    },
    Columns {
        x: NodeId,
        start: usize,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    RowMean {
        x: NodeId,
        scale: T,
    },
    Normalize {
        x: NodeId,
        fallback: Vec<bool>,
    },
    DotConst {
        x: NodeId,
        v: Vec<[T; 3]>,
    },
    Asg {
        x: NodeId,
        omega: Vec<[T; 3]>,
        dim: usize,
    },
    Sh {
        x: NodeId,
        dirs: Vec<[T; 3]>,
        degree: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    MulCol {
        x: NodeId,
        s: NodeId,
    },
    ScaleRows {
        x: NodeId,
        c: Vec<T>,
    },
    Alpha {
        sigma: NodeId,
        delta: Vec<T>,
    },
    Transmittance {
        alpha: NodeId,
        segments: Vec<usize>,
    },
    Gather {
        x: NodeId,
        idx: Vec<usize>,
    },
    SegmentSum {
        x: NodeId,
        segments: Vec<usize>,
    },
    SafeDiv {
        a: NodeId,
        b: NodeId,
        eps: T,
    },
    Ambient {
        lam: NodeId,
        camb: NodeId,
    },
    Mse {
        x: NodeId,
        target: Vec<T>,
        norm: T,
    },
    NormalLoss {
        n: NodeId,
        w: NodeId,
        dirs: Vec<[T; 3]>,
        scale: Vec<T>,
    },
    LambAmb {
        tr: NodeId,
        alpha: NodeId,
        lam: NodeId,
        segments: Vec<usize>,
        norm: T,
    },
    DepthLoss {
        h: NodeId,
        target: Vec<T>,
        weight: Vec<T>,
        norm: T,
    },
    Regularizer {
        kind: FieldKind,
        reg: Regularizer,
        all_planes: bool,
    },
    WeightedSum {
        terms: Vec<(NodeId, T)>,
    },
}

struct Node<T> {
    name: &'static str,
    op: Op<T>,
    rows: usize,
    cols: usize,
    value: Vec<T>,
    requires_grad: bool,
}

/// Recorded forward computation over one model.
pub struct Tape<'m, T: Real> {
    model: &'m RadianceModel<T>,
    nodes: Vec<Node<T>>,
}

/// Per-node gradients after a backward sweep.
pub struct NodeGrads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> NodeGrads<T> {
    /// Gradient of the root with respect to `id`; `None` when nothing
    /// flowed there.
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

fn segment_ranges(segments: &[usize]) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
    segments.windows(2).map(|w| w[0]..w[1])
}

impl<'m, T: Real> Tape<'m, T> {
    pub fn new(model: &'m RadianceModel<T>) -> Self {
        Self {
            model,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id].value
    }

    /// Which inputs of every ReLU on the tape are positive, in node order.
    /// Two evaluations with equal patterns lie on one smooth piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Act { x, act: Act::Relu } = node.op {
                out.extend(self.nodes[x].value.iter().map(|v| *v > T::zero()));
            }
        }
        out
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn name(&self, id: NodeId) -> &'static str {
        self.nodes[id].name
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id].value[0]
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        op: Op<T>,
        rows: usize,
        cols: usize,
        value: Vec<T>,
        requires_grad: bool,
    ) -> Result<NodeId> {
        debug_assert_eq!(value.len(), rows * cols, "{name}");
        if let Some(i) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "node `{name}` (#{}), entry {i}",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            name,
            op,
            rows,
            cols,
            value,
            requires_grad,
        });
        Ok(self.nodes.len() - 1)
    }

    /// Input data. With `requires_grad` its gradient is kept for inspection.
    pub fn leaf(
        &mut self,
        name: &'static str,
        rows: usize,
        cols: usize,
        value: Vec<T>,
        requires_grad: bool,
    ) -> Result<NodeId> {
        assert_eq!(value.len(), rows * cols);
        self.push(name, Op::Leaf, rows, cols, value, requires_grad)
    }

    /// Raw (pre-activation) features of one model field.
    pub fn field(&mut self, name: &'static str, kind: FieldKind, points: Vec<[T; 3]>) -> Result<NodeId> {
        let f = self.model.field(kind);
        let cols = f.out_dim();
        let mut value = vec![T::zero(); points.len() * cols];
        f.forward_batch(&points, &mut value);
        let rows = points.len();
        self.push(name, Op::Field { kind, points }, rows, cols, value, true)
    }

    pub fn linear(&mut self, name: &'static str, x: NodeId, head: HeadKind, layer: usize) -> Result<NodeId> {
        let l = self.model.layer(head, layer);
        let (rows, cols) = self.shape(x);
        assert_eq!(cols, l.in_dim, "{name}: input width");
        let mut value = vec![T::zero(); rows * l.out_dim];
        l.forward_batch(&self.nodes[x].value, rows, &mut value);
        self.push(name, Op::Linear { x, head, layer }, rows, l.out_dim, value, true)
    }

    pub fn act(&mut self, name: &'static str, x: NodeId, act: Act) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        let value = self.nodes[x].value.iter().map(|v| act.apply(*v)).collect();
        let rg = self.rg(x);
        self.push(name, Op::Act { x, act }, rows, cols, value, rg)
    }

    pub fn columns(&mut self, name: &'static str, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        assert!(start + len <= cols);
        let src = &self.nodes[x].value;
        let mut value = Vec::with_capacity(rows * len);
        for r in 0..rows {
            value.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        self.push(name, Op::Columns { x, start }, rows, len, value, rg)
    }

    pub fn concat(&mut self, name: &'static str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (rows, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(rows, rb);
        let mut value = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            value.extend_from_slice(&self.nodes[a].value[r * ca..(r + 1) * ca]);
            value.extend_from_slice(&self.nodes[b].value[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(name, Op::Concat { a, b }, rows, ca + cb, value, rg)
    }

    /// `scale * mean(row)` per row.
    pub fn row_mean(&mut self, name: &'static str, x: NodeId, scale: T) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        let k = scale / T::c(cols as f64);
        let value = self.nodes[x]
            .value
            .chunks_exact(cols)
            .map(|r| k * r.iter().copied().sum::<T>())
            .collect();
        let rg = self.rg(x);
        self.push(name, Op::RowMean { x, scale }, rows, 1, value, rg)
    }

    /// Unit-length rows of a `[n, 3]` node; short rows become +Z.
    pub fn normalize(&mut self, name: &'static str, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        assert_eq!(cols, 3);
        let mut value = Vec::with_capacity(rows * 3);
        let mut fallback = Vec::with_capacity(rows);
        for r in self.nodes[x].value.chunks_exact(3) {
            let len = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            if len < T::c(NORMAL_EPS) {
                value.extend(FALLBACK_NORMAL.map(T::c));
                fallback.push(true);
            } else {
                value.extend(r.iter().map(|v| *v / len));
                fallback.push(false);
            }
        }
        let rg = self.rg(x);
        self.push(name, Op::Normalize { x, fallback }, rows, 3, value, rg)
    }

    /// Row-wise dot product with constant vectors.
    pub fn dot_const(&mut self, name: &'static str, x: NodeId, v: Vec<[T; 3]>) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        assert_eq!(cols, 3);
        assert_eq!(v.len(), rows);
        let value = self.nodes[x]
            .value
            .chunks_exact(3)
            .zip(&v)
            .map(|(r, d)| r[0] * d[0] + r[1] * d[1] + r[2] * d[2])
            .collect();
        let rg = self.rg(x);
        self.push(name, Op::DotConst { x, v }, rows, 1, value, rg)
    }

    /// ASG encoding from raw head-B rows laid out per lobe as
    /// `[F_i (dim), lambda_raw, mu_raw]`.
    pub fn asg(&mut self, name: &'static str, x: NodeId, omega: Vec<[T; 3]>, dim: usize) -> Result<NodeId> {
        let lobes = &self.model.light.lobes;
        let (rows, cols) = self.shape(x);
        assert_eq!(cols, lobes.len() * (dim + 2));
        assert_eq!(omega.len(), rows);
        let mut value = vec![T::zero(); rows * dim];
        for ((raw, w), out) in self.nodes[x]
            .value
            .chunks_exact(cols)
            .zip(&omega)
            .zip(value.chunks_exact_mut(dim))
        {
            for i in 0..lobes.len() {
                let lobe = &raw[i * (dim + 2)..(i + 1) * (dim + 2)];
                if let Some((g, _, _)) = asg_term(lobes, i, w, lobe, dim) {
                    for (o, f) in out.iter_mut().zip(&lobe[..dim]) {
                        *o += *f * g;
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(name, Op::Asg { x, omega, dim }, rows, dim, value, rg)
    }

    /// Sigmoid of SH-expanded colors from `[n, 3 (degree+1)^2]` coefficients.
    pub fn sh(&mut self, name: &'static str, x: NodeId, dirs: Vec<[T; 3]>, degree: usize) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        let k = sh_coeff_count(degree);
        assert_eq!(cols, 3 * k);
        let mut value = Vec::with_capacity(rows * 3);
        for (c, d) in self.nodes[x].value.chunks_exact(cols).zip(&dirs) {
            let basis = sh_basis(degree, d);
            for ch in 0..3 {
                let s: T = c[ch * k..(ch + 1) * k].iter().zip(&basis).map(|(a, b)| *a * *b).sum();
                value.push(sigmoid(s));
            }
        }
        let rg = self.rg(x);
        self.push(name, Op::Sh { x, dirs, degree }, rows, 3, value, rg)
    }

    pub fn add(&mut self, name: &'static str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(b), (rows, cols));
        let value = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| *x + *y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(name, Op::Add { a, b }, rows, cols, value, rg)
    }

    pub fn mul(&mut self, name: &'static str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(b), (rows, cols));
        let value = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| *x * *y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(name, Op::Mul { a, b }, rows, cols, value, rg)
    }

    /// `x[n, k] * s[n, 1]`.
    pub fn mul_col(&mut self, name: &'static str, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        assert_eq!(self.shape(s), (rows, 1));
        let sv = &self.nodes[s].value;
        let value = self.nodes[x]
            .value
            .chunks_exact(cols.max(1))
            .zip(sv)
            .flat_map(|(r, k)| r.iter().map(move |v| *v * *k))
            .collect();
        let rg = self.rg(x) || self.rg(s);
        self.push(name, Op::MulCol { x, s }, rows, cols, value, rg)
    }

    /// `x[n, k] * c[n]` with constant `c`.
    pub fn scale_rows(&mut self, name: &'static str, x: NodeId, c: Vec<T>) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        assert_eq!(c.len(), rows);
        let value = self.nodes[x]
            .value
            .chunks_exact(cols.max(1))
            .zip(&c)
            .flat_map(|(r, k)| r.iter().map(move |v| *v * *k))
            .collect();
        let rg = self.rg(x);
        self.push(name, Op::ScaleRows { x, c }, rows, cols, value, rg)
    }

    /// `alpha = 1 - exp(-sigma delta)`.
    pub fn alpha(&mut self, name: &'static str, sigma: NodeId, delta: Vec<T>) -> Result<NodeId> {
        let (rows, cols) = self.shape(sigma);
        assert_eq!(cols, 1);
        assert_eq!(delta.len(), rows);
        let sv = &self.nodes[sigma].value;
        if let Some(i) = sv.iter().position(|s| *s < T::zero()) {
            return Err(Error::NegativeDensity {
                index: i,
                value: sv[i].f64(),
            });
        }
        let value = sv.iter().zip(&delta).map(|(s, d)| -(-(*s * *d)).exp_m1()).collect();
        let rg = self.rg(sigma);
        self.push(name, Op::Alpha { sigma, delta }, rows, 1, value, rg)
    }

    /// Exclusive prefix product of `1 - alpha` within each segment.
    pub fn transmittance(&mut self, name: &'static str, alpha: NodeId, segments: Vec<usize>) -> Result<NodeId> {
        let (rows, _) = self.shape(alpha);
        assert_eq!(*segments.last().unwrap_or(&0), rows);
        let av = &self.nodes[alpha].value;
        let mut value = vec![T::zero(); rows];
        for range in segment_ranges(&segments) {
            let mut tr = T::one();
            for i in range {
                value[i] = tr;
                tr *= T::one() - av[i];
            }
        }
        let rg = self.rg(alpha);
        self.push(name, Op::Transmittance { alpha, segments }, rows, 1, value, rg)
    }

    pub fn gather(&mut self, name: &'static str, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let (_, cols) = self.shape(x);
        let src = &self.nodes[x].value;
        let mut value = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            value.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rows = idx.len();
        let rg = self.rg(x);
        self.push(name, Op::Gather { x, idx }, rows, cols, value, rg)
    }

    /// Row sums within each segment.
    pub fn segment_sum(&mut self, name: &'static str, x: NodeId, segments: Vec<usize>) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        assert_eq!(*segments.last().unwrap_or(&0), rows);
        let n = segments.len().saturating_sub(1);
        let src = &self.nodes[x].value;
        let mut value = vec![T::zero(); n * cols];
        for (s, range) in segment_ranges(&segments).enumerate() {
            let out = &mut value[s * cols..(s + 1) * cols];
            for i in range {
                for (o, v) in out.iter_mut().zip(&src[i * cols..(i + 1) * cols]) {
                    *o += *v;
                }
            }
        }
        let rg = self.rg(x);
        self.push(name, Op::SegmentSum { x, segments }, n, cols, value, rg)
    }

    /// `a / max(b, eps)` for `[n, 1]` nodes.
    pub fn safe_div(&mut self, name: &'static str, a: NodeId, b: NodeId, eps: T) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(b), (rows, cols));
        let value = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| *x / y.max(eps))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(name, Op::SafeDiv { a, b, eps }, rows, cols, value, rg)
    }

    /// `l = lambda + (1 - lambda) c_amb` from `lam [n,1]` and `camb [n,3]`.
    pub fn ambient(&mut self, name: &'static str, lam: NodeId, camb: NodeId) -> Result<NodeId> {
        let (rows, _) = self.shape(camb);
        assert_eq!(self.shape(lam), (rows, 1));
        let lv = &self.nodes[lam].value;
        let value = self.nodes[camb]
            .value
            .chunks_exact(3)
            .zip(lv)
            .flat_map(|(c, l)| c.iter().map(move |v| *l + (T::one() - *l) * *v))
            .collect();
        let rg = self.rg(lam) || self.rg(camb);
        self.push(name, Op::Ambient { lam, camb }, rows, 3, value, rg)
    }

    /// `sum (x - target)^2 / norm`.
    pub fn mse(&mut self, name: &'static str, x: NodeId, target: Vec<T>, norm: T) -> Result<NodeId> {
        assert_eq!(target.len(), self.nodes[x].value.len());
        let s: T = self.nodes[x]
            .value
            .iter()
            .zip(&target)
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum();
        let rg = self.rg(x);
        self.push(name, Op::Mse { x, target, norm }, 1, 1, vec![s / norm], rg)
    }

    /// `sum_i scale_i w_i max(0, d_i . n_i)^2`.
    pub fn normal_loss(
        &mut self,
        name: &'static str,
        n: NodeId,
        w: NodeId,
        dirs: Vec<[T; 3]>,
        scale: Vec<T>,
    ) -> Result<NodeId> {
        let (rows, _) = self.shape(n);
        assert_eq!(self.shape(w), (rows, 1));
        assert_eq!(dirs.len(), rows);
        assert_eq!(scale.len(), rows);
        let mut s = T::zero();
        for i in 0..rows {
            let nv = &self.nodes[n].value[i * 3..i * 3 + 3];
            let d = &dirs[i];
            let c = (nv[0] * d[0] + nv[1] * d[1] + nv[2] * d[2]).max(T::zero());
            s += scale[i] * self.nodes[w].value[i] * c * c;
        }
        let rg = self.rg(n) || self.rg(w);
        self.push(name, Op::NormalLoss { n, w, dirs, scale }, 1, 1, vec![s], rg)
    }

    /// `sum over segments of [sum (Tr - lam)^2 + 1 - sum Tr alpha lam] / norm`,
    /// skipping empty segments.
    pub fn lamb_amb(
        &mut self,
        name: &'static str,
        tr: NodeId,
        alpha: NodeId,
        lam: NodeId,
        segments: Vec<usize>,
        norm: T,
    ) -> Result<NodeId> {
        let (t, a, l) = (&self.nodes[tr].value, &self.nodes[alpha].value, &self.nodes[lam].value);
        let mut s = T::zero();
        for range in segment_ranges(&segments) {
            if range.is_empty() {
                continue;
            }
            let mut term = T::one();
            for i in range {
                term += (t[i] - l[i]) * (t[i] - l[i]) - t[i] * a[i] * l[i];
            }
            s += term;
        }
        let rg = self.rg(tr) || self.rg(alpha) || self.rg(lam);
        self.push(name, Op::LambAmb { tr, alpha, lam, segments, norm }, 1, 1, vec![s / norm], rg)
    }

    /// `sum w (h - target)^2 / norm`.
    pub fn depth_loss(
        &mut self,
        name: &'static str,
        h: NodeId,
        target: Vec<T>,
        weight: Vec<T>,
        norm: T,
    ) -> Result<NodeId> {
        let hv = &self.nodes[h].value;
        assert_eq!(hv.len(), target.len());
        let s: T = hv
            .iter()
            .zip(&target)
            .zip(&weight)
            .map(|((h, t), w)| *w * (*h - *t) * (*h - *t))
            .sum();
        let rg = self.rg(h);
        self.push(name, Op::DepthLoss { h, target, weight, norm }, 1, 1, vec![s / norm], rg)
    }

    /// TV or L1 penalty on the factors of one field.
    pub fn regularizer(
        &mut self,
        name: &'static str,
        kind: FieldKind,
        reg: Regularizer,
        all_planes: bool,
    ) -> Result<NodeId> {
        let f = self.model.field(kind);
        let v = match reg {
            Regularizer::Tv => loss_tv(f, all_planes),
            Regularizer::L1 => loss_l1(f),
            Regularizer::None => T::zero(),
        };
        self.push(name, Op::Regularizer { kind, reg, all_planes }, 1, 1, vec![v], true)
    }

    /// `sum c_i x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, name: &'static str, terms: Vec<(NodeId, T)>) -> Result<NodeId> {
        let v: T = terms.iter().map(|(id, c)| *c * self.scalar(*id)).sum();
        let rg = terms.iter().any(|(id, _)| self.rg(*id));
        self.push(name, Op::WeightedSum { terms }, 1, 1, vec![v], rg)
    }

    /// Back-propagates `d root = 1` and accumulates parameter gradients into
    /// `grads`. Returns the gradient of every node that received one.
    pub fn backward(&self, root: NodeId, grads: &mut ModelGradients<T>) -> Result<NodeGrads<T>> {
        assert_eq!(self.nodes[root].value.len(), 1, "backward from a scalar node");
        let mut g: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root] = Some(vec![T::one()]);
        for id in (0..=root).rev() {
            let Some(dy) = g[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(i) = dy.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of node `{}` (#{id}), entry {i}",
                    node.name
                )));
            }
            self.backward_node(node, &dy, &mut g, grads);
            g[id] = Some(dy);
        }
        Ok(NodeGrads { grads: g })
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        dy: &[T],
        g: &mut [Option<Vec<T>>],
        grads: &mut ModelGradients<T>,
    ) {
        let nodes = &self.nodes;
        let val = |id: NodeId| nodes[id].value.as_slice();
        // Mutable gradient buffer for an input, allocated on first use; `None`
        // for inputs that need no gradient.
        macro_rules! buf {
            ($id:expr) => {{
                let id = $id;
                if nodes[id].requires_grad {
                    Some(g[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]))
                } else {
                    None
                }
            }};
        }
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::Field { kind, points } => {
                self.model.field(*kind).backward_batch(points, dy, grads.field_mut(*kind));
            }
            Op::Linear { x, head, layer } => {
                let l = self.model.layer(*head, *layer);
                let xv = val(*x);
                let gl = grads.layer_mut(*head, *layer);
                match buf!(*x) {
                    Some(dx) => l.backward_batch(xv, rows, dy, Some(dx.as_mut_slice()), gl),
                    None => l.backward_batch(xv, rows, dy, None, gl),
                }
            }
            Op::Act { x, act } => {
                let xv = val(*x);
                if let Some(dx) = buf!(*x) {
                    for i in 0..dy.len() {
                        dx[i] += dy[i] * act.derivative(xv[i], node.value[i]);
                    }
                }
            }
            Op::Columns { x, start } => {
                let xc = nodes[*x].cols;
                if let Some(dx) = buf!(*x) {
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * xc + start + c] += dy[r * cols + c];
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let ca = nodes[*a].cols;
                let cb = nodes[*b].cols;
                if let Some(da) = buf!(*a) {
                    for r in 0..rows {
                        for c in 0..ca {
                            da[r * ca + c] += dy[r * cols + c];
                        }
                    }
                }
                if let Some(db) = buf!(*b) {
                    for r in 0..rows {
                        for c in 0..cb {
                            db[r * cb + c] += dy[r * cols + ca + c];
                        }
                    }
                }
            }
            Op::RowMean { x, scale } => {
                let xc = nodes[*x].cols;
                let k = *scale / T::c(xc as f64);
                if let Some(dx) = buf!(*x) {
                    for r in 0..rows {
                        for c in 0..xc {
                            dx[r * xc + c] += dy[r] * k;
                        }
                    }
                }
            }
            Op::Normalize { x, fallback } => {
                let xv = val(*x);
                if let Some(dx) = buf!(*x) {
                    for r in 0..rows {
                        if fallback[r] {
                            continue;
                        }
                        let xr = &xv[r * 3..r * 3 + 3];
                        let len = (xr[0] * xr[0] + xr[1] * xr[1] + xr[2] * xr[2]).sqrt();
                        let y = &node.value[r * 3..r * 3 + 3];
                        let d = &dy[r * 3..r * 3 + 3];
                        let yd = y[0] * d[0] + y[1] * d[1] + y[2] * d[2];
                        for k in 0..3 {
                            dx[r * 3 + k] += (d[k] - y[k] * yd) / len;
                        }
                    }
                }
            }
            Op::DotConst { x, v } => {
                if let Some(dx) = buf!(*x) {
                    for r in 0..rows {
                        for k in 0..3 {
                            dx[r * 3 + k] += dy[r] * v[r][k];
                        }
                    }
                }
            }
            Op::Asg { x, omega, dim } => {
                let dim = *dim;
                let lobes = &self.model.light.lobes;
                let xc = nodes[*x].cols;
                let xv = val(*x);
                if let Some(dx) = buf!(*x) {
                    for r in 0..rows {
                        let raw = &xv[r * xc..(r + 1) * xc];
                        let d = &dy[r * dim..(r + 1) * dim];
                        for i in 0..lobes.len() {
                            let o = i * (dim + 2);
                            let lobe = &raw[o..o + dim + 2];
                            let Some((gv, a, b)) = asg_term(lobes, i, &omega[r], lobe, dim) else {
                                continue;
                            };
                            let out = &mut dx[r * xc + o..r * xc + o + dim + 2];
                            let mut dg = T::zero();
                            for k in 0..dim {
                                out[k] += d[k] * gv;
                                dg += d[k] * lobe[k];
                            }
                            out[dim] -= dg * gv * a * a * sigmoid(lobe[dim]);
                            out[dim + 1] -= dg * gv * b * b * sigmoid(lobe[dim + 1]);
                        }
                    }
                }
            }
            Op::Sh { x, dirs, degree } => {
                let k = sh_coeff_count(*degree);
                let xc = nodes[*x].cols;
                if let Some(dx) = buf!(*x) {
                    for r in 0..rows {
                        let basis = sh_basis(*degree, &dirs[r]);
                        for ch in 0..3 {
                            let y = node.value[r * 3 + ch];
                            let ds = dy[r * 3 + ch] * y * (T::one() - y);
                            for (j, bj) in basis.iter().enumerate() {
                                dx[r * xc + ch * k + j] += ds * *bj;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if let Some(d) = buf!(id) {
                        for (di, gi) in d.iter_mut().zip(dy) {
                            *di += *gi;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
                if let Some(da) = buf!(*a) {
                    for i in 0..dy.len() {
                        da[i] += dy[i] * bv[i];
                    }
                }
                if let Some(db) = buf!(*b) {
                    for i in 0..dy.len() {
                        db[i] += dy[i] * av[i];
                    }
                }
            }
            Op::MulCol { x, s } => {
                let sv = val(*s).to_vec();
                let xv = val(*x).to_vec();
                if let Some(dx) = buf!(*x) {
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] += dy[r * cols + c] * sv[r];
                        }
                    }
                }
                if let Some(ds) = buf!(*s) {
                    for r in 0..rows {
                        let mut acc = T::zero();
                        for c in 0..cols {
                            acc += dy[r * cols + c] * xv[r * cols + c];
                        }
                        ds[r] += acc;
                    }
                }
            }
            Op::ScaleRows { x, c } => {
                if let Some(dx) = buf!(*x) {
                    for r in 0..rows {
                        for k in 0..cols {
                            dx[r * cols + k] += dy[r * cols + k] * c[r];
                        }
                    }
                }
            }
            Op::Alpha { sigma, delta } => {
                if let Some(ds) = buf!(*sigma) {
                    for i in 0..rows {
                        // d alpha / d sigma = delta exp(-sigma delta) = delta (1 - alpha)
                        ds[i] += dy[i] * delta[i] * (T::one() - node.value[i]);
                    }
                }
            }
            Op::Transmittance { alpha, segments } => {
                let av = val(*alpha);
                if let Some(da) = buf!(*alpha) {
                    for range in segment_ranges(segments) {
                        // S_j = sum_{i>j} dTr_i prod_{j<k<i} (1 - alpha_k)
                        let mut s = T::zero();
                        for j in range.rev() {
                            da[j] -= node.value[j] * s;
                            s = dy[j] + (T::one() - av[j]) * s;
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                if let Some(dx) = buf!(*x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            dx[i * cols + c] += dy[r * cols + c];
                        }
                    }
                }
            }
            Op::SegmentSum { x, segments } => {
                if let Some(dx) = buf!(*x) {
                    for (s, range) in segment_ranges(segments).enumerate() {
                        for i in range {
                            for c in 0..cols {
                                dx[i * cols + c] += dy[s * cols + c];
                            }
                        }
                    }
                }
            }
            Op::SafeDiv { a, b, eps } => {
                let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
                if let Some(da) = buf!(*a) {
                    for i in 0..dy.len() {
                        da[i] += dy[i] / bv[i].max(*eps);
                    }
                }
                if let Some(db) = buf!(*b) {
                    for i in 0..dy.len() {
                        if bv[i] > *eps {
                            db[i] -= dy[i] * av[i] / (bv[i] * bv[i]);
                        }
                    }
                }
            }
            Op::Ambient { lam, camb } => {
                let (lv, cv) = (val(*lam).to_vec(), val(*camb).to_vec());
                if let Some(dl) = buf!(*lam) {
                    for r in 0..rows {
                        for k in 0..3 {
                            dl[r] += dy[r * 3 + k] * (T::one() - cv[r * 3 + k]);
                        }
                    }
                }
                if let Some(dc) = buf!(*camb) {
                    for r in 0..rows {
                        for k in 0..3 {
                            dc[r * 3 + k] += dy[r * 3 + k] * (T::one() - lv[r]);
                        }
                    }
                }
            }
            Op::Mse { x, target, norm } => {
                let xv = val(*x);
                if let Some(dx) = buf!(*x) {
                    let k = dy[0] * T::c(2.0) / *norm;
                    for i in 0..target.len() {
                        dx[i] += k * (xv[i] - target[i]);
                    }
                }
            }
            Op::NormalLoss { n, w, dirs, scale } => {
                let (nv, wv) = (val(*n).to_vec(), val(*w).to_vec());
                let m = wv.len();
                let cos: Vec<T> = (0..m)
                    .map(|i| {
                        let d = &dirs[i];
                        (nv[i * 3] * d[0] + nv[i * 3 + 1] * d[1] + nv[i * 3 + 2] * d[2]).max(T::zero())
                    })
                    .collect();
                if let Some(dn) = buf!(*n) {
                    for i in 0..m {
                        let k = dy[0] * scale[i] * wv[i] * T::c(2.0) * cos[i];
                        for j in 0..3 {
                            dn[i * 3 + j] += k * dirs[i][j];
                        }
                    }
                }
                if let Some(dw) = buf!(*w) {
                    for i in 0..m {
                        dw[i] += dy[0] * scale[i] * cos[i] * cos[i];
                    }
                }
            }
            Op::LambAmb { tr, alpha, lam, segments, norm } => {
                let (t, a, l) = (val(*tr).to_vec(), val(*alpha).to_vec(), val(*lam).to_vec());
                let k = dy[0] / *norm;
                let n = *segments.last().unwrap_or(&0);
                if let Some(dt) = buf!(*tr) {
                    for i in 0..n {
                        dt[i] += k * (T::c(2.0) * (t[i] - l[i]) - a[i] * l[i]);
                    }
                }
                if let Some(da) = buf!(*alpha) {
                    for i in 0..n {
                        da[i] -= k * t[i] * l[i];
                    }
                }
                if let Some(dl) = buf!(*lam) {
                    for i in 0..n {
                        dl[i] -= k * (T::c(2.0) * (t[i] - l[i]) + t[i] * a[i]);
                    }
                }
            }
            Op::DepthLoss { h, target, weight, norm } => {
                let hv = val(*h);
                if let Some(dh) = buf!(*h) {
                    for i in 0..target.len() {
                        dh[i] += dy[0] * T::c(2.0) * weight[i] * (hv[i] - target[i]) / *norm;
                    }
                }
            }
            Op::Regularizer { kind, reg, all_planes } => {
                let f = self.model.field(*kind);
                let gf = grads.field_mut(*kind);
                match reg {
                    Regularizer::Tv => loss_tv_backward(f, *all_planes, dy[0], gf),
                    Regularizer::L1 => loss_l1_backward(f, dy[0], gf),
                    Regularizer::None => {}
                }
            }
            Op::WeightedSum { terms } => {
                for (id, c) in terms {
                    if let Some(d) = buf!(*id) {
                        d[0] += dy[0] * *c;
                    }
                }
            }
        }
    }
}

/// ASG lobe `i` for one direction and raw lobe parameters: returns
/// `(G, w . t_lambda, w . t_mu)` or `None` when the axis gate is closed.
#[inline]
fn asg_term<T: Real>(lobes: &AsgLobes, i: usize, w: &[T; 3], lobe: &[T], dim: usize) -> Option<(T, T, T)> {
    let (gate, a, b) = lobes.projections(i, w);
    if gate <= T::zero() {
        return None;
    }
    let lambda = softplus(lobe[dim]) + T::c(BANDWIDTH_FLOOR);
    let mu = softplus(lobe[dim + 1]) + T::c(BANDWIDTH_FLOOR);
    Some((gate * (-(lambda * a * a) - mu * b * b).exp(), a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::geometry::{SceneBounds, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> RadianceModel<f64> {
        let cfg = Config::from_text(
            "field.L = 2\nfield.base_res = 3\nfield.max_res = 4\nfield.ambient_res = 3\n\
             light.head_a_width = 6\nlight.head_b_width = 5\nlight.head_d_width = 5\n\
             light.lobes = 3\nlight.asg_dim = 2\nfield.R = 2\nfield.C = 2",
        )
        .unwrap();
        let b = SceneBounds::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        RadianceModel::new(&cfg, b, &mut ChaCha8Rng::seed_from_u64(0))
    }

    /// Central differences of `f` with respect to every entry of a leaf.
    fn leaf_fd(values: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..values.len())
            .map(|i| {
                let mut p = values.to_vec();
                p[i] += 1e-6;
                let mut m = values.to_vec();
                m[i] -= 1e-6;
                (f(&p) - f(&m)) / 2e-6
            })
            .collect()
    }

    fn check_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(err < tol, "entry {i}: analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn square_toy() {
        let model = tiny_model();
        let mut tape = Tape::new(&model);
        let x = tape.leaf("theta", 1, 1, vec![3.0], true).unwrap();
        let y = tape.mul("square", x, x).unwrap();
        let mut grads = model.zeros_like();
        let g = tape.backward(y, &mut grads).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn transmittance_gradient() {
        let model = tiny_model();
        let alpha = vec![0.2, 0.5, 0.9, 0.3, 0.0, 0.7];
        let seg = vec![0, 4, 6];
        let weights = [0.3, -1.2, 0.8, 2.0, 0.5, -0.4];
        let run = |a: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new(&model);
            let x = tape.leaf("alpha", 6, 1, a.to_vec(), true).unwrap();
            let tr = tape.transmittance("tr", x, seg.clone()).unwrap();
            let w = tape.mul("w", tr, x).unwrap();
            let l = tape.leaf("c", 6, 1, weights.to_vec(), false).unwrap();
            let p = tape.mul("p", w, l).unwrap();
            let p = tape.mul("p2", p, tr).unwrap();
            let s = tape.segment_sum("s", p, vec![0, 6]).unwrap();
            let mut grads = model.zeros_like();
            let g = tape.backward(s, &mut grads).unwrap();
            (tape.scalar(s), g.get(x).unwrap().to_vec())
        };
        let (_, analytic) = run(&alpha);
        check_close(&analytic, &leaf_fd(&alpha, |a| run(a).0), 1e-7);
    }

    #[test]
    fn elementwise_ops_gradients() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let dirs: Vec<[f64; 3]> = (0..4).map(|i| [0.3 * i as f64, -0.5, 0.8]).collect();
        let f = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut t = Tape::new(&model);
            let a = t.leaf("x", 4, 3, x.to_vec(), true).unwrap();
            let n = t.normalize("n", a).unwrap();
            let s = t.act("s", a, Act::Sigmoid).unwrap();
            let sp = t.act("sp", a, Act::Softplus).unwrap();
            let lam = t.columns("lam", s, 1, 1).unwrap();
            let amb = t.ambient("amb", lam, sp).unwrap();
            let prod = t.mul("prod", amb, n).unwrap();
            let dot = t.dot_const("dot", n, dirs.clone()).unwrap();
            let sig = t.act("sig", dot, Act::Softplus).unwrap();
            let al = t.alpha("alpha", sig, vec![0.5; 4]).unwrap();
            let mc = t.mul_col("mc", prod, al).unwrap();
            let cat = t.concat("cat", mc, s).unwrap();
            let rm = t.row_mean("rm", cat, 2.0).unwrap();
            let num = t.segment_sum("num", rm, vec![0, 2, 4]).unwrap();
            let den = t.segment_sum("den", al, vec![0, 2, 4]).unwrap();
            let q = t.safe_div("q", num, den, 1e-10).unwrap();
            let m = t.mse("mse", q, vec![0.1, 0.2], 2.0).unwrap();
            let nl = t.normal_loss("nl", n, al, dirs.clone(), vec![0.5; 4]).unwrap();
            let tot = t.weighted_sum("tot", vec![(m, 1.0), (nl, 0.7)]).unwrap();
            let mut g = model.zeros_like();
            let grads = t.backward(tot, &mut g).unwrap();
            (t.scalar(tot), grads.get(a).unwrap().to_vec())
        };
        let (_, analytic) = f(&x0);
        check_close(&analytic, &leaf_fd(&x0, |x| f(x).0), 1e-6);
    }

    #[test]
    fn lamb_amb_gradient() {
        let model = tiny_model();
        let tr = vec![1.0, 0.7, 0.2, 1.0, 0.4];
        let alpha = vec![0.3, 0.6, 0.5, 0.6, 0.1];
        let lam = vec![0.9, 0.5, 0.3, 0.2, 0.8];
        let seg = vec![0, 3, 3, 5];
        let mut x0 = tr.clone();
        x0.extend(&alpha);
        x0.extend(&lam);
        let f = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut t = Tape::new(&model);
            let a = t.leaf("tr", 5, 1, x[..5].to_vec(), true).unwrap();
            let b = t.leaf("alpha", 5, 1, x[5..10].to_vec(), true).unwrap();
            let c = t.leaf("lam", 5, 1, x[10..].to_vec(), true).unwrap();
            let l = t.lamb_amb("l", a, b, c, seg.clone(), 2.0).unwrap();
            let mut g = model.zeros_like();
            let gr = t.backward(l, &mut g).unwrap();
            let mut out = gr.get(a).unwrap().to_vec();
            out.extend(gr.get(b).unwrap());
            out.extend(gr.get(c).unwrap());
            (t.scalar(l), out)
        };
        let (v, analytic) = f(&x0);
        let expect = (crate::losses::loss_lambda_amb(&tr[..3], &alpha[..3], &lam[..3])
            + crate::losses::loss_lambda_amb(&tr[3..], &alpha[3..], &lam[3..]))
            / 2.0;
        assert!((v - expect).abs() < 1e-15);
        check_close(&analytic, &leaf_fd(&x0, |x| f(x).0), 1e-6);
    }

    #[test]
    fn nan_names_node() {
        let model = tiny_model();
        let mut tape = Tape::new(&model);
        let x = tape.leaf("x", 1, 1, vec![1.0], true).unwrap();
        let z = tape.leaf("zero", 1, 1, vec![0.0], false).unwrap();
        let err = tape.safe_div("ratio", x, z, 0.0).unwrap_err();
        assert!(err.to_string().contains("ratio"), "{err}");
    }
}
