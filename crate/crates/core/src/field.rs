//! Low-rank multiscale tensor fields.
//!
//! A level stores either a vector-matrix (VM) or CP factorization of a
//! `channels`-channel 3D grid. Factor grids keep the `channels * rank`
//! coefficients of one grid node contiguous, so interpolating a node touches
//! one short run of memory.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::{sigmoid, softplus, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decomposition {
    Vm,
    Cp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Level outputs are stacked: `levels * channels` features.
    Concat,
    /// Level outputs are averaged, then activated: `channels` features.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Softplus,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::None => x,
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the input.
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::None => T::one(),
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
        }
    }
}

/// Axis pairs spanned by the plane factors, indexed by the axis of the
/// matching line factor: YZ pairs with X, XZ with Y, XY with Z.
pub const PLANE_AXES: [(usize, usize); 3] = [(1, 2), (0, 2), (0, 1)];
const LINE_NAMES: [&str; 3] = ["line_x", "line_y", "line_z"];
const PLANE_NAMES: [&str; 3] = ["plane_yz", "plane_xz", "plane_xy"];

/// One level of a factorized field.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorLevel<T> {
    pub kind: Decomposition,
    pub res: [usize; 3],
    pub rank: usize,
    pub channels: usize,
    /// `lines[a]` has shape `[res[a], channels * rank]`.
    pub lines: [Vec<T>; 3],
    /// `planes[a]` has shape `[res[u], res[v], channels * rank]` with
    /// `(u, v) = PLANE_AXES[a]`. Empty for CP levels.
    pub planes: [Vec<T>; 3],
}

/// Linear interpolation stencil along one axis, clamp-to-edge.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil<T> {
    pub i0: usize,
    pub i1: usize,
    pub w0: T,
    pub w1: T,
}

impl<T: Real> Stencil<T> {
    #[inline]
    pub(crate) fn new(x: T, n: usize) -> Self {
        if n < 2 {
            return Self {
                i0: 0,
                i1: 0,
                w0: T::one(),
                w1: T::zero(),
            };
        }
        let pos = x.max(T::zero()).min(T::one()) * T::c((n - 1) as f64);
        let i0 = pos.floor().to_usize().unwrap_or(0).min(n - 2);
        let w1 = (pos - T::c(i0 as f64)).max(T::zero()).min(T::one());
        Self {
            i0,
            i1: i0 + 1,
            w0: T::one() - w1,
            w1,
        }
    }
}

impl<T: Real> TensorLevel<T> {
    pub fn zeros(kind: Decomposition, res: [usize; 3], rank: usize, channels: usize) -> Self {
        let cr = channels * rank;
        let lines = [0, 1, 2].map(|a| vec![T::zero(); res[a] * cr]);
        let planes = [0, 1, 2].map(|a| match kind {
            Decomposition::Vm => {
                let (u, v) = PLANE_AXES[a];
                vec![T::zero(); res[u] * res[v] * cr]
            }
            Decomposition::Cp => Vec::new(),
        });
        Self {
            kind,
            res,
            rank,
            channels,
            lines,
            planes,
        }
    }

    /// Factors drawn from `N(0, std / sqrt(rank))`.
    pub fn random<R: Rng + ?Sized>(
        kind: Decomposition,
        res: [usize; 3],
        rank: usize,
        channels: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut level = Self::zeros(kind, res, rank, channels);
        let normal = Normal::new(0.0, std / (rank as f64).sqrt()).expect("finite std");
        for grid in level.grids_mut() {
            for v in grid.iter_mut() {
                *v = T::c(normal.sample(rng));
            }
        }
        level
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.kind, self.res, self.rank, self.channels)
    }

    #[inline]
    pub fn cr(&self) -> usize {
        self.channels * self.rank
    }

    pub fn param_count(&self) -> usize {
        let [nx, ny, nz] = self.res;
        let lines = nx + ny + nz;
        let planes = match self.kind {
            Decomposition::Vm => ny * nz + nx * nz + nx * ny,
            Decomposition::Cp => 0,
        };
        self.cr() * (lines + planes)
    }

    /// Grids in a fixed order: lines x, y, z then (VM only) planes yz, xz, xy.
    pub fn grids(&self) -> impl Iterator<Item = (&'static str, &Vec<T>)> {
        let n = self.active_planes();
        LINE_NAMES
            .iter()
            .copied()
            .zip(self.lines.iter())
            .chain(PLANE_NAMES.iter().copied().zip(self.planes.iter()).take(n))
    }

    pub fn grids_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        let n = self.active_planes();
        self.lines.iter_mut().chain(self.planes.iter_mut().take(n))
    }

    fn active_planes(&self) -> usize {
        match self.kind {
            Decomposition::Vm => 3,
            Decomposition::Cp => 0,
        }
    }

    /// Shape of a named grid, as stored.
    pub fn grid_shape(&self, name: &str) -> Vec<usize> {
        if let Some(a) = LINE_NAMES.iter().position(|n| *n == name) {
            return vec![self.res[a], self.channels, self.rank];
        }
        let a = PLANE_NAMES.iter().position(|n| *n == name).expect("known grid");
        let (u, v) = PLANE_AXES[a];
        vec![self.res[u], self.res[v], self.channels, self.rank]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.res == other.res
            && self.rank == other.rank
            && self.channels == other.channels
    }

    fn stencils(&self, p: &[T; 3]) -> [Stencil<T>; 3] {
        [0, 1, 2].map(|a| Stencil::new(p[a], self.res[a]))
    }

    /// Per-rank products before the rank sum, written into `acc`
    /// (`channels * rank` long).
    #[inline]
    fn rank_terms(&self, st: &[Stencil<T>; 3], acc: &mut [T]) {
        let cr = self.cr();
        match self.kind {
            Decomposition::Vm => {
                acc.fill(T::zero());
                for a in 0..3 {
                    let s = st[a];
                    let line = &self.lines[a];
                    let l0 = &line[s.i0 * cr..s.i0 * cr + cr];
                    let l1 = &line[s.i1 * cr..s.i1 * cr + cr];
                    let (u, v) = PLANE_AXES[a];
                    let (su, sv) = (st[u], st[v]);
                    let nv = self.res[v];
                    let plane = &self.planes[a];
                    let at = |iu: usize, iv: usize| &plane[(iu * nv + iv) * cr..(iu * nv + iv) * cr + cr];
                    let p00 = at(su.i0, sv.i0);
                    let p01 = at(su.i0, sv.i1);
                    let p10 = at(su.i1, sv.i0);
                    let p11 = at(su.i1, sv.i1);
                    let w00 = su.w0 * sv.w0;
                    let w01 = su.w0 * sv.w1;
                    let w10 = su.w1 * sv.w0;
                    let w11 = su.w1 * sv.w1;
                    for k in 0..cr {
                        let l = s.w0 * l0[k] + s.w1 * l1[k];
                        let pl = w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k];
                        acc[k] += l * pl;
                    }
                }
            }
            Decomposition::Cp => {
                acc.fill(T::one());
                for a in 0..3 {
                    let s = st[a];
                    let line = &self.lines[a];
                    let l0 = &line[s.i0 * cr..s.i0 * cr + cr];
                    let l1 = &line[s.i1 * cr..s.i1 * cr + cr];
                    for k in 0..cr {
                        acc[k] *= s.w0 * l0[k] + s.w1 * l1[k];
                    }
                }
            }
        }
    }

    /// Adds `scale * value` for every channel into `out[..channels]`.
    #[inline]
    fn accumulate(&self, p: &[T; 3], scale: T, acc: &mut [T], out: &mut [T]) {
        let st = self.stencils(p);
        self.rank_terms(&st, acc);
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let s: T = acc[c * self.rank..(c + 1) * self.rank].iter().copied().sum();
            *o += scale * s;
        }
    }

    /// Value of every channel at `p`.
    pub fn sample(&self, p: &[T; 3]) -> Vec<T> {
        let mut acc = vec![T::zero(); self.cr()];
        let mut out = vec![T::zero(); self.channels];
        self.accumulate(p, T::one(), &mut acc, &mut out);
        out
    }

    /// Scatters `d value_c / d factor * upstream[c]` into `grads`.
    /// `scratch` holds at least `3 * channels * rank` values.
    fn backward_point(&self, p: &[T; 3], upstream: &[T], grads: &mut Self, scratch: &mut [T]) {
        let cr = self.cr();
        let r = self.rank;
        let (gexp, rest) = scratch.split_at_mut(cr);
        let (ta, tb) = rest.split_at_mut(cr);
        let tb = &mut tb[..cr];
        for (k, g) in gexp.iter_mut().enumerate() {
            *g = upstream[k / r];
        }
        if gexp.iter().all(|g| *g == T::zero()) {
            return;
        }
        let add = |dst: &mut [T], w: T, src: &[T]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * *s;
            }
        };
        let st = self.stencils(p);
        match self.kind {
            Decomposition::Vm => {
                for a in 0..3 {
                    let s = st[a];
                    let (u, v) = PLANE_AXES[a];
                    let (su, sv) = (st[u], st[v]);
                    let nv = self.res[v];
                    let off = |iu: usize, iv: usize| (iu * nv + iv) * cr;
                    let o = [
                        off(su.i0, sv.i0),
                        off(su.i0, sv.i1),
                        off(su.i1, sv.i0),
                        off(su.i1, sv.i1),
                    ];
                    let w = [su.w0 * sv.w0, su.w0 * sv.w1, su.w1 * sv.w0, su.w1 * sv.w1];
                    let plane = &self.planes[a];
                    let line = &self.lines[a];
                    let (p00, p01, p10, p11) = (
                        &plane[o[0]..][..cr],
                        &plane[o[1]..][..cr],
                        &plane[o[2]..][..cr],
                        &plane[o[3]..][..cr],
                    );
                    let (l0, l1) = (&line[s.i0 * cr..][..cr], &line[s.i1 * cr..][..cr]);
                    // ta: gradient reaching the line value, tb: reaching the plane value.
                    for k in 0..cr {
                        ta[k] = gexp[k] * (w[0] * p00[k] + w[1] * p01[k] + w[2] * p10[k] + w[3] * p11[k]);
                        tb[k] = gexp[k] * (s.w0 * l0[k] + s.w1 * l1[k]);
                    }
                    let gline = &mut grads.lines[a];
                    add(&mut gline[s.i0 * cr..][..cr], s.w0, ta);
                    add(&mut gline[s.i1 * cr..][..cr], s.w1, ta);
                    let gplane = &mut grads.planes[a];
                    for c in 0..4 {
                        add(&mut gplane[o[c]..][..cr], w[c], tb);
                    }
                }
            }
            Decomposition::Cp => {
                let interp = |a: usize, k: usize| {
                    let s = st[a];
                    s.w0 * self.lines[a][s.i0 * cr + k] + s.w1 * self.lines[a][s.i1 * cr + k]
                };
                for k in 0..cr {
                    let l = [interp(0, k), interp(1, k), interp(2, k)];
                    for a in 0..3 {
                        let others = l[(a + 1) % 3] * l[(a + 2) % 3];
                        let g = gexp[k] * others;
                        let s = st[a];
                        grads.lines[a][s.i0 * cr + k] += s.w0 * g;
                        grads.lines[a][s.i1 * cr + k] += s.w1 * g;
                    }
                }
            }
        }
    }
}

/// Value of channel `c` of a VM level at `p`.
pub fn sample_vm<T: Real>(level: &TensorLevel<T>, p: &[T; 3], c: usize) -> T {
    debug_assert_eq!(level.kind, Decomposition::Vm);
    level.sample(p)[c]
}

/// Value of channel `c` of a CP level at `p`.
pub fn sample_cp<T: Real>(level: &TensorLevel<T>, p: &[T; 3], c: usize) -> T {
    debug_assert_eq!(level.kind, Decomposition::Cp);
    level.sample(p)[c]
}

/// Accumulates the gradient of channel `c` at `p`, scaled by `upstream`.
pub fn backward_sample<T: Real>(
    level: &TensorLevel<T>,
    p: &[T; 3],
    c: usize,
    upstream: T,
    grads: &mut TensorLevel<T>,
) -> Result<()> {
    if !level.same_shape(grads) {
        return Err(Error::ShapeMismatch(format!(
            "gradient level {:?}x{}x{} does not match field level {:?}x{}x{}",
            grads.res, grads.channels, grads.rank, level.res, level.channels, level.rank
        )));
    }
    if c >= level.channels {
        return Err(Error::ShapeMismatch(format!(
            "channel {c} out of range for {} channels",
            level.channels
        )));
    }
    let mut up = vec![T::zero(); level.channels];
    up[c] = upstream;
    let mut scratch = vec![T::zero(); 3 * level.cr()];
    level.backward_point(p, &up, grads, &mut scratch);
    Ok(())
}

/// Per-level grid sizes growing geometrically from `base` to `max`.
pub fn level_resolutions(base: usize, max: usize, levels: usize) -> Vec<usize> {
    assert!(levels >= 1 && base >= 1 && base <= max);
    if levels == 1 {
        return vec![max];
    }
    let b = (max as f64 / base as f64).powf(1.0 / (levels - 1) as f64);
    let mut out: Vec<usize> = (0..levels)
        .map(|l| (base as f64 * b.powi(l as i32)).round() as usize)
        .collect();
    out[0] = base;
    out[levels - 1] = max;
    for l in 1..levels {
        out[l] = out[l].max(out[l - 1]);
    }
    out
}

/// Several factorized levels sampled together.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleField<T> {
    pub levels: Vec<TensorLevel<T>>,
    pub aggregation: Aggregation,
    pub activation: Activation,
}

/// Gradient buffers shaped like the field they belong to.
pub type FieldGradients<T> = MultiscaleField<T>;

impl<T: Real> MultiscaleField<T> {
    pub fn new(
        levels: Vec<TensorLevel<T>>,
        aggregation: Aggregation,
        activation: Activation,
    ) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::ShapeMismatch("a field needs at least one level".into()))?;
        for pair in levels.windows(2) {
            if pair[1].channels != first.channels {
                return Err(Error::ShapeMismatch("levels disagree on channel count".into()));
            }
            if (0..3).any(|a| pair[1].res[a] < pair[0].res[a]) {
                return Err(Error::ShapeMismatch("level resolutions must not decrease".into()));
            }
        }
        Ok(Self {
            levels,
            aggregation,
            activation,
        })
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels
    }

    pub fn out_dim(&self) -> usize {
        match self.aggregation {
            Aggregation::Concat => self.levels.len() * self.channels(),
            Aggregation::Mean => self.channels(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            levels: self.levels.iter().map(TensorLevel::zeros_like).collect(),
            aggregation: self.aggregation,
            activation: self.activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.levels.iter().map(TensorLevel::param_count).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.levels.len() == other.levels.len()
            && self.levels.iter().zip(&other.levels).all(|(a, b)| a.same_shape(b))
    }

    fn level_scale(&self) -> T {
        match self.aggregation {
            Aggregation::Concat => T::one(),
            Aggregation::Mean => T::one() / T::c(self.levels.len() as f64),
        }
    }

    fn level_offset(&self, l: usize) -> usize {
        match self.aggregation {
            Aggregation::Concat => l * self.channels(),
            Aggregation::Mean => 0,
        }
    }

    /// Aggregated features before the activation.
    pub fn sample_raw(&self, p: &[T; 3]) -> Vec<T> {
        let mut out = vec![T::zero(); self.out_dim()];
        let mut acc = vec![T::zero(); self.levels.iter().map(|l| l.cr()).max().unwrap_or(0)];
        let scale = self.level_scale();
        for (l, level) in self.levels.iter().enumerate() {
            let off = self.level_offset(l);
            level.accumulate(p, scale, &mut acc[..level.cr()], &mut out[off..]);
        }
        out
    }

    /// Features at `p` with the field's activation applied.
    pub fn sample(&self, p: &[T; 3]) -> Vec<T> {
        let mut v = self.sample_raw(p);
        for x in &mut v {
            *x = self.activation.apply(*x);
        }
        v
    }

    /// Raw features for a batch of points, row-major `[points.len(), out_dim]`.
    pub fn forward_batch(&self, points: &[[T; 3]], out: &mut [T]) {
        let dim = self.out_dim();
        assert_eq!(out.len(), points.len() * dim);
        out.fill(T::zero());
        let scale = self.level_scale();
        let mut acc = vec![T::zero(); self.levels.iter().map(|l| l.cr()).max().unwrap_or(0)];
        for (l, level) in self.levels.iter().enumerate() {
            let off = self.level_offset(l);
            let acc = &mut acc[..level.cr()];
            for (p, row) in points.iter().zip(out.chunks_exact_mut(dim)) {
                level.accumulate(p, scale, acc, &mut row[off..]);
            }
        }
    }

    /// Accumulates gradients of the raw features into `grads`, given the
    /// upstream gradient `[points.len(), out_dim]`.
    pub fn backward_batch(&self, points: &[[T; 3]], upstream: &[T], grads: &mut Self) {
        let dim = self.out_dim();
        assert_eq!(upstream.len(), points.len() * dim);
        let scale = self.level_scale();
        let c = self.channels();
        let mut up = vec![T::zero(); c];
        for (l, (level, glevel)) in self.levels.iter().zip(grads.levels.iter_mut()).enumerate() {
            let off = self.level_offset(l);
            let mut scratch = vec![T::zero(); 3 * level.cr()];
            for (p, row) in points.iter().zip(upstream.chunks_exact(dim)) {
                for (u, g) in up.iter_mut().zip(&row[off..off + c]) {
                    *u = *g * scale;
                }
                level.backward_point(p, &up, glevel, &mut scratch);
            }
        }
    }

    /// Named grids in a stable order: `level<l>/<grid>`.
    pub fn grids(&self) -> Vec<(String, Vec<usize>, &Vec<T>)> {
        let mut out = Vec::new();
        for (l, level) in self.levels.iter().enumerate() {
            for (name, grid) in level.grids() {
                out.push((format!("level{l}/{name}"), level.grid_shape(name), grid));
            }
        }
        out
    }

    pub fn grids_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.levels.iter_mut().flat_map(|l| l.grids_mut()).collect()
    }
}

/// Dense `[nx, ny, nz, channels]` materialization by summing factor outer
/// products at the grid nodes. Test oracle; cubic in the resolution.
pub fn materialize<T: Real>(level: &TensorLevel<T>) -> Vec<T> {
    let [nx, ny, nz] = level.res;
    let (cr, r) = (level.cr(), level.rank);
    let mut out = vec![T::zero(); nx * ny * nz * level.channels];
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let idx = [i, j, k];
                for c in 0..level.channels {
                    let mut v = T::zero();
                    for rr in 0..r {
                        let q = c * r + rr;
                        let line = |a: usize| level.lines[a][idx[a] * cr + q];
                        match level.kind {
                            Decomposition::Vm => {
                                for a in 0..3 {
                                    let (u, w) = PLANE_AXES[a];
                                    let plane =
                                        level.planes[a][(idx[u] * level.res[w] + idx[w]) * cr + q];
                                    v += line(a) * plane;
                                }
                            }
                            Decomposition::Cp => v += line(0) * line(1) * line(2),
                        }
                    }
                    out[((i * ny + j) * nz + k) * level.channels + c] = v;
                }
            }
        }
    }
    out
}
