//! Supervision terms and their weighted total.

use crate::error::{Error, Result};
use crate::field::{MultiscaleField, TensorLevel, PLANE_AXES};
use crate::geometry::DepthPoint;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rgb: f64,
    pub tv: f64,
    pub normal: f64,
    pub lamb: f64,
    pub ds: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 1.0,
            tv: 1.0,
            normal: 0.01,
            lamb: 0.05,
            ds: 0.1,
        }
    }
}

impl LossWeights {
    pub const ZERO: Self = Self {
        rgb: 0.0,
        tv: 0.0,
        normal: 0.0,
        lamb: 0.0,
        ds: 0.0,
    };
}

/// Penalty applied to the density factors. `w_tv` weights whichever is
/// selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularizer {
    Tv,
    L1,
    None,
}

impl Regularizer {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tv" => Some(Self::Tv),
            "l1" => Some(Self::L1),
            "none" => Some(Self::None),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Tv => "tv",
            Self::L1 => "l1",
            Self::None => "none",
        }
    }
}

/// Loss components of one step. `tv` holds the value of the configured
/// regularizer.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub rgb: f64,
    pub tv: f64,
    pub normal: f64,
    pub lamb: f64,
    pub ds: f64,
    pub total: f64,
}

impl LossReport {
    pub fn components(&self) -> [(&'static str, f64); 5] {
        [
            ("rgb", self.rgb),
            ("tv", self.tv),
            ("normal", self.normal),
            ("lamb", self.lamb),
            ("ds", self.ds),
        ]
    }
}

/// Weighted sum of the components. Fails on the first non-finite one.
pub fn total_loss(report: &LossReport, w: &LossWeights) -> Result<f64> {
    for (name, v) in report.components() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component `{name}`")));
        }
    }
    Ok(w.rgb * report.rgb
        + w.tv * report.tv
        + w.normal * report.normal
        + w.lamb * report.lamb
        + w.ds * report.ds)
}

/// Mean over rays of the squared color error.
pub fn loss_rgb<T: Real>(pred: &[[T; 3]], gt: &[[T; 3]]) -> Result<T> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Ok(T::zero());
    }
    let s: T = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (0..3).map(|k| (p[k] - g[k]) * (p[k] - g[k])).sum::<T>())
        .sum();
    Ok(s / T::c(pred.len() as f64))
}

/// Planes of a level that the TV term covers.
fn tv_planes(all_planes: bool) -> &'static [usize] {
    if all_planes {
        &[0, 1, 2]
    } else {
        &[2]
    }
}

/// Sum of squared adjacent differences over one plane grid stored
/// `[nu, nv, cr]`. With `grad`, adds `scale * d` to the later entry of each
/// pair and subtracts it from the earlier one.
fn plane_sq_diff<T: Real>(
    plane: &[T],
    nu: usize,
    nv: usize,
    cr: usize,
    scale: T,
    grad: Option<&mut [T]>,
) -> T {
    let mut sum = T::zero();
    let idx = |u: usize, v: usize, k: usize| (u * nv + v) * cr + k;
    let mut grad = grad;
    for u in 0..nu {
        for v in 0..nv {
            for k in 0..cr {
                let here = plane[idx(u, v, k)];
                for (du, dv) in [(1, 0), (0, 1)] {
                    if u + du >= nu || v + dv >= nv {
                        continue;
                    }
                    let j = idx(u + du, v + dv, k);
                    let d = plane[j] - here;
                    sum += d * d;
                    if let Some(g) = grad.as_deref_mut() {
                        g[j] += scale * d;
                        g[idx(u, v, k)] -= scale * d;
                    }
                }
            }
        }
    }
    sum
}

/// Squared norm of the level's difference vector over the covered planes.
fn level_sq_diff<T: Real>(level: &TensorLevel<T>, all_planes: bool) -> T {
    let mut s = T::zero();
    if level.planes[2].is_empty() {
        return s;
    }
    for &a in tv_planes(all_planes) {
        let (u, v) = PLANE_AXES[a];
        s += plane_sq_diff(&level.planes[a], level.res[u], level.res[v], level.cr(), T::zero(), None);
    }
    s
}

/// Total variation of the density planes: per level, the Euclidean norm of
/// all adjacent differences of the XY planes (or all three orientations),
/// averaged over levels. CP fields have no planes and give zero.
pub fn loss_tv<T: Real>(field: &MultiscaleField<T>, all_planes: bool) -> T {
    let s: T = field.levels.iter().map(|l| level_sq_diff(l, all_planes).sqrt()).sum();
    s / T::c(field.levels.len() as f64)
}

/// Accumulates `scale * d loss_tv / d factor` into `grads`. A level whose
/// planes are constant has no defined gradient and contributes none.
pub fn loss_tv_backward<T: Real>(
    field: &MultiscaleField<T>,
    all_planes: bool,
    scale: T,
    grads: &mut MultiscaleField<T>,
) {
    let s = scale / T::c(field.levels.len() as f64);
    for (level, glevel) in field.levels.iter().zip(grads.levels.iter_mut()) {
        let norm = level_sq_diff(level, all_planes).sqrt();
        if !(norm > T::zero()) {
            continue;
        }
        for &a in tv_planes(all_planes) {
            let (u, v) = PLANE_AXES[a];
            let cr = level.cr();
            plane_sq_diff(&level.planes[a], level.res[u], level.res[v], cr, s / norm, Some(&mut glevel.planes[a]));
        }
    }
}

fn entry_count<T: Real>(field: &MultiscaleField<T>) -> usize {
    field.levels.iter().map(TensorLevel::param_count).sum()
}

/// Mean absolute value over every factor entry of the field.
pub fn loss_l1<T: Real>(field: &MultiscaleField<T>) -> T {
    let n = entry_count(field);
    if n == 0 {
        return T::zero();
    }
    let s: T = field
        .levels
        .iter()
        .flat_map(|l| l.grids().map(|(_, g)| g.iter().map(|v| v.abs()).sum::<T>()))
        .sum();
    s / T::c(n as f64)
}

/// Subgradient of [`loss_l1`], using `sign(0) = 0`.
pub fn loss_l1_backward<T: Real>(field: &MultiscaleField<T>, scale: T, grads: &mut MultiscaleField<T>) {
    let n = entry_count(field);
    if n == 0 {
        return;
    }
    let s = scale / T::c(n as f64);
    for (level, glevel) in field.levels.iter().zip(grads.levels.iter_mut()) {
        for ((_, g), gg) in level.grids().zip(glevel.grids_mut()) {
            for (v, gv) in g.iter().zip(gg.iter_mut()) {
                if *v > T::zero() {
                    *gv += s;
                } else if *v < T::zero() {
                    *gv -= s;
                }
            }
        }
    }
}

/// Orientation penalty for one ray: `(1/N) sum w_i max(0, d . n_i)^2`.
pub fn loss_normal<T: Real>(normals: &[[T; 3]], weights: &[T], view: &[T; 3]) -> T {
    if normals.is_empty() {
        return T::zero();
    }
    let s: T = normals
        .iter()
        .zip(weights)
        .map(|(n, w)| {
            let d = (n[0] * view[0] + n[1] * view[1] + n[2] * view[2]).max(T::zero());
            *w * d * d
        })
        .sum();
    s / T::c(normals.len() as f64)
}

/// Ambient-factor term for one ray:
/// `sum (Tr_i - lambda_i)^2 + 1 - sum Tr_i alpha_i lambda_i`.
pub fn loss_lambda_amb<T: Real>(tr: &[T], alpha: &[T], lamb: &[T]) -> T {
    let mut sq = T::zero();
    let mut lit = T::zero();
    for ((t, a), l) in tr.iter().zip(alpha).zip(lamb) {
        sq += (*t - *l) * (*t - *l);
        lit += *t * *a * *l;
    }
    sq + T::one() - lit
}

/// Weighted squared height error averaged over the depth points.
/// `heights` is indexed by ray id.
pub fn loss_depth(heights: &[f64], points: &[DepthPoint]) -> Result<f64> {
    if points.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for p in points {
        let h = *heights.get(p.ray).ok_or(Error::UnmatchedRay(p.ray))?;
        s += p.weight * (h - p.distance) * (h - p.distance);
    }
    Ok(s / points.len() as f64)
}
