use rand::Rng;

use super::{Ray, SceneBounds};

/// Sample distances and normalized positions along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySampleSet {
    pub t: Vec<f64>,
    /// Gap to the next sample; the last gap is the stratum width.
    pub delta: Vec<f64>,
    /// Positions normalized into `[0,1]^3`.
    pub positions: Vec<[f64; 3]>,
    pub t_min: f64,
    pub t_max: f64,
}

impl RaySampleSet {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Splits the ray's box interval into `n` equal strata and places one sample
/// in each: the midpoint, or a uniform jitter when `stratified`. Returns
/// `None` when the ray misses the box.
pub fn sample_along_ray<R: Rng + ?Sized>(
    ray: &Ray,
    bounds: &SceneBounds,
    n: usize,
    stratified: bool,
    rng: &mut R,
) -> Option<RaySampleSet> {
    assert!(n >= 1, "need at least one sample per ray");
    let (t_min, t_max) = bounds.intersect(ray)?;
    let width = (t_max - t_min) / n as f64;
    if !(width > 0.0) {
        return None;
    }
    let t: Vec<f64> = (0..n)
        .map(|i| {
            let u = if stratified { rng.gen::<f64>() } else { 0.5 };
            t_min + (i as f64 + u) * width
        })
        .collect();
    let delta = (0..n)
        .map(|i| if i + 1 < n { t[i + 1] - t[i] } else { width })
        .collect();
    let positions = t
        .iter()
        .map(|&ti| {
            let (q, _) = bounds.normalize_point(&ray.at(ti));
            [q.x, q.y, q.z]
        })
        .collect();
    Some(RaySampleSet {
        t,
        delta,
        positions,
        t_min,
        t_max,
    })
}
