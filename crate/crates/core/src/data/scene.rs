use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{SceneBounds, Vec3};
use crate::render::Dsm;

/// Which camera model synthetic views use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraKind {
    Pinhole,
    /// Affine RPC approximating a distant oblique view.
    Rpc,
}

impl CameraKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pinhole" => Some(Self::Pinhole),
            "rpc" => Some(Self::Rpc),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Pinhole => "pinhole",
            Self::Rpc => "rpc",
        }
    }
}

/// Everything that defines a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub seed: u64,
    /// Side of the square ground footprint in meters.
    pub extent: f64,
    /// Altitude range of the scene box is `[0, z_max]`.
    pub z_max: f64,
    pub base_altitude: f64,
    /// Maximum deviation of the terrain from `base_altitude`.
    pub roughness: f64,
    pub octaves: usize,
    pub specular_min: f64,
    pub specular_max: f64,
    pub shininess: f64,
    pub ambient: f64,
    pub sun_elevation_deg: f64,
    pub sun_azimuth_deg: f64,
    /// Number of acquisition dates; each date has its own tint.
    pub dates: usize,
    /// Tints are drawn from `1 + tint_weight * U(-1, 1)` per channel.
    pub tint_weight: f64,
    pub views: usize,
    pub test_views: usize,
    pub width: usize,
    pub height: usize,
    pub max_off_nadir_deg: f64,
    /// Half the image width covers this fraction of the extent at nadir.
    pub footprint: f64,
    pub camera: CameraKind,
    /// Transient rectangles injected into each training view.
    pub transients: usize,
    pub depth_points: usize,
    pub depth_noise: f64,
    pub dsm_cellsize: f64,
    /// DSM cells seen by fewer training views are left invalid.
    pub min_observations: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            seed: 0,
            extent: 64.0,
            z_max: 16.0,
            base_altitude: 8.0,
            roughness: 4.0,
            octaves: 4,
            specular_min: 0.05,
            specular_max: 0.2,
            shininess: 16.0,
            ambient: 0.05,
            sun_elevation_deg: 60.0,
            sun_azimuth_deg: 135.0,
            dates: 4,
            tint_weight: 0.0,
            views: 20,
            test_views: 2,
            width: 64,
            height: 64,
            max_off_nadir_deg: 30.0,
            footprint: 0.35,
            camera: CameraKind::Pinhole,
            transients: 0,
            depth_points: 1000,
            depth_noise: 0.05,
            dsm_cellsize: 1.0,
            min_observations: 3,
        }
    }
}

fn bad(key: &str, reason: &str) -> Error {
    Error::InvalidConfigValue {
        key: key.into(),
        reason: reason.into(),
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0 && self.z_max > 0.0) {
            return Err(bad("extent", "scene size must be positive"));
        }
        if !(self.roughness >= 0.0) {
            return Err(bad("roughness", "must be non-negative"));
        }
        if self.base_altitude - self.roughness < 0.0 || self.base_altitude + self.roughness > self.z_max {
            return Err(bad("roughness", "terrain would leave the altitude range"));
        }
        if !(0.0 <= self.specular_min && self.specular_min <= self.specular_max) {
            return Err(bad("specular", "need 0 <= min <= max"));
        }
        if !(self.shininess > 0.0 && self.ambient >= 0.0 && self.tint_weight >= 0.0 && self.tint_weight < 1.0) {
            return Err(bad("shading", "shininess > 0, ambient >= 0, tint weight in [0, 1)"));
        }
        if !(0.0 < self.sun_elevation_deg && self.sun_elevation_deg <= 90.0) {
            return Err(bad("sun", "elevation must be in (0, 90]"));
        }
        if self.views == 0 || self.test_views >= self.views {
            return Err(bad("views", "need at least one training view"));
        }
        if self.width < 1 || self.height < 1 || self.dates == 0 {
            return Err(bad("views", "image size and date count must be positive"));
        }
        if !(0.0..80.0).contains(&self.max_off_nadir_deg) || !(self.footprint > 0.0) {
            return Err(bad("views", "off-nadir angle in [0, 80), positive footprint"));
        }
        if !(self.dsm_cellsize > 0.0 && self.depth_noise >= 0.0) {
            return Err(bad("dsm_cellsize", "must be positive"));
        }
        Ok(())
    }

    pub fn bounds(&self) -> SceneBounds {
        SceneBounds::new(Vec3::zeros(), Vec3::new(self.extent, self.extent, self.z_max))
            .expect("validated scene size")
    }

    /// Unit vector toward the sun.
    pub fn sun(&self) -> Vec3 {
        let (el, az) = (self.sun_elevation_deg.to_radians(), self.sun_azimuth_deg.to_radians());
        Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }

    /// Held-out view indices, spread evenly over the view sequence.
    pub fn test_view_indices(&self) -> Vec<usize> {
        (0..self.test_views)
            .map(|j| ((j as f64 + 0.5) * self.views as f64 / self.test_views as f64) as usize)
            .collect()
    }
}

/// One plane wave `amp * sin(kx x + ky y + phase)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wave {
    pub kx: f64,
    pub ky: f64,
    pub phase: f64,
    pub amp: f64,
}

/// Sum of plane waves with amplitudes summing to one, so values lie in
/// `[-1, 1]`. Octave `o` has wavelength `extent / base_cycles / 2^o` and
/// amplitude falling as `0.5^o`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    pub waves: Vec<Wave>,
}

impl Pattern {
    pub fn fractal<R: Rng>(rng: &mut R, extent: f64, base_cycles: f64, octaves: usize, per_octave: usize) -> Self {
        let mut waves = Vec::with_capacity(octaves * per_octave);
        for o in 0..octaves {
            let k = 2.0 * PI * base_cycles * 2f64.powi(o as i32) / extent;
            for _ in 0..per_octave {
                let theta = rng.gen_range(0.0..2.0 * PI);
                waves.push(Wave {
                    kx: k * theta.cos(),
                    ky: k * theta.sin(),
                    phase: rng.gen_range(0.0..2.0 * PI),
                    amp: 0.5f64.powi(o as i32) * rng.gen_range(0.5..1.0),
                });
            }
        }
        let total: f64 = waves.iter().map(|w| w.amp).sum();
        if total > 0.0 {
            waves.iter_mut().for_each(|w| w.amp /= total);
        }
        Self { waves }
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        self.waves.iter().map(|w| w.amp * (w.kx * x + w.ky * y + w.phase).sin()).sum()
    }

    /// `(d/dx, d/dy)`.
    pub fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        self.waves.iter().fold((0.0, 0.0), |(gx, gy), w| {
            let c = w.amp * (w.kx * x + w.ky * y + w.phase).cos();
            (gx + c * w.kx, gy + c * w.ky)
        })
    }
}

/// Smooth fractal terrain `z = base + roughness * pattern(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heightfield {
    pub base: f64,
    pub roughness: f64,
    pub pattern: Pattern,
}

impl Heightfield {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        if self.roughness == 0.0 {
            return self.base;
        }
        self.base + self.roughness * self.pattern.value(x, y)
    }

    /// Upward unit normal.
    pub fn normal(&self, x: f64, y: f64) -> Vec3 {
        let (gx, gy) = self.pattern.gradient(x, y);
        Vec3::new(-self.roughness * gx, -self.roughness * gy, 1.0).normalize()
    }

    /// Heights at the cell centers of the DSM grid of `bounds`.
    pub fn grid(&self, bounds: &SceneBounds, cellsize: f64) -> Dsm {
        let mut dsm = Dsm::for_bounds(bounds, cellsize);
        for r in 0..dsm.nrows {
            for c in 0..dsm.ncols {
                let (x, y) = dsm.cell_center(r, c);
                dsm.values[r * dsm.ncols + c] = self.height(x, y);
            }
        }
        dsm
    }
}

/// Ground truth geometry and reflectance of a synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub params: SceneParams,
    pub bounds: SceneBounds,
    pub heightfield: Heightfield,
    pub albedo_low: [f64; 3],
    pub albedo_high: [f64; 3],
    pub albedo_pattern: Pattern,
    pub detail_pattern: Pattern,
    pub specular_pattern: Pattern,
    pub sun: Vec3,
    /// Tint per acquisition date.
    pub tints: Vec<[f64; 3]>,
}

impl SyntheticScene {
    pub fn albedo(&self, x: f64, y: f64) -> [f64; 3] {
        let t = 0.5 + 0.5 * self.albedo_pattern.value(x, y);
        let d = 0.85 + 0.15 * self.detail_pattern.value(x, y);
        std::array::from_fn(|k| (self.albedo_low[k] + t * (self.albedo_high[k] - self.albedo_low[k])) * d)
    }

    pub fn specular(&self, x: f64, y: f64) -> f64 {
        let p = &self.params;
        p.specular_min + (p.specular_max - p.specular_min) * (0.5 + 0.5 * self.specular_pattern.value(x, y))
    }

    /// Radiance leaving surface point `p` toward `to_camera`, before clamping:
    /// `tint * (albedo max(0, n.s) + k_s max(0, r.v)^p + ambient)`.
    pub fn shade(&self, p: &Vec3, to_camera: &Vec3, tint: [f64; 3]) -> [f64; 3] {
        let n = self.heightfield.normal(p.x, p.y);
        let ns = n.dot(&self.sun);
        let r = n * (2.0 * ns) - self.sun;
        let spec = self.specular(p.x, p.y) * r.dot(to_camera).max(0.0).powf(self.params.shininess);
        let a = self.albedo(p.x, p.y);
        std::array::from_fn(|k| tint[k] * (a[k] * ns.max(0.0) + spec + self.params.ambient))
    }
}

/// Deterministic scene from `params.seed`.
pub fn make_scene(params: &SceneParams) -> Result<SyntheticScene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let e = params.extent;
    let heightfield = Heightfield {
        base: params.base_altitude,
        roughness: params.roughness,
        pattern: Pattern::fractal(&mut rng, e, 1.0, params.octaves, 3),
    };
    let mut color = || std::array::from_fn(|_| rng.gen_range(0.15..0.75));
    let albedo_low = color();
    let albedo_high = color();
    let albedo_pattern = Pattern::fractal(&mut rng, e, 2.0, 3, 3);
    let detail_pattern = Pattern::fractal(&mut rng, e, 6.0, 1, 4);
    let specular_pattern = Pattern::fractal(&mut rng, e, 1.5, 2, 2);
    let tints = (0..params.dates)
        .map(|_| std::array::from_fn(|_| 1.0 + params.tint_weight * rng.gen_range(-1.0..1.0)))
        .collect();
    Ok(SyntheticScene {
        params: params.clone(),
        bounds: params.bounds(),
        heightfield,
        albedo_low,
        albedo_high,
        albedo_pattern,
        detail_pattern,
        specular_pattern,
        sun: params.sun(),
        tints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let p = SceneParams::default();
        assert_eq!(make_scene(&p).unwrap(), make_scene(&p).unwrap());
        let q = SceneParams { seed: 1, ..p.clone() };
        assert_ne!(make_scene(&p).unwrap().heightfield, make_scene(&q).unwrap().heightfield);
    }

    #[test]
    fn zero_roughness_is_flat() {
        let p = SceneParams {
            roughness: 0.0,
            ..Default::default()
        };
        let s = make_scene(&p).unwrap();
        for (x, y) in [(0.0, 0.0), (13.0, 40.0), (64.0, 7.5)] {
            assert_eq!(s.heightfield.height(x, y), p.base_altitude);
            assert_eq!(s.heightfield.normal(x, y), Vec3::new(0.0, 0.0, 1.0));
        }
    }

    #[test]
    fn terrain_stays_in_bounds_for_many_seeds() {
        for seed in 0..100 {
            let p = SceneParams {
                seed,
                ..Default::default()
            };
            let s = make_scene(&p).unwrap();
            let g = s.heightfield.grid(&s.bounds, 0.5);
            for v in &g.values {
                assert!(*v >= 0.0 && *v <= p.z_max);
                assert!((v - p.base_altitude).abs() <= p.roughness + 1e-12);
            }
        }
    }

    #[test]
    fn normals_match_finite_differences() {
        let s = make_scene(&SceneParams::default()).unwrap();
        let h = 1e-5;
        for (x, y) in [(3.0, 4.0), (30.5, 12.25), (60.0, 50.0)] {
            let hf = &s.heightfield;
            let gx = (hf.height(x + h, y) - hf.height(x - h, y)) / (2.0 * h);
            let gy = (hf.height(x, y + h) - hf.height(x, y - h)) / (2.0 * h);
            let expect = Vec3::new(-gx, -gy, 1.0).normalize();
            assert!((hf.normal(x, y) - expect).norm() < 1e-8);
        }
    }

    #[test]
    fn albedo_in_unit_range() {
        let s = make_scene(&SceneParams::default()).unwrap();
        for i in 0..400 {
            let (x, y) = ((i % 20) as f64 * 3.2, (i / 20) as f64 * 3.2);
            assert!(s.albedo(x, y).iter().all(|v| (0.0..=1.0).contains(v)));
            let k = s.specular(x, y);
            assert!(k >= s.params.specular_min - 1e-12 && k <= s.params.specular_max + 1e-12);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let p = SceneParams {
            roughness: 9.0,
            ..Default::default()
        };
        assert!(make_scene(&p).is_err());
        let p = SceneParams {
            test_views: 20,
            ..Default::default()
        };
        assert!(make_scene(&p).is_err());
    }
}
