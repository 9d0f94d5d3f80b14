//! Scene bounds, camera models and ray sampling.
//!
//! World coordinates are right-handed with Z as altitude. The radiance
//! fields live in the bounds-normalized cube `[0,1]^3`.

mod pinhole;
mod rpc;
mod sampling;

pub use nalgebra::{Matrix3, Vector3};

pub use pinhole::{generate_rays_pinhole, PinholeCamera};
pub use rpc::{rpc_localize, rpc_ray, RpcCamera, RPC_MAX_ITERATIONS, RPC_STEP_FLOOR};
pub use sampling::{sample_along_ray, RaySampleSet};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Axis-aligned scene box in world units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl SceneBounds {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        for a in 0..3 {
            if !(min[a].is_finite() && max[a].is_finite()) || min[a] >= max[a] {
                return Err(Error::InvalidBounds(format!(
                    "axis {a}: min {} must be below max {}",
                    min[a], max[a]
                )));
            }
        }
        Ok(Self { min, max })
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    /// Longest side; distances used for opacity are measured in this unit.
    pub fn max_extent(&self) -> f64 {
        self.extent().max()
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Maps `p` affinely into `[0,1]^3`. Points outside the box are clamped
    /// and the returned flag is set.
    pub fn normalize_point(&self, p: &Vec3) -> (Vec3, bool) {
        let mut clamped = false;
        let mut q = Vec3::zeros();
        for a in 0..3 {
            let u = (p[a] - self.min[a]) / (self.max[a] - self.min[a]);
            if !(0.0..=1.0).contains(&u) {
                clamped = true;
            }
            q[a] = u.clamp(0.0, 1.0);
        }
        (q, clamped)
    }

    pub fn denormalize_point(&self, q: &Vec3) -> Vec3 {
        self.min + self.extent().component_mul(q)
    }

    /// Slab intersection, clipped to `t >= 0`. `None` when the ray misses.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = 0.0_f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let o = ray.origin[a];
            let d = ray.dir[a];
            if d.abs() < 1e-15 {
                if o < self.min[a] || o > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let mut ta = (self.min[a] - o) * inv;
            let mut tb = (self.max[a] - o) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// A camera ray `r(t) = o + t d` with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    /// `(row, col)` of the source pixel.
    pub pixel: (usize, usize),
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, pixel: (usize, usize)) -> Result<Self> {
        let n = dir.norm();
        if !(n.is_finite() && n > 1e-300) {
            return Err(Error::DegenerateRay(format!("direction {dir:?} has no length")));
        }
        Ok(Self {
            origin,
            dir: dir / n,
            pixel,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// A known 3D point on a ray, from sparse reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthPoint {
    pub ray: usize,
    /// `|X(r) - o(r)|` in world units.
    pub distance: f64,
    pub weight: f64,
}

/// Either camera model.
#[derive(Debug, Clone, PartialEq)]
pub enum Camera {
    Pinhole(PinholeCamera),
    Rpc(RpcCamera),
}

impl Camera {
    /// Reads a `.cam` (pinhole) or `.rpc` file.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("cam") => Ok(Camera::Pinhole(PinholeCamera::from_text(&text)?)),
            Some("rpc") => Ok(Camera::Rpc(RpcCamera::from_text(&text)?)),
            _ => Err(Error::InvalidCamera(format!(
                "{}: expected a .cam or .rpc file",
                path.display()
            ))),
        }
    }

    pub fn height(&self) -> usize {
        match self {
            Camera::Pinhole(c) => c.height,
            Camera::Rpc(c) => c.height,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Camera::Pinhole(c) => c.width,
            Camera::Rpc(c) => c.width,
        }
    }

    /// Ray through the center of pixel `(row, col)`. RPC rays span the
    /// altitude range of `bounds`.
    pub fn pixel_ray(&self, row: usize, col: usize, bounds: &SceneBounds) -> Result<Ray> {
        match self {
            Camera::Pinhole(c) => Ok(c.pixel_ray(row, col)),
            Camera::Rpc(c) => {
                let mut r = rpc_ray(c, row as f64 + 0.5, col as f64 + 0.5, bounds)?;
                r.pixel = (row, col);
                Ok(r)
            }
        }
    }

    /// Continuous `(row, col)` of a world point.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        match self {
            Camera::Pinhole(c) => c.project(p),
            Camera::Rpc(c) => Some(c.project(p)),
        }
    }

    /// Every pixel ray in row-major order.
    pub fn all_rays(&self, bounds: &SceneBounds) -> Result<Vec<Ray>> {
        let mut out = Vec::with_capacity(self.height() * self.width());
        for row in 0..self.height() {
            for col in 0..self.width() {
                out.push(self.pixel_ray(row, col, bounds)?);
            }
        }
        Ok(out)
    }
}

/// Vertical rays on a regular XY grid covering the bounds, one per cell
/// center, starting at the top face. Used to rasterize DSMs.
pub fn nadir_grid_rays(bounds: &SceneBounds, cellsize: f64) -> (Vec<Ray>, usize, usize) {
    let ext = bounds.extent();
    let ncols = ((ext.x / cellsize).round() as usize).max(1);
    let nrows = ((ext.y / cellsize).round() as usize).max(1);
    let mut rays = Vec::with_capacity(ncols * nrows);
    for row in 0..nrows {
        // Row 0 is the northern edge, as in raster grids.
        let y = bounds.max.y - (row as f64 + 0.5) * cellsize;
        for col in 0..ncols {
            let x = bounds.min.x + (col as f64 + 0.5) * cellsize;
            rays.push(Ray {
                origin: Vec3::new(x, y, bounds.max.z),
                dir: Vec3::new(0.0, 0.0, -1.0),
                pixel: (row, col),
            });
        }
    }
    (rays, nrows, ncols)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> SceneBounds {
        SceneBounds::new(Vec3::new(-1.0, 2.0, 0.0), Vec3::new(3.0, 4.0, 10.0)).unwrap()
    }

    #[test]
    fn normalize_corners_and_center() {
        let b = unit_box();
        let (q, c) = b.normalize_point(&b.min);
        assert_eq!(q, Vec3::zeros());
        assert!(!c);
        let (q, _) = b.normalize_point(&b.center());
        assert!((q - Vec3::new(0.5, 0.5, 0.5)).norm() < 1e-15);
    }

    #[test]
    fn normalize_round_trip() {
        let b = unit_box();
        let p = Vec3::new(0.3, 3.7, 9.1);
        let (q, _) = b.normalize_point(&p);
        assert!((b.denormalize_point(&q) - p).norm() < 1e-12);
    }

    #[test]
    fn normalize_clamps_outside_points() {
        let b = unit_box();
        let (q, clamped) = b.normalize_point(&Vec3::new(5.0, 3.0, -1.0));
        assert!(clamped);
        assert_eq!(q, Vec3::new(1.0, 0.5, 0.0));
    }

    #[test]
    fn rejects_empty_bounds() {
        assert!(SceneBounds::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn slab_intersection() {
        let b = unit_box();
        let r = Ray::new(Vec3::new(1.0, 3.0, 20.0), Vec3::new(0.0, 0.0, -1.0), (0, 0)).unwrap();
        let (t0, t1) = b.intersect(&r).unwrap();
        assert!((t0 - 10.0).abs() < 1e-12 && (t1 - 20.0).abs() < 1e-12);
        let miss = Ray::new(Vec3::new(10.0, 3.0, 20.0), Vec3::new(0.0, 0.0, -1.0), (0, 0)).unwrap();
        assert!(b.intersect(&miss).is_none());
    }

    #[test]
    fn nadir_grid_covers_bounds() {
        let b = SceneBounds::new(Vec3::zeros(), Vec3::new(8.0, 4.0, 2.0)).unwrap();
        let (rays, nrows, ncols) = nadir_grid_rays(&b, 1.0);
        assert_eq!((nrows, ncols), (4, 8));
        assert_eq!(rays.len(), 32);
        assert!((rays[0].origin - Vec3::new(0.5, 3.5, 2.0)).norm() < 1e-12);
    }
}
