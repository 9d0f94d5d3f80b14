use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::scene::{CameraKind, Heightfield, SyntheticScene};
use crate::error::Result;
use crate::geometry::{Camera, PinholeCamera, Ray, RpcCamera, SceneBounds, Vec3};
use crate::image::RgbImage;

/// Bisection stops once the bracket is shorter than this (meters).
pub const HIT_TOLERANCE: f64 = 1e-4;
/// Marching step as a fraction of the largest scene extent.
const MARCH_FRACTION: f64 = 1.0 / 2048.0;
/// Camera distance in units of the scene extent.
const CAMERA_DISTANCE: f64 = 10.0;

/// First intersection distance of `ray` with the terrain inside `bounds`.
/// Fixed-step marching finds a sign change, bisection refines it.
pub fn intersect_heightfield(hf: &Heightfield, bounds: &SceneBounds, ray: &Ray) -> Option<f64> {
    let (t0, t1) = bounds.intersect(ray)?;
    let f = |t: f64| {
        let p = ray.at(t);
        p.z - hf.height(p.x, p.y)
    };
    if f(t0) <= 0.0 {
        return Some(t0);
    }
    let step = bounds.max_extent() * MARCH_FRACTION;
    let mut a = t0;
    while a < t1 {
        let mut b = (a + step).min(t1);
        if f(b) <= 0.0 {
            while b - a > HIT_TOLERANCE {
                let m = 0.5 * (a + b);
                if f(m) <= 0.0 {
                    b = m;
                } else {
                    a = m;
                }
            }
            return Some(0.5 * (a + b));
        }
        a = b;
    }
    None
}

/// Ground truth render of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleView {
    pub image: RgbImage,
    /// First-hit distance along each pixel ray; NaN where the ray misses.
    pub depth: Vec<f64>,
}

/// Ray-marched render with closed-form shading. Missed rays get
/// `background`. Colors are clamped to `[0,1]`.
pub fn oracle_render(scene: &SyntheticScene, camera: &Camera, tint: [f64; 3], background: [f64; 3]) -> Result<OracleView> {
    let rays = camera.all_rays(&scene.bounds)?;
    let shaded: Vec<([f64; 3], f64)> = rays
        .par_iter()
        .map(|ray| match intersect_heightfield(&scene.heightfield, &scene.bounds, ray) {
            Some(t) => {
                let c = scene.shade(&ray.at(t), &(-ray.dir), tint);
                (c.map(|v| v.clamp(0.0, 1.0)), t)
            }
            None => (background, f64::NAN),
        })
        .collect();
    let mut image = RgbImage::new(camera.width(), camera.height());
    for (px, (c, _)) in image.data.chunks_exact_mut(3).zip(&shaded) {
        px.copy_from_slice(c);
    }
    Ok(OracleView {
        image,
        depth: shaded.into_iter().map(|(_, t)| t).collect(),
    })
}

/// Distant cameras around the scene center, azimuths spread over the full
/// circle and off-nadir angles spread over `[0, max_off_nadir]`.
pub fn make_cameras(scene: &SyntheticScene) -> Result<Vec<Camera>> {
    let p = &scene.params;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5eed_ca3e);
    let c = scene.bounds.center();
    let target = Vec3::new(c.x, c.y, p.base_altitude);
    let dist = CAMERA_DISTANCE * p.extent;
    let focal = 0.5 * p.width as f64 * dist / (p.footprint * p.extent);
    let v = p.views;
    (0..v)
        .map(|i| {
            let az = 2.0 * PI * (i as f64 + 0.5 * rng.gen::<f64>()) / v as f64;
            // Off-nadir angles visit the range in a different order than azimuths.
            let slot = (i * 7 + 3) % v;
            let off = p.max_off_nadir_deg.to_radians() * ((slot as f64 + 0.5) / v as f64).sqrt();
            let eye = target + Vec3::new(off.sin() * az.cos(), off.sin() * az.sin(), off.cos()) * dist;
            let pin = PinholeCamera::look_at(eye, target, Vec3::new(0.0, 1.0, 0.0), focal, p.height, p.width)?;
            Ok(match p.camera {
                CameraKind::Pinhole => Camera::Pinhole(pin),
                CameraKind::Rpc => Camera::Rpc(affine_rpc_like(&pin, &scene.bounds, target, dist)),
            })
        })
        .collect()
}

/// Orthographic approximation of a distant pinhole camera as an affine RPC.
fn affine_rpc_like(pin: &PinholeCamera, bounds: &SceneBounds, target: Vec3, dist: f64) -> RpcCamera {
    let s = pin.fx / dist;
    let c = bounds.center();
    let half = bounds.extent() / 2.0;
    let ground_off = c;
    let right = pin.rotation.row(0).transpose();
    let down = pin.rotation.row(1).transpose();
    // row = cy + s * down.(p - target) with p = off + scale * (L, P, H).
    let line_scale = pin.height as f64 / 2.0;
    let samp_scale = pin.width as f64 / 2.0;
    let shift = ground_off - target;
    let coeffs = |axis: &Vec3, scale: f64| [s * axis.x * half.x / scale, s * axis.y * half.y / scale, s * axis.z * half.z / scale];
    RpcCamera::affine(
        coeffs(&down, line_scale),
        coeffs(&right, samp_scale),
        ground_off,
        half,
        pin.cy + s * down.dot(&shift),
        line_scale,
        pin.cx + s * right.dot(&shift),
        samp_scale,
        pin.height,
        pin.width,
    )
}
