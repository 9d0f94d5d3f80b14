use std::fmt::Write as _;

use nalgebra::{Matrix2, Vector2};

use super::{Ray, SceneBounds, Vec3};
use crate::error::{Error, Result};

pub const RPC_MAX_ITERATIONS: usize = 20;
pub const RPC_STEP_FLOOR: f64 = 1e-10;
/// Pixel residual accepted by localization.
const RPC_PIXEL_TOLERANCE: f64 = 1e-4;

/// Rational polynomial camera with RPC00B term ordering.
///
/// Ground coordinates are taken in the local scene frame: longitude maps to
/// `x`, latitude to `y` and height to `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct RpcCamera {
    pub line_num: [f64; 20],
    pub line_den: [f64; 20],
    pub samp_num: [f64; 20],
    pub samp_den: [f64; 20],
    pub lat_off: f64,
    pub lat_scale: f64,
    pub lon_off: f64,
    pub lon_scale: f64,
    pub height_off: f64,
    pub height_scale: f64,
    pub line_off: f64,
    pub line_scale: f64,
    pub samp_off: f64,
    pub samp_scale: f64,
    pub height: usize,
    pub width: usize,
}

/// The 20 cubic monomials in RPC00B order, for normalized (L, P, H).
fn terms(l: f64, p: f64, h: f64) -> [f64; 20] {
    [
        1.0,
        l,
        p,
        h,
        l * p,
        l * h,
        p * h,
        l * l,
        p * p,
        h * h,
        p * l * h,
        l * l * l,
        l * p * p,
        l * h * h,
        l * l * p,
        p * p * p,
        p * h * h,
        l * l * h,
        p * p * h,
        h * h * h,
    ]
}

fn terms_dl(l: f64, p: f64, h: f64) -> [f64; 20] {
    [
        0.0,
        1.0,
        0.0,
        0.0,
        p,
        h,
        0.0,
        2.0 * l,
        0.0,
        0.0,
        p * h,
        3.0 * l * l,
        p * p,
        h * h,
        2.0 * l * p,
        0.0,
        0.0,
        2.0 * l * h,
        0.0,
        0.0,
    ]
}

fn terms_dp(l: f64, p: f64, h: f64) -> [f64; 20] {
    [
        0.0,
        0.0,
        1.0,
        0.0,
        l,
        0.0,
        h,
        0.0,
        2.0 * p,
        0.0,
        l * h,
        0.0,
        2.0 * l * p,
        0.0,
        l * l,
        3.0 * p * p,
        h * h,
        0.0,
        2.0 * p * h,
        0.0,
    ]
}

fn dot(c: &[f64; 20], t: &[f64; 20]) -> f64 {
    c.iter().zip(t).map(|(a, b)| a * b).sum()
}

const KEYS: [&str; 4] = ["LINE_NUM_COEFF", "LINE_DEN_COEFF", "SAMP_NUM_COEFF", "SAMP_DEN_COEFF"];

impl RpcCamera {
    pub fn validate(&self) -> Result<()> {
        if self.line_den[0] == 0.0 || self.samp_den[0] == 0.0 {
            return Err(Error::InvalidCamera(
                "RPC denominator constant coefficient is zero".into(),
            ));
        }
        for (name, s) in [
            ("LAT_SCALE", self.lat_scale),
            ("LONG_SCALE", self.lon_scale),
            ("HEIGHT_SCALE", self.height_scale),
            ("LINE_SCALE", self.line_scale),
            ("SAMP_SCALE", self.samp_scale),
        ] {
            if !(s > 0.0) {
                return Err(Error::InvalidCamera(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn normalize_ground(&self, g: &Vec3) -> (f64, f64, f64) {
        (
            (g.x - self.lon_off) / self.lon_scale,
            (g.y - self.lat_off) / self.lat_scale,
            (g.z - self.height_off) / self.height_scale,
        )
    }

    /// Normalized (line, sample) and their partials w.r.t. (P, L).
    fn eval_normalized(&self, l: f64, p: f64, h: f64) -> (Vector2<f64>, Matrix2<f64>) {
        let t = terms(l, p, h);
        let tl = terms_dl(l, p, h);
        let tp = terms_dp(l, p, h);
        let ratio = |num: &[f64; 20], den: &[f64; 20]| {
            let n = dot(num, &t);
            let d = dot(den, &t);
            let v = n / d;
            let dl = (dot(num, &tl) * d - n * dot(den, &tl)) / (d * d);
            let dp = (dot(num, &tp) * d - n * dot(den, &tp)) / (d * d);
            (v, dp, dl)
        };
        let (line, line_dp, line_dl) = ratio(&self.line_num, &self.line_den);
        let (samp, samp_dp, samp_dl) = ratio(&self.samp_num, &self.samp_den);
        (
            Vector2::new(line, samp),
            Matrix2::new(line_dp, line_dl, samp_dp, samp_dl),
        )
    }

    /// Continuous image coordinates `(row, col)` of a ground point.
    pub fn project(&self, g: &Vec3) -> (f64, f64) {
        let (l, p, h) = self.normalize_ground(g);
        let (v, _) = self.eval_normalized(l, p, h);
        (
            v.x * self.line_scale + self.line_off,
            v.y * self.samp_scale + self.samp_off,
        )
    }

    /// RPC whose normalized line/sample are affine in the normalized ground
    /// coordinates: `line = a . (L, P, H)`, `samp = b . (L, P, H)`.
    #[allow(clippy::too_many_arguments)]
    pub fn affine(
        line_coeffs: [f64; 3],
        samp_coeffs: [f64; 3],
        ground_off: Vec3,
        ground_scale: Vec3,
        line_off: f64,
        line_scale: f64,
        samp_off: f64,
        samp_scale: f64,
        height: usize,
        width: usize,
    ) -> Self {
        let mut line_num = [0.0; 20];
        let mut samp_num = [0.0; 20];
        let mut den = [0.0; 20];
        den[0] = 1.0;
        line_num[1..4].copy_from_slice(&line_coeffs);
        samp_num[1..4].copy_from_slice(&samp_coeffs);
        Self {
            line_num,
            line_den: den,
            samp_num,
            samp_den: den,
            lat_off: ground_off.y,
            lat_scale: ground_scale.y,
            lon_off: ground_off.x,
            lon_scale: ground_scale.x,
            height_off: ground_off.z,
            height_scale: ground_scale.z,
            line_off,
            line_scale,
            samp_off,
            samp_scale,
            height,
            width,
        }
    }

    /// RPB-style `KEY = value` text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, coeffs) in KEYS
            .iter()
            .zip([&self.line_num, &self.line_den, &self.samp_num, &self.samp_den])
        {
            for (i, c) in coeffs.iter().enumerate() {
                writeln!(s, "{key}_{} = {c:e}", i + 1).unwrap();
            }
        }
        for (k, v) in [
            ("LAT_OFF", self.lat_off),
            ("LAT_SCALE", self.lat_scale),
            ("LONG_OFF", self.lon_off),
            ("LONG_SCALE", self.lon_scale),
            ("HEIGHT_OFF", self.height_off),
            ("HEIGHT_SCALE", self.height_scale),
            ("LINE_OFF", self.line_off),
            ("LINE_SCALE", self.line_scale),
            ("SAMP_OFF", self.samp_off),
            ("SAMP_SCALE", self.samp_scale),
        ] {
            writeln!(s, "{k} = {v:e}").unwrap();
        }
        writeln!(s, "NUM_ROWS = {}", self.height).unwrap();
        writeln!(s, "NUM_COLS = {}", self.width).unwrap();
        s
    }

    /// Parses RPB-style metadata. `NUM_ROWS`/`NUM_COLS` are optional and
    /// default to twice the line/sample offsets.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = crate::config::parse_key_values(text)?;
        let lookup = |k: &str| kv.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        let num = |k: &str| -> Result<f64> {
            let raw = lookup(k).ok_or_else(|| Error::Parse(format!("RPC file is missing `{k}`")))?;
            raw.trim_end_matches(';')
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("RPC `{k}` is not a number: `{raw}`")))
        };
        let mut arrays = [[0.0; 20]; 4];
        for (key, arr) in KEYS.iter().zip(arrays.iter_mut()) {
            for (i, slot) in arr.iter_mut().enumerate() {
                *slot = num(&format!("{key}_{}", i + 1))?;
            }
        }
        let line_off = num("LINE_OFF")?;
        let samp_off = num("SAMP_OFF")?;
        let height = match lookup("NUM_ROWS") {
            Some(_) => num("NUM_ROWS")? as usize,
            None => (2.0 * line_off).round() as usize,
        };
        let width = match lookup("NUM_COLS") {
            Some(_) => num("NUM_COLS")? as usize,
            None => (2.0 * samp_off).round() as usize,
        };
        let cam = Self {
            line_num: arrays[0],
            line_den: arrays[1],
            samp_num: arrays[2],
            samp_den: arrays[3],
            lat_off: num("LAT_OFF")?,
            lat_scale: num("LAT_SCALE")?,
            lon_off: num("LONG_OFF")?,
            lon_scale: num("LONG_SCALE")?,
            height_off: num("HEIGHT_OFF")?,
            height_scale: num("HEIGHT_SCALE")?,
            line_off,
            line_scale: num("LINE_SCALE")?,
            samp_off,
            samp_scale: num("SAMP_SCALE")?,
            height,
            width,
        };
        cam.validate()?;
        Ok(cam)
    }
}

/// Inverts the RPC at a fixed altitude: finds the ground point that projects
/// to `(row, col)`. Damped Newton on the normalized (lat, lon) pair.
pub fn rpc_localize(cam: &RpcCamera, row: f64, col: f64, altitude: f64) -> Result<Vec3> {
    let h = (altitude - cam.height_off) / cam.height_scale;
    if !(h.abs() <= 1.0 + 1e-9) {
        return Err(Error::AltitudeOutOfRange { altitude });
    }
    let target = Vector2::new(
        (row - cam.line_off) / cam.line_scale,
        (col - cam.samp_off) / cam.samp_scale,
    );
    let px = Vector2::new(cam.line_scale, cam.samp_scale);
    let pixel_residual = |r: &Vector2<f64>| r.component_mul(&px).norm();

    // x = (P, L)
    let mut x = Vector2::zeros();
    let (v, mut jac) = cam.eval_normalized(x.y, x.x, h);
    let mut res = v - target;
    let mut iterations = 0;
    while iterations < RPC_MAX_ITERATIONS {
        if pixel_residual(&res) < 1e-9 {
            break;
        }
        iterations += 1;
        let step = match jac.try_inverse() {
            Some(inv) if inv.iter().all(|v| v.is_finite()) => -(inv * res),
            _ => break,
        };
        let mut damping = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = x + step * damping;
            let (v, j) = cam.eval_normalized(cand.y, cand.x, h);
            let r = v - target;
            if r.norm() < res.norm() && r.iter().all(|v| v.is_finite()) {
                x = cand;
                res = r;
                jac = j;
                accepted = true;
                break;
            }
            damping *= 0.5;
        }
        if !accepted || (step * damping).norm() < RPC_STEP_FLOOR {
            break;
        }
    }
    let residual = pixel_residual(&res);
    if !(residual <= RPC_PIXEL_TOLERANCE) {
        return Err(Error::RpcNonConvergence {
            iterations,
            residual,
        });
    }
    Ok(Vec3::new(
        x.y * cam.lon_scale + cam.lon_off,
        x.x * cam.lat_scale + cam.lat_off,
        altitude,
    ))
}

/// Ray through continuous image coordinates, from the top of the bounds
/// toward the ground point at the bottom altitude.
pub fn rpc_ray(cam: &RpcCamera, row: f64, col: f64, bounds: &SceneBounds) -> Result<Ray> {
    let (lo, hi) = (bounds.min.z, bounds.max.z);
    if !(hi > lo) {
        return Err(Error::DegenerateRay(format!(
            "altitude range [{lo}, {hi}] is empty"
        )));
    }
    let top = rpc_localize(cam, row, col, hi)?;
    let bottom = rpc_localize(cam, row, col, lo)?;
    let pixel = (row.max(0.0).floor() as usize, col.max(0.0).floor() as usize);
    Ray::new(top, bottom - top, pixel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nadir_cam() -> RpcCamera {
        RpcCamera::affine(
            [0.0, -1.0, 0.0],
            [1.0, 0.0, 0.0],
            Vec3::new(50.0, 50.0, 10.0),
            Vec3::new(50.0, 50.0, 10.0),
            32.0,
            32.0,
            32.0,
            32.0,
            64,
            64,
        )
    }

    /// A mildly rational, off-nadir camera.
    fn oblique_cam(rng: &mut ChaCha8Rng) -> RpcCamera {
        let mut cam = RpcCamera::affine(
            [0.05, -1.0, 0.3],
            [1.0, 0.04, -0.2],
            Vec3::new(50.0, 50.0, 10.0),
            Vec3::new(50.0, 50.0, 10.0),
            32.0,
            32.0,
            32.0,
            32.0,
            64,
            64,
        );
        for i in 4..20 {
            cam.line_num[i] = rng.gen_range(-0.002..0.002);
            cam.samp_num[i] = rng.gen_range(-0.002..0.002);
            cam.line_den[i] = rng.gen_range(-0.001..0.001);
            cam.samp_den[i] = rng.gen_range(-0.001..0.001);
        }
        cam
    }

    #[test]
    fn linear_rpc_inverts_exactly() {
        let cam = nadir_cam();
        let g = rpc_localize(&cam, 10.0, 40.0, 12.0).unwrap();
        // line = -P*32 + 32 -> P = (32 - 10)/32; samp = L*32 + 32 -> L = 8/32
        assert!((g.y - (50.0 + 50.0 * 22.0 / 32.0)).abs() < 1e-9);
        assert!((g.x - (50.0 + 50.0 * 8.0 / 32.0)).abs() < 1e-9);
        assert_eq!(g.z, 12.0);
    }

    #[test]
    fn round_trip_recovers_ground_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let cam = oblique_cam(&mut rng);
            let g = Vec3::new(
                rng.gen_range(10.0..90.0),
                rng.gen_range(10.0..90.0),
                rng.gen_range(1.0..19.0),
            );
            let (r, c) = cam.project(&g);
            let back = rpc_localize(&cam, r, c, g.z).unwrap();
            assert!(((back.x - g.x) / cam.lon_scale).abs() < 1e-6);
            assert!(((back.y - g.y) / cam.lat_scale).abs() < 1e-6);
            let (r2, c2) = cam.project(&back);
            assert!((r2 - r).abs() < 1e-4 && (c2 - c).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_projection_does_not_converge() {
        let mut cam = nadir_cam();
        cam.line_num = [0.0; 20];
        cam.samp_num = [0.0; 20];
        cam.line_num[0] = 0.1;
        cam.samp_num[0] = 0.1;
        match rpc_localize(&cam, 5.0, 5.0, 10.0) {
            Err(Error::RpcNonConvergence { residual, .. }) => assert!(residual > 1.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn altitude_outside_range_is_rejected() {
        assert!(matches!(
            rpc_localize(&nadir_cam(), 1.0, 1.0, 25.0),
            Err(Error::AltitudeOutOfRange { .. })
        ));
    }

    #[test]
    fn nadir_ray_points_down() {
        let b = SceneBounds::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(100.0, 100.0, 20.0)).unwrap();
        let ray = rpc_ray(&nadir_cam(), 20.5, 30.5, &b).unwrap();
        assert!((ray.dir - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!((ray.origin.z - 20.0).abs() < 1e-12);
    }

    #[test]
    fn points_on_ray_project_to_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = SceneBounds::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(100.0, 100.0, 20.0)).unwrap();
        for _ in 0..20 {
            let cam = oblique_cam(&mut rng);
            let (r, c) = (rng.gen_range(5.0..60.0), rng.gen_range(5.0..60.0));
            let ray = rpc_ray(&cam, r, c, &b).unwrap();
            let len = 20.0 / -ray.dir.z;
            // Exact at both ends; the chord deviates slightly from the curved
            // pixel ray of a rational camera in between.
            for k in 0..=10 {
                let (pr, pc) = cam.project(&ray.at(len * k as f64 / 10.0));
                let tol = if k == 0 || k == 10 { 1e-4 } else { 0.5 };
                assert!((pr - r).abs() < tol && (pc - c).abs() < tol, "{pr} {pc} vs {r} {c}");
            }
        }
    }

    #[test]
    fn zero_altitude_extent_is_degenerate() {
        let b = SceneBounds {
            min: Vec3::new(0.0, 0.0, 5.0),
            max: Vec3::new(100.0, 100.0, 5.0),
        };
        assert!(matches!(
            rpc_ray(&nadir_cam(), 1.0, 1.0, &b),
            Err(Error::DegenerateRay(_))
        ));
    }

    #[test]
    fn text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = oblique_cam(&mut rng);
        assert_eq!(RpcCamera::from_text(&cam.to_text()).unwrap(), cam);
    }

    #[test]
    fn zero_denominator_rejected() {
        let mut cam = nadir_cam();
        cam.samp_den[0] = 0.0;
        assert!(RpcCamera::from_text(&cam.to_text()).is_err());
    }
}
