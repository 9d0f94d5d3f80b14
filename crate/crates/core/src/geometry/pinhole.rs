use std::fmt::Write as _;

use super::{Matrix3, Ray, Vec3};
use crate::error::{Error, Result};

/// Ideal pinhole camera. `rotation`/`translation` map world points into the
/// camera frame (`x` right along columns, `y` down along rows, `z` forward).
#[derive(Debug, Clone, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub height: usize,
    pub width: usize,
}

impl PinholeCamera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vec3,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        let gram = rotation.transpose() * rotation;
        if (gram - Matrix3::identity()).abs().max() > 1e-9 {
            return Err(Error::InvalidCamera("rotation is not orthonormal".into()));
        }
        if (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidCamera("rotation determinant is not +1".into()));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            height,
            width,
        })
    }

    /// Camera at `eye` looking at `target`. `up` picks the roll; the image
    /// rows run opposite to it.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let z = (target - eye).normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(Error::InvalidCamera("up vector parallel to view axis".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            translation,
            height,
            width,
        )
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Continuous image coordinates `(row, col)` of a world point; `None`
    /// behind the camera. Pixel `(r, c)` has its center at `(r + 0.5, c + 0.5)`.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        let q = self.rotation * p + self.translation;
        if q.z <= 0.0 {
            return None;
        }
        Some((self.fy * q.y / q.z + self.cy, self.fx * q.x / q.z + self.cx))
    }

    /// Ray through continuous image coordinates.
    pub fn ray_at(&self, row: f64, col: f64, pixel: (usize, usize)) -> Ray {
        let d_cam = Vec3::new((col - self.cx) / self.fx, (row - self.cy) / self.fy, 1.0);
        let dir = (self.rotation.transpose() * d_cam).normalize();
        Ray {
            origin: self.center(),
            dir,
            pixel,
        }
    }

    pub fn pixel_ray(&self, row: usize, col: usize) -> Ray {
        self.ray_at(row as f64 + 0.5, col as f64 + 0.5, (row, col))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let r = &self.rotation;
        let t = &self.translation;
        writeln!(s, "# pinhole camera: x_cam = R x_world + t").unwrap();
        writeln!(s, "height = {}", self.height).unwrap();
        writeln!(s, "width = {}", self.width).unwrap();
        writeln!(s, "fx = {:e}", self.fx).unwrap();
        writeln!(s, "fy = {:e}", self.fy).unwrap();
        writeln!(s, "cx = {:e}", self.cx).unwrap();
        writeln!(s, "cy = {:e}", self.cy).unwrap();
        writeln!(
            s,
            "rotation = {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e}",
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)]
        )
        .unwrap();
        writeln!(s, "translation = {:e} {:e} {:e}", t.x, t.y, t.z).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = crate::config::parse_key_values(text)?;
        let get = |k: &str| -> Result<&str> {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Parse(format!("camera file is missing `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Parse(format!("camera `{k}` is not a number")))
        };
        let list = |k: &str, n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = get(k)?
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| Error::Parse(format!("camera `{k}` has a bad number")))?;
            if v.len() != n {
                return Err(Error::Parse(format!("camera `{k}` needs {n} values")));
            }
            Ok(v)
        };
        let r = list("rotation", 9)?;
        let t = list("translation", 3)?;
        Self::new(
            num("fx")?,
            num("fy")?,
            num("cx")?,
            num("cy")?,
            Matrix3::from_row_slice(&r),
            Vec3::new(t[0], t[1], t[2]),
            num("height")? as usize,
            num("width")? as usize,
        )
    }
}

/// One ray per pixel through the pixel center. Pixels are `(row, col)`.
pub fn generate_rays_pinhole(cam: &PinholeCamera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    pixels
        .iter()
        .enumerate()
        .map(|(index, &(row, col))| {
            if row >= cam.height || col >= cam.width {
                return Err(Error::PixelOutOfBounds {
                    index,
                    row,
                    col,
                    height: cam.height,
                    width: cam.width,
                });
            }
            Ok(cam.pixel_ray(row, col))
        })
        .collect()
}
