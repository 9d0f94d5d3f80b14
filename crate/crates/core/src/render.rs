//! Volume rendering: opacity, transmittance, compositing, full images and
//! DSM rasterization.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{nadir_grid_rays, Camera, Ray, SceneBounds};
use crate::image::RgbImage;
use crate::model::RadianceModel;
use crate::pipeline::{render_rays, sample_rays, PipelineOptions, TrainRay, HEIGHT_EPS};
use crate::real::Real;

/// Composited result of one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderedRay {
    pub rgb: [f64; 3],
    /// Expected termination distance; NaN when the ray has no samples.
    pub height: f64,
    /// Sum of the compositing weights.
    pub opacity: f64,
}

/// `alpha_i = 1 - exp(-sigma_i delta_i)`.
pub fn alphas(sigma: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    if sigma.len() != delta.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} densities vs {} gaps",
            sigma.len(),
            delta.len()
        )));
    }
    sigma
        .iter()
        .zip(delta)
        .enumerate()
        .map(|(i, (s, d))| {
            if *s < 0.0 {
                Err(Error::NegativeDensity { index: i, value: *s })
            } else {
                Ok(-(-s * d).exp_m1())
            }
        })
        .collect()
}

/// `Tr_i = prod_{j<i} (1 - alpha_j)`, accumulated in log space.
pub fn transmittance(alpha: &[f64]) -> Vec<f64> {
    let mut log_tr = 0.0f64;
    alpha
        .iter()
        .map(|a| {
            let tr = log_tr.exp();
            log_tr += (-a).ln_1p();
            tr
        })
        .collect()
}

/// Composites samples of one ray. An empty ray renders `background` with a
/// NaN height.
pub fn render_ray(colors: &[[f64; 3]], alpha: &[f64], tr: &[f64], t: &[f64], background: [f64; 3]) -> Result<RenderedRay> {
    let n = colors.len();
    if alpha.len() != n || tr.len() != n || t.len() != n {
        return Err(Error::ShapeMismatch("render_ray inputs differ in length".into()));
    }
    if n == 0 {
        return Ok(RenderedRay {
            rgb: background,
            height: f64::NAN,
            opacity: 0.0,
        });
    }
    let mut rgb = [0.0; 3];
    let mut wsum = 0.0;
    let mut wt = 0.0;
    for i in 0..n {
        let w = tr[i] * alpha[i];
        for k in 0..3 {
            rgb[k] += w * colors[i][k];
        }
        wsum += w;
        wt += w * t[i];
    }
    Ok(RenderedRay {
        rgb,
        height: wt / wsum.max(HEIGHT_EPS),
        opacity: wsum,
    })
}

/// Reference emission-absorption integral `int sigma c exp(-tau) dt` over
/// `[t0, t1]` by the trapezoid rule on `n` nodes, with the optical depth
/// `tau` accumulated by the same rule. Shares no code with the compositor.
pub fn quadrature_render(
    sigma: impl Fn(f64) -> f64,
    color: impl Fn(f64) -> [f64; 3],
    t0: f64,
    t1: f64,
    n: usize,
) -> [f64; 3] {
    assert!(n >= 2, "quadrature needs two nodes");
    let h = (t1 - t0) / (n - 1) as f64;
    let mut tau = 0.0;
    let mut prev: Option<(f64, [f64; 3])> = None;
    let mut out = [0.0; 3];
    for i in 0..n {
        let t = t0 + i as f64 * h;
        let s = sigma(t);
        let c = color(t);
        if let Some((ps, _)) = prev {
            tau += 0.5 * h * (ps + s);
        }
        let f = c.map(|ck| s * ck * (-tau).exp());
        if let Some((_, pf)) = prev {
            for k in 0..3 {
                out[k] += 0.5 * h * (pf[k] + f[k]);
            }
        }
        prev = Some((s, f));
    }
    out
}

/// The discrete compositor applied to analytic `sigma` and `color` with
/// `n` midpoint samples on `[t0, t1]`.
pub fn composite_analytic(
    sigma: impl Fn(f64) -> f64,
    color: impl Fn(f64) -> [f64; 3],
    t0: f64,
    t1: f64,
    n: usize,
) -> Result<RenderedRay> {
    let w = (t1 - t0) / n as f64;
    let t: Vec<f64> = (0..n).map(|i| t0 + (i as f64 + 0.5) * w).collect();
    let s: Vec<f64> = t.iter().map(|&x| sigma(x)).collect();
    let a = alphas(&s, &vec![w; n])?;
    let tr = transmittance(&a);
    let c: Vec<[f64; 3]> = t.iter().map(|&x| color(x)).collect();
    render_ray(&c, &a, &tr, &t, [0.0; 3])
}

/// Per-pixel renders of one camera.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub rgb: RgbImage,
    /// Expected ray distance per pixel.
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
    pub rays: Vec<Ray>,
}

impl RenderedImage {
    /// World altitude `o_z + depth * d_z` per pixel.
    pub fn altitude(&self) -> Vec<f64> {
        self.rays
            .iter()
            .zip(&self.depth)
            .map(|(r, h)| r.origin.z + h * r.dir.z)
            .collect()
    }
}

fn midpoint_rays(rays: Vec<Ray>, bounds: &SceneBounds, n_samples: usize) -> Vec<TrainRay> {
    let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
    let samples = sample_rays(&rays, bounds, n_samples, false, &mut no_rng);
    rays.into_iter()
        .zip(samples)
        .map(|(ray, samples)| TrainRay {
            ray,
            samples,
            rgb: None,
            depth: None,
        })
        .collect()
}

/// Renders every pixel of `camera` with midpoint samples.
pub fn render_image<T: Real>(
    model: &RadianceModel<T>,
    camera: &Camera,
    n_samples: usize,
    opts: &PipelineOptions,
) -> Result<RenderedImage> {
    let rays = camera.all_rays(&model.bounds)?;
    let batch = midpoint_rays(rays.clone(), &model.bounds, n_samples);
    let out = render_rays(model, &batch, opts)?;
    let mut rgb = RgbImage::new(camera.width(), camera.height());
    for (px, r) in rgb.data.chunks_exact_mut(3).zip(&out) {
        px.copy_from_slice(&r.rgb);
    }
    Ok(RenderedImage {
        rgb,
        depth: out.iter().map(|r| r.height).collect(),
        opacity: out.iter().map(|r| r.opacity).collect(),
        rays,
    })
}

/// Gridded surface altitudes; NaN marks invalid cells. Row 0 is the
/// northern (max y) edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Dsm {
    pub nrows: usize,
    pub ncols: usize,
    pub xll: f64,
    pub yll: f64,
    pub cellsize: f64,
    pub values: Vec<f64>,
}

pub const DSM_NODATA: f64 = -9999.0;

impl Dsm {
    /// Empty grid covering the XY extent of `bounds`.
    pub fn for_bounds(bounds: &SceneBounds, cellsize: f64) -> Self {
        let ext = bounds.extent();
        let ncols = ((ext.x / cellsize).round() as usize).max(1);
        let nrows = ((ext.y / cellsize).round() as usize).max(1);
        Self {
            nrows,
            ncols,
            xll: bounds.min.x,
            yll: bounds.max.y - nrows as f64 * cellsize,
            cellsize,
            values: vec![f64::NAN; nrows * ncols],
        }
    }

    /// World XY of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let top = self.yll + self.nrows as f64 * self.cellsize;
        (
            self.xll + (col as f64 + 0.5) * self.cellsize,
            top - (row as f64 + 0.5) * self.cellsize,
        )
    }

    /// Cell containing world XY, if any.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let top = self.yll + self.nrows as f64 * self.cellsize;
        let c = ((x - self.xll) / self.cellsize).floor();
        let r = ((top - y) / self.cellsize).floor();
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.ncols && (r as usize) < self.nrows)
            .then(|| (r as usize, c as usize))
    }

    pub fn same_grid(&self, other: &Dsm) -> bool {
        self.nrows == other.nrows
            && self.ncols == other.ncols
            && (self.xll - other.xll).abs() < 1e-9
            && (self.yll - other.yll).abs() < 1e-9
            && (self.cellsize - other.cellsize).abs() < 1e-12
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_finite()).count()
    }

    /// ESRI ASCII grid text.
    pub fn to_esri_ascii(&self) -> String {
        let mut s = String::new();
        writeln!(s, "ncols {}", self.ncols).unwrap();
        writeln!(s, "nrows {}", self.nrows).unwrap();
        writeln!(s, "xllcorner {}", self.xll).unwrap();
        writeln!(s, "yllcorner {}", self.yll).unwrap();
        writeln!(s, "cellsize {}", self.cellsize).unwrap();
        writeln!(s, "NODATA_value {DSM_NODATA}").unwrap();
        for row in self.values.chunks_exact(self.ncols) {
            let line: Vec<String> = row
                .iter()
                .map(|v| if v.is_finite() { format!("{v:.4}") } else { format!("{DSM_NODATA}") })
                .collect();
            writeln!(s, "{}", line.join(" ")).unwrap();
        }
        s
    }

    pub fn from_esri_ascii(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<f64> {
            let line = lines.next().ok_or_else(|| Error::Parse(format!("missing `{key}`")))?;
            let (k, v) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::Parse(format!("bad header line `{line}`")))?;
            if !k.eq_ignore_ascii_case(key) {
                return Err(Error::Parse(format!("expected `{key}`, found `{k}`")));
            }
            v.trim().parse().map_err(|_| Error::Parse(format!("bad value for `{key}`")))
        };
        let ncols = header("ncols")? as usize;
        let nrows = header("nrows")? as usize;
        let xll = header("xllcorner")?;
        let yll = header("yllcorner")?;
        let cellsize = header("cellsize")?;
        let nodata = header("NODATA_value")?;
        let values: Vec<f64> = lines
            .flat_map(str::split_whitespace)
            .map(|t| {
                t.parse::<f64>()
                    .map(|v| if v == nodata { f64::NAN } else { v })
                    .map_err(|_| Error::Parse(format!("bad grid value `{t}`")))
            })
            .collect::<Result<_>>()?;
        if values.len() != nrows * ncols {
            return Err(Error::Parse(format!(
                "grid has {} values, expected {}",
                values.len(),
                nrows * ncols
            )));
        }
        Ok(Self {
            nrows,
            ncols,
            xll,
            yll,
            cellsize,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_esri_ascii()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_esri_ascii(&text)
    }
}

/// Splats per-ray surface altitudes `o_z + depth d_z` onto the DSM grid of
/// `bounds` by nearest cell, averaging rays that share a cell. Rays below
/// the opacity threshold are skipped.
pub fn dsm_from_altitude(
    depth: &[f64],
    opacity: &[f64],
    rays: &[Ray],
    bounds: &SceneBounds,
    cellsize: f64,
    opacity_threshold: f64,
) -> Dsm {
    let mut dsm = Dsm::for_bounds(bounds, cellsize);
    let mut sum = vec![0.0; dsm.values.len()];
    let mut count = vec![0usize; dsm.values.len()];
    for ((h, op), ray) in depth.iter().zip(opacity).zip(rays) {
        if !(h.is_finite() && *op >= opacity_threshold) {
            continue;
        }
        let p = ray.at(*h);
        if let Some((r, c)) = dsm.cell_of(p.x, p.y) {
            sum[r * dsm.ncols + c] += p.z;
            count[r * dsm.ncols + c] += 1;
        }
    }
    for i in 0..dsm.values.len() {
        if count[i] > 0 {
            dsm.values[i] = sum[i] / count[i] as f64;
        }
    }
    dsm
}

/// DSM of the model from vertical rays through every cell center.
pub fn render_dsm<T: Real>(
    model: &RadianceModel<T>,
    cellsize: f64,
    n_samples: usize,
    opacity_threshold: f64,
    opts: &PipelineOptions,
) -> Result<Dsm> {
    let (rays, _, _) = nadir_grid_rays(&model.bounds, cellsize);
    let batch = midpoint_rays(rays.clone(), &model.bounds, n_samples);
    let out = render_rays(model, &batch, opts)?;
    let depth: Vec<f64> = out.iter().map(|r| r.height).collect();
    let opacity: Vec<f64> = out.iter().map(|r| r.opacity).collect();
    Ok(dsm_from_altitude(&depth, &opacity, &rays, &model.bounds, cellsize, opacity_threshold))
}
