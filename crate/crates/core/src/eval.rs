//! Held-out evaluation: image quality per view and altitude error of the
//! rendered DSM.

use std::fmt::Write as _;

use crate::config::Config;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{altitude_mae, psnr, ssim};
use crate::model::RadianceModel;
use crate::pipeline::PipelineOptions;
use crate::real::Real;
use crate::render::{dsm_from_altitude, render_dsm, render_image, Dsm};

pub const METRICS_CSV_HEADER: &str = "view,psnr,ssim,mae";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            "all" => Ok(Self::All),
            _ => Err(Error::InvalidConfigValue {
                key: "split".into(),
                reason: format!("`{s}` is not one of train, test, all"),
            }),
        }
    }

    pub fn views(self, ds: &Dataset) -> Vec<usize> {
        (0..ds.views.len())
            .filter(|&v| match self {
                Self::Train => !ds.is_test(v),
                Self::Test => ds.is_test(v),
                Self::All => true,
            })
            .collect()
    }
}

/// Metrics of one view. `mae` compares the view's own altitude map,
/// splatted onto the truth grid, with the truth DSM (NaN without one).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub views: Vec<ViewMetrics>,
    /// Nadir-rendered DSM on the truth grid.
    pub dsm: Option<Dsm>,
    /// Altitude MAE of `dsm` against the truth DSM.
    pub dsm_mae: f64,
}

impl Evaluation {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.views.iter().map(|v| v.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.views.iter().map(|v| v.ssim))
    }

    /// One row per view, then an `all` row with the mean PSNR and SSIM and
    /// the nadir DSM error.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_CSV_HEADER}\n");
        for v in &self.views {
            writeln!(s, "{},{},{},{}", v.view, v.psnr, v.ssim, v.mae).unwrap();
        }
        writeln!(s, "all,{},{},{}", self.mean_psnr(), self.mean_ssim(), self.dsm_mae).unwrap();
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn mae_or_nan(pred: &Dsm, truth: &Dsm) -> Result<f64> {
    match altitude_mae(pred, truth) {
        Ok(m) => Ok(m),
        Err(Error::NoValidCells) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

/// Renders every view of `split` and the nadir DSM, and scores them.
pub fn evaluate<T: Real>(model: &RadianceModel<T>, ds: &Dataset, split: Split, cfg: &Config) -> Result<Evaluation> {
    let opts = PipelineOptions::from_config(cfg);
    let n = cfg.render.samples;
    let thr = cfg.render.opacity_threshold;
    let mut views = Vec::new();
    for v in split.views(ds) {
        let view = &ds.views[v];
        let r = render_image(model, &view.camera, n, &opts)?;
        let pred = r.rgb.clamped();
        let mae = match &ds.truth_dsm {
            Some(truth) => {
                let d = dsm_from_altitude(&r.depth, &r.opacity, &r.rays, &model.bounds, truth.cellsize, thr);
                mae_or_nan(&d, truth)?
            }
            None => f64::NAN,
        };
        views.push(ViewMetrics {
            view: v,
            psnr: psnr(&pred, &view.image)?,
            ssim: ssim(&pred, &view.image)?,
            mae,
        });
    }
    let (dsm, dsm_mae) = match &ds.truth_dsm {
        Some(truth) => {
            let d = render_dsm(model, truth.cellsize, n, thr, &opts)?;
            let m = mae_or_nan(&d, truth)?;
            (Some(d), m)
        }
        None => (None, f64::NAN),
    };
    Ok(Evaluation { views, dsm, dsm_mae })
}

/// Mean opacity the field accumulates in free space in front of the true
/// surface, over the transient-masked pixels of the training views. Rays are
/// integrated with `n_samples` midpoint samples from the box entry to
/// `margin` world units short of the true first hit. NaN when no view has a
/// mask and true depths.
pub fn masked_free_space_opacity<T: Real>(
    model: &RadianceModel<T>,
    ds: &Dataset,
    n_samples: usize,
    margin: f64,
) -> Result<f64> {
    let scale = 1.0 / model.bounds.max_extent();
    let mut sum = 0.0;
    let mut count = 0usize;
    for view in &ds.views {
        let (Some(mask), Some(depth)) = (&view.mask, &view.depth) else {
            continue;
        };
        let w = view.camera.width();
        for (idx, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            let ray = view.camera.pixel_ray(idx / w, idx % w, &model.bounds)?;
            let Some((t0, _)) = model.bounds.intersect(&ray) else {
                continue;
            };
            let t1 = depth[idx] - margin;
            count += 1;
            if !(t1 > t0) {
                continue;
            }
            let dt = (t1 - t0) / n_samples as f64;
            let mut tau = 0.0;
            for s in 0..n_samples {
                let (p, _) = model.bounds.normalize_point(&ray.at(t0 + (s as f64 + 0.5) * dt));
                let p = [T::c(p.x), T::c(p.y), T::c(p.z)];
                tau += model.density(&p).f64() * dt * scale;
            }
            sum += 1.0 - (-tau).exp();
        }
    }
    Ok(if count == 0 { f64::NAN } else { sum / count as f64 })
}
