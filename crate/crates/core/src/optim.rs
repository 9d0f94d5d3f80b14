//! Adam with two learning-rate groups, the log-linear decay schedule and the
//! training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{Camera, Ray};
use crate::image::RgbImage;
use crate::losses::LossReport;
use crate::metrics::psnr;
use crate::model::{ParamGroup, RadianceModel};
use crate::pipeline::{forward_backward, sample_rays, PipelineOptions, TrainRay};
use crate::real::Real;
use crate::render::render_image;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const LOSS_CSV_HEADER: &str = "step,rgb,tv,normal,lamb,ds,total,lr_tensor,lr_mlp";

/// `lr(s) = base * decay^(s / S)`, clamped to the final rate past `S`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub tensor: f64,
    pub mlp: f64,
    pub steps: usize,
    pub decay: f64,
}

impl LrSchedule {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            tensor: cfg.optim.lr_tensor,
            mlp: cfg.optim.lr_mlp,
            steps: cfg.optim.steps,
            decay: cfg.optim.decay,
        }
    }

    /// `(lr_tensor, lr_mlp)` at step `s`.
    pub fn lr_at(&self, s: usize) -> (f64, f64) {
        let frac = if self.steps == 0 {
            0.0
        } else {
            s.min(self.steps) as f64 / self.steps as f64
        };
        let f = self.decay.powf(frac);
        (self.tensor * f, self.mlp * f)
    }
}

/// One bias-corrected Adam update of a parameter slice. `t` is the step
/// number after incrementing (1 for the first update).
pub fn adam_update<T: Real>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], t: u64, lr: f64) {
    let (b1, b2) = (T::c(BETA1), T::c(BETA2));
    let one = T::one();
    let c1 = T::c(1.0 - BETA1.powi(t as i32));
    let c2 = T::c(1.0 - BETA2.powi(t as i32));
    let (lr, eps) = (T::c(lr), T::c(ADAM_EPS));
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Moment buffers for every block of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    groups: Vec<ParamGroup>,
    names: Vec<String>,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &RadianceModel<T>) -> Self {
        let blocks = model.blocks();
        Self {
            m: blocks.iter().map(|b| vec![T::zero(); b.len()]).collect(),
            v: blocks.iter().map(|b| vec![T::zero(); b.len()]).collect(),
            t: 0,
            groups: blocks.iter().map(|b| b.group).collect(),
            names: blocks.into_iter().map(|b| b.name).collect(),
        }
    }

    /// Applies one update with per-group rates. A non-finite gradient aborts
    /// before any parameter changes.
    pub fn step(&mut self, model: &mut RadianceModel<T>, grads: &RadianceModel<T>, lr: (f64, f64)) -> Result<()> {
        let g = grads.block_data();
        if g.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!("{} gradient blocks for {} states", g.len(), self.m.len())));
        }
        for (i, block) in g.iter().enumerate() {
            if block.len() != self.m[i].len() {
                return Err(Error::ShapeMismatch(format!("gradient block `{}` has the wrong size", self.names[i])));
            }
            if block.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{}`", self.names[i])));
            }
        }
        self.t += 1;
        for (i, p) in model.block_data_mut().into_iter().enumerate() {
            let rate = match self.groups[i] {
                ParamGroup::Tensor => lr.0,
                ParamGroup::Mlp => lr.1,
            };
            adam_update(p, g[i], &mut self.m[i], &mut self.v[i], self.t, rate);
        }
        Ok(())
    }
}

/// Training rays prepared from a dataset.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub pixels: Vec<(Ray, [f64; 3])>,
    pub depth: Vec<(Ray, f64, f64)>,
    pub validation: Vec<(Camera, RgbImage)>,
}

impl TrainData {
    /// All training-view pixels, depth records and held-out views.
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        ds.validate()?;
        let mut pixels = Vec::new();
        for i in ds.train_indices() {
            let v = &ds.views[i];
            for (j, ray) in v.camera.all_rays(&ds.bounds)?.into_iter().enumerate() {
                pixels.push((ray, v.image.get(j / v.image.width, j % v.image.width)));
            }
        }
        let depth = ds
            .depth_points
            .iter()
            .map(|d| Ok((ds.views[d.view].camera.pixel_ray(d.row, d.col, &ds.bounds)?, d.distance, d.weight)))
            .collect::<Result<_>>()?;
        let validation = ds
            .test_views
            .iter()
            .map(|&i| (ds.views[i].camera.clone(), ds.views[i].image.clone()))
            .collect();
        Ok(Self {
            pixels,
            depth,
            validation,
        })
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub report: LossReport,
    pub lr: (f64, f64),
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, r.rgb, r.tv, r.normal, r.lamb, r.ds, r.total, self.lr.0, self.lr.1
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    /// `(steps completed, mean held-out PSNR)`.
    pub validation: Vec<(usize, f64)>,
    pub best: Option<(usize, f64)>,
    /// Steps actually run; fewer than configured when the time limit hit.
    pub steps_done: usize,
}

/// Cycles through a shuffled index set, reshuffling after each pass.
struct EpochSampler {
    order: Vec<usize>,
    next: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            next: n,
        }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let k = k.min(self.order.len());
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.next == self.order.len() {
                self.order.shuffle(rng);
                self.next = 0;
            }
            let m = (k - out.len()).min(self.order.len() - self.next);
            out.extend_from_slice(&self.order[self.next..self.next + m]);
            self.next += m;
        }
        out
    }
}

/// Mean PSNR of the model over the held-out views.
pub fn validation_psnr<T: Real>(
    model: &RadianceModel<T>,
    views: &[(Camera, RgbImage)],
    samples: usize,
    opts: &PipelineOptions,
) -> Result<f64> {
    let mut sum = 0.0;
    for (cam, gt) in views {
        let r = render_image(model, cam, samples, opts)?;
        sum += psnr(&r.rgb.clamped(), gt)?;
    }
    Ok(sum / views.len().max(1) as f64)
}

fn checkpoint_of<T: Real>(model: &RadianceModel<T>, cfg: &Config, step: usize) -> Checkpoint {
    Checkpoint {
        step,
        config: cfg.clone(),
        model: model.cast(),
    }
}

/// Runs `cfg.optim.steps` Adam steps on `model`, or fewer when
/// `cfg.train.time_limit` seconds run out. With `out`, writes
/// `loss.csv`, `val.csv`, `best.strf` (whenever validation PSNR improves)
/// and `final.strf`. A non-finite loss aborts with [`Error::Diverged`];
/// the last good checkpoint stays on disk.
pub fn train<T: Real>(
    model: &mut RadianceModel<T>,
    data: &TrainData,
    cfg: &Config,
    out: Option<&Path>,
    mut on_step: impl FnMut(&StepLog) + Send,
) -> Result<TrainOutcome> {
    if data.pixels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::InvalidConfigValue {
            key: "threads".into(),
            reason: e.to_string(),
        })?;
    pool.install(|| train_inner(model, data, cfg, out, &mut on_step))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train_inner<T: Real>(
    model: &mut RadianceModel<T>,
    data: &TrainData,
    cfg: &Config,
    out: Option<&Path>,
    on_step: &mut (dyn FnMut(&StepLog) + Send),
) -> Result<TrainOutcome> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let opts = PipelineOptions::from_config(cfg);
    let schedule = LrSchedule::from_config(cfg);
    let mut adam = AdamState::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_b47c);
    let mut pixel_sampler = EpochSampler::new(data.pixels.len());
    let mut depth_sampler = EpochSampler::new(data.depth.len());
    let use_depth = cfg.loss.weights.ds > 0.0 && cfg.optim.depth_batch > 0;

    let mut csv = format!("{LOSS_CSV_HEADER}\n");
    let mut val_csv = String::from("step,psnr\n");
    let mut outcome = TrainOutcome {
        log: Vec::new(),
        validation: Vec::new(),
        best: None,
        steps_done: 0,
    };
    let steps = cfg.optim.steps;
    let started = std::time::Instant::now();
    let limit = cfg.train.time_limit;
    let validate_now = |done: usize| {
        !data.validation.is_empty() && done > 0 && (done == steps || (cfg.train.val_every > 0 && done % cfg.train.val_every == 0))
    };

    for step in 0..steps {
        let lr = schedule.lr_at(step);
        let idx = pixel_sampler.take(cfg.optim.batch, &mut rng);
        let rays: Vec<Ray> = idx.iter().map(|&i| data.pixels[i].0).collect();
        let mut batch: Vec<TrainRay> = sample_rays(&rays, &model.bounds, cfg.render.samples, cfg.render.stratified, &mut rng)
            .into_iter()
            .zip(&idx)
            .map(|(samples, &i)| TrainRay {
                ray: data.pixels[i].0,
                samples,
                rgb: Some(data.pixels[i].1),
                depth: None,
            })
            .collect();
        if use_depth {
            let didx = depth_sampler.take(cfg.optim.depth_batch, &mut rng);
            let drays: Vec<Ray> = didx.iter().map(|&i| data.depth[i].0).collect();
            let dsamples = sample_rays(&drays, &model.bounds, cfg.render.samples, cfg.render.stratified, &mut rng);
            batch.extend(dsamples.into_iter().zip(&didx).map(|(samples, &i)| {
                let (ray, dist, w) = data.depth[i];
                TrainRay {
                    ray,
                    samples,
                    rgb: None,
                    depth: Some((dist, w)),
                }
            }));
        }
        let result = forward_backward(model, &batch, &opts).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged {
                step,
                reason: format!("non-finite value in {what}"),
            },
            other => other,
        })?;
        if !result.report.total.is_finite() {
            if let Some(dir) = out {
                write_file(&dir.join("loss.csv"), &csv)?;
            }
            return Err(Error::Diverged {
                step,
                reason: format!("loss is {}", result.report.total),
            });
        }
        adam.step(model, &result.grads, lr).map_err(|e| Error::Diverged {
            step,
            reason: e.to_string(),
        })?;
        let log = StepLog {
            step,
            report: result.report,
            lr,
        };
        writeln!(csv, "{}", log.csv_row()).unwrap();
        on_step(&log);
        outcome.log.push(log);

        let done = step + 1;
        outcome.steps_done = done;
        let out_of_time = limit > 0.0 && started.elapsed().as_secs_f64() >= limit;
        if validate_now(done) || (out_of_time && !data.validation.is_empty()) {
            let p = validation_psnr(model, &data.validation, cfg.render.samples, &opts)?;
            outcome.validation.push((done, p));
            writeln!(val_csv, "{done},{p}").unwrap();
            if outcome.best.map_or(true, |(_, b)| p > b) {
                outcome.best = Some((done, p));
                if let Some(dir) = out {
                    checkpoint_of(model, cfg, done).save(&dir.join("best.strf"))?;
                }
            }
        }
        if out_of_time {
            break;
        }
    }
    let steps = outcome.steps_done;
    if let Some(dir) = out {
        write_file(&dir.join("loss.csv"), &csv)?;
        write_file(&dir.join("val.csv"), &val_csv)?;
        checkpoint_of(model, cfg, steps).save(&dir.join("final.strf"))?;
        if outcome.best.is_none() {
            checkpoint_of(model, cfg, steps).save(&dir.join("best.strf"))?;
        }
    }
    Ok(outcome)
}
