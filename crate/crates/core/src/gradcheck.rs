//! Verifies the tape's parameter gradients against central differences of
//! the full loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{Ray, SceneBounds, Vec3};
use crate::model::RadianceModel;
use crate::pipeline::{forward_backward, loss_only, relu_pattern, sample_rays, PipelineOptions, TrainRay};

/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-6;

/// `(f(x + eps) - f(x - eps)) / (2 eps)`.
pub fn finite_difference(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub block: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    /// Draws whose `x +- eps` interval switched a ReLU and were replaced.
    pub kinks: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    /// `(block, max abs err, max rel err)` per checked block, in first-seen
    /// order.
    pub fn by_block(&self) -> Vec<(String, f64, f64)> {
        let mut out: Vec<(String, f64, f64)> = Vec::new();
        for r in &self.rows {
            let abs = (r.analytic - r.numeric).abs();
            match out.iter_mut().find(|b| b.0 == r.block) {
                Some(b) => {
                    b.1 = b.1.max(abs);
                    b.2 = b.2.max(r.rel_err);
                }
                None => out.push((r.block.clone(), abs, r.rel_err)),
            }
        }
        out
    }

    /// One line per block: name, max abs err, max rel err, pass/fail.
    pub fn table(&self) -> String {
        let mut s = String::from("block,max_abs_err,max_rel_err,result\n");
        for (name, abs, rel) in self.by_block() {
            let verdict = if rel < self.tolerance { "pass" } else { "fail" };
            s.push_str(&format!("{name},{abs:.3e},{rel:.3e},{verdict}\n"));
        }
        s
    }
}

/// Random rays through the box, each with a color target and a depth
/// target, so every loss term contributes.
pub fn gradcheck_batch<R: Rng>(bounds: &SceneBounds, n_rays: usize, samples: usize, rng: &mut R) -> Vec<TrainRay> {
    let c = bounds.center();
    let ext = bounds.extent();
    let mut rays = Vec::with_capacity(n_rays);
    while rays.len() < n_rays {
        let target = Vec3::new(
            c.x + ext.x * rng.gen_range(-0.3..0.3),
            c.y + ext.y * rng.gen_range(-0.3..0.3),
            c.z + ext.z * rng.gen_range(-0.3..0.3),
        );
        let dir = Vec3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), -1.0);
        let origin = target - dir * (2.0 * bounds.max_extent());
        if let Ok(r) = Ray::new(origin, dir, (rays.len(), 0)) {
            if bounds.intersect(&r).is_some() {
                rays.push(r);
            }
        }
    }
    let sampled = sample_rays(&rays, bounds, samples, true, rng);
    rays.into_iter()
        .zip(sampled)
        .map(|(ray, samples)| {
            let (t0, t1) = bounds.intersect(&ray).expect("checked above");
            TrainRay {
                ray,
                samples,
                rgb: Some([rng.gen(), rng.gen(), rng.gen()]),
                depth: Some((rng.gen_range(t0..t1), rng.gen_range(0.3..1.0))),
            }
        })
        .collect()
}

/// Compares analytic and central-difference gradients for `n_params`
/// parameters. Blocks are drawn uniformly; within a block, half of the draws
/// prefer entries the batch actually influences so that sparse grids are not
/// checked only where both gradients vanish. A draw whose probe interval
/// flips a ReLU has no valid central difference; it is counted in `kinks`
/// and replaced.
pub fn gradcheck(
    model: &RadianceModel<f64>,
    batch: &[TrainRay],
    opts: &PipelineOptions,
    n_params: usize,
    eps: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradcheckReport> {
    let analytic = forward_backward(model, batch, opts)?.grads;
    let blocks = model.blocks();
    let grads = analytic.block_data();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let active: Vec<Vec<usize>> = grads
        .iter()
        .map(|g| (0..g.len()).filter(|&i| g[i] != 0.0).collect())
        .collect();
    // Every block once (as far as the budget allows), then uniform blocks.
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.shuffle(&mut rng);
    let draw = |k: usize, rng: &mut ChaCha8Rng| {
        let b = if k < order.len() { order[k] } else { rng.gen_range(0..blocks.len()) };
        let i = if !active[b].is_empty() && rng.gen::<bool>() {
            *active[b].choose(rng).expect("non-empty")
        } else {
            rng.gen_range(0..blocks[b].len())
        };
        (b, i)
    };

    let mut probe = model.clone();
    let mut seen = std::collections::HashSet::new();
    let mut rows = Vec::with_capacity(n_params);
    let mut kinks = 0;
    let mut attempts = 0;
    while rows.len() < n_params {
        attempts += 1;
        if attempts > 100 * n_params.max(1) {
            return Err(Error::NonFinite(format!(
                "gradcheck found {} smooth probes in {attempts} draws ({kinks} straddled a ReLU)",
                rows.len()
            )));
        }
        let (b, i) = draw(attempts - 1, &mut rng);
        if !seen.insert((b, i)) {
            continue;
        }
        let x0 = model.block_data()[b][i];
        let mut eval = |x: f64| -> Result<(f64, Vec<bool>)> {
            probe.block_data_mut()[b][i] = x;
            Ok((loss_only(&probe, batch, opts)?.total, relu_pattern(&probe, batch, opts)?))
        };
        let (plus, pat_plus) = eval(x0 + eps)?;
        let (minus, pat_minus) = eval(x0 - eps)?;
        probe.block_data_mut()[b][i] = x0;
        if pat_plus != pat_minus {
            kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = grads[b][i];
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!("finite difference of `{}`[{i}]", blocks[b].name)));
        }
        rows.push(GradcheckRow {
            block: blocks[b].name.clone(),
            index: i,
            analytic: a,
            numeric,
            rel_err: relative_error(a, numeric),
        });
    }
    let max_rel_err = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        rows,
        kinks,
        max_rel_err,
        tolerance,
    })
}

/// Gradcheck of a freshly initialized model described by `cfg`, in 64-bit
/// precision, with appearance culling disabled so the loss is smooth.
pub fn gradcheck_config(cfg: &Config, bounds: SceneBounds) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = RadianceModel::<f64>::new(cfg, bounds, &mut rng);
    let batch = gradcheck_batch(&bounds, cfg.gradcheck.rays, cfg.render.samples, &mut rng);
    let mut opts = PipelineOptions::from_config(cfg);
    opts.weight_threshold = 0.0;
    let g = &cfg.gradcheck;
    gradcheck(&model, &batch, &opts, g.params, g.eps, g.tolerance, cfg.seed ^ 0x9c)
}
