//! Builds the differentiable rendering graph for batches of rays and runs
//! it forward (rendering) or forward and backward (training).

use rand::Rng;
use rayon::prelude::*;

use crate::config::Config;
use crate::error::Result;
use crate::geometry::{sample_along_ray, Ray, RaySampleSet, SceneBounds};
use crate::lightfield::{Appearance, HEAD_A_OUT};
use crate::losses::{LossReport, LossWeights, Regularizer};
use crate::model::{FieldKind, HeadKind, ModelGradients, RadianceModel};
use crate::real::Real;
use crate::render::RenderedRay;
use crate::tape::{Act, NodeId, Tape};

/// Floor on the accumulated weight when normalizing the rendered height.
pub const HEIGHT_EPS: f64 = 1e-10;

/// Settings shared by rendering and training.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub weights: LossWeights,
    pub regularizer: Regularizer,
    pub tv_all_planes: bool,
    pub weight_threshold: f64,
    pub chunk_rays: usize,
    pub background: [f64; 3],
}

impl PipelineOptions {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            weights: cfg.loss.weights,
            regularizer: cfg.loss.regularizer,
            tv_all_planes: cfg.loss.tv_all_planes,
            weight_threshold: cfg.render.weight_threshold,
            chunk_rays: cfg.render.chunk_rays,
            background: cfg.render.background,
        }
    }
}

/// A ray with its samples and optional supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRay {
    pub ray: Ray,
    pub samples: Option<RaySampleSet>,
    pub rgb: Option<[f64; 3]>,
    /// `(distance, weight)` of a known surface point on this ray.
    pub depth: Option<(f64, f64)>,
}

/// Samples every ray of `rays` inside `bounds`.
pub fn sample_rays<R: Rng + ?Sized>(
    rays: &[Ray],
    bounds: &SceneBounds,
    n_samples: usize,
    stratified: bool,
    rng: &mut R,
) -> Vec<Option<RaySampleSet>> {
    rays.iter()
        .map(|r| sample_along_ray(r, bounds, n_samples, stratified, rng))
        .collect()
}

/// Batch-wide divisors so that chunk losses add up to batch means.
#[derive(Debug, Clone, Copy)]
struct Normalizers {
    rgb: f64,
    rays: f64,
    depth: f64,
}

impl Normalizers {
    fn of(batch: &[TrainRay]) -> Self {
        let rgb = batch.iter().filter(|r| r.rgb.is_some()).count();
        let rays = batch.iter().filter(|r| r.samples.is_some()).count();
        let depth = batch
            .iter()
            .filter(|r| r.depth.is_some() && r.samples.is_some())
            .count();
        Self {
            rgb: rgb.max(1) as f64,
            rays: rays.max(1) as f64,
            depth: depth.max(1) as f64,
        }
    }
}

/// Node handles of one chunk graph.
struct ChunkGraph {
    /// Rays with samples, in chunk order.
    hit: Vec<usize>,
    rgb: NodeId,
    opacity: NodeId,
    height: NodeId,
    normal: NodeId,
    lamb: NodeId,
    rgb_loss: Option<NodeId>,
    depth_loss: Option<NodeId>,
    total: NodeId,
}

fn to_t3<T: Real>(v: [f64; 3]) -> [T; 3] {
    v.map(T::c)
}

/// Records the full rendering and loss graph for `rays` on `tape`.
fn build_chunk<T: Real>(
    tape: &mut Tape<'_, T>,
    model: &RadianceModel<T>,
    rays: &[TrainRay],
    opts: &PipelineOptions,
    norm: Normalizers,
) -> Result<Option<ChunkGraph>> {
    let hit: Vec<usize> = (0..rays.len()).filter(|&i| rays[i].samples.is_some()).collect();
    if hit.is_empty() {
        return Ok(None);
    }
    let scale = 1.0 / model.bounds.max_extent();
    let mut segments = vec![0usize];
    let mut points = Vec::new();
    let mut delta = Vec::new();
    let mut t_world = Vec::new();
    let mut sample_ray = Vec::new();
    for (h, &i) in hit.iter().enumerate() {
        let s = rays[i].samples.as_ref().expect("hit ray has samples");
        points.extend(s.positions.iter().map(|p| to_t3::<T>(*p)));
        delta.extend(s.delta.iter().map(|d| T::c(d * scale)));
        t_world.extend(s.t.iter().map(|t| T::c(*t)));
        sample_ray.extend(std::iter::repeat(h).take(s.len()));
        segments.push(points.len());
    }
    let dirs: Vec<[T; 3]> = hit
        .iter()
        .map(|&i| {
            let d = rays[i].ray.dir;
            [T::c(d.x), T::c(d.y), T::c(d.z)]
        })
        .collect();

    // Density and compositing weights on every sample.
    let sig_raw = tape.field("sigma_raw", FieldKind::Sigma, points.clone())?;
    let sig_act = tape.act("sigma_softplus", sig_raw, Act::Softplus)?;
    let sigma = tape.row_mean("sigma", sig_act, T::c(model.density_scale))?;
    let alpha = tape.alpha("alpha", sigma, delta)?;
    let tr = tape.transmittance("transmittance", alpha, segments.clone())?;
    let w = tape.mul("weight", tr, alpha)?;
    let lam_raw = tape.field("amb_lambda_raw", FieldKind::AmbLambda, points.clone())?;
    let lam_act = tape.act("amb_lambda_sigmoid", lam_raw, Act::Sigmoid)?;
    let lam = tape.row_mean("amb_lambda", lam_act, T::one())?;

    // Appearance only where the sample contributes.
    let thr = T::c(opts.weight_threshold);
    let keep: Vec<usize> = {
        let wv = tape.value(w);
        (0..wv.len())
            .filter(|&i| opts.weight_threshold <= 0.0 || wv[i] > thr)
            .collect()
    };
    let mut kseg = vec![0usize];
    {
        let mut j = 0;
        for h in 0..hit.len() {
            while j < keep.len() && sample_ray[keep[j]] == h {
                j += 1;
            }
            kseg.push(j);
        }
    }
    let kpoints: Vec<[T; 3]> = keep.iter().map(|&i| points[i]).collect();
    let kdirs: Vec<[T; 3]> = keep.iter().map(|&i| dirs[sample_ray[i]]).collect();
    let komega: Vec<[T; 3]> = kdirs.iter().map(|d| d.map(|v| -v)).collect();
    let kw = tape.gather("weight_kept", w, keep.clone())?;

    let feat = tape.field("reflect_features", FieldKind::Reflect, kpoints.clone())?;
    let head_a = model.head(HeadKind::A).expect("head A");
    let mut h = feat;
    let last = head_a.layers.len() - 1;
    for layer in 0..last {
        let z = tape.linear("head_a_linear", h, HeadKind::A, layer)?;
        h = tape.act("head_a_relu", z, Act::Relu)?;
    }
    let a_out = tape.linear("head_a_out", h, HeadKind::A, last)?;
    debug_assert_eq!(tape.shape(a_out).1, HEAD_A_OUT);
    let cd_raw = tape.columns("c_d_raw", a_out, 0, 3)?;
    let c_d = tape.act("c_d", cd_raw, Act::Sigmoid)?;
    let n_raw = tape.columns("normal_raw", a_out, 4, 3)?;
    let normal = tape.normalize("normal", n_raw)?;

    let shape = &model.light.shape;
    let c_ref = match shape.appearance {
        Appearance::Lambertian => c_d,
        app => {
            let ls_raw = tape.columns("lambda_s_raw", a_out, 3, 1)?;
            let lambda_s = tape.act("lambda_s", ls_raw, Act::Sigmoid)?;
            let b_hidden = tape.linear("head_b_linear", h, HeadKind::B, 0)?;
            let b_hidden = tape.act("head_b_relu", b_hidden, Act::Relu)?;
            let b_out = tape.linear("head_b_out", b_hidden, HeadKind::B, 1)?;
            let c_s = if app == Appearance::Asg {
                let fs = tape.asg("asg_features", b_out, komega, shape.asg_dim)?;
                let cos = tape.dot_const("cos_nd", normal, kdirs.clone())?;
                let d_in = tape.concat("head_d_input", fs, cos)?;
                let d_hidden = tape.linear("head_d_linear", d_in, HeadKind::D, 0)?;
                let d_hidden = tape.act("head_d_relu", d_hidden, Act::Relu)?;
                let d_out = tape.linear("head_d_out", d_hidden, HeadKind::D, 1)?;
                tape.act("c_s", d_out, Act::Sigmoid)?
            } else {
                tape.sh("c_s", b_out, komega, shape.sh_degree)?
            };
            let spec = tape.mul_col("specular", c_s, lambda_s)?;
            tape.add("c_ref", c_d, spec)?
        }
    };
    let camb_raw = tape.field("amb_color_raw", FieldKind::AmbColor, kpoints)?;
    let camb = tape.act("amb_color", camb_raw, Act::Sigmoid)?;
    let klam = tape.gather("amb_lambda_kept", lam, keep.clone())?;
    let light = tape.ambient("irradiance", klam, camb)?;
    let color = tape.mul("color", c_ref, light)?;

    let weighted = tape.mul_col("weighted_color", color, kw)?;
    let rgb = tape.segment_sum("rgb", weighted, kseg.clone())?;
    let opacity = tape.segment_sum("opacity", w, segments.clone())?;
    let wt = tape.scale_rows("weighted_distance", w, t_world)?;
    let wt = tape.segment_sum("distance_sum", wt, segments.clone())?;
    let height = tape.safe_div("height", wt, opacity, T::c(HEIGHT_EPS))?;

    // Losses.
    let sup: Vec<usize> = (0..hit.len()).filter(|&h| rays[hit[h]].rgb.is_some()).collect();
    let rgb_loss = if sup.is_empty() {
        None
    } else {
        let target: Vec<T> = sup
            .iter()
            .flat_map(|&h| rays[hit[h]].rgb.expect("supervised").map(T::c))
            .collect();
        let pred = tape.gather("rgb_supervised", rgb, sup)?;
        Some(tape.mse("loss_rgb", pred, target, T::c(norm.rgb))?)
    };
    let nscale: Vec<T> = keep
        .iter()
        .map(|&i| {
            let h = sample_ray[i];
            let n = segments[h + 1] - segments[h];
            T::c(1.0 / (n as f64 * norm.rays))
        })
        .collect();
    let normal_loss = tape.normal_loss("loss_normal", normal, kw, kdirs, nscale)?;
    let lamb_loss = tape.lamb_amb("loss_lambda_amb", tr, alpha, lam, segments, T::c(norm.rays))?;
    let dsup: Vec<usize> = (0..hit.len()).filter(|&h| rays[hit[h]].depth.is_some()).collect();
    let depth_loss = if dsup.is_empty() {
        None
    } else {
        let (target, weight): (Vec<T>, Vec<T>) = dsup
            .iter()
            .map(|&h| {
                let (d, w) = rays[hit[h]].depth.expect("depth ray");
                (T::c(d), T::c(w))
            })
            .unzip();
        let hs = tape.gather("height_supervised", height, dsup)?;
        Some(tape.depth_loss("loss_depth", hs, target, weight, T::c(norm.depth))?)
    };
    let wts = &opts.weights;
    let mut terms = vec![(normal_loss, T::c(wts.normal)), (lamb_loss, T::c(wts.lamb))];
    if let Some(id) = rgb_loss {
        terms.push((id, T::c(wts.rgb)));
    }
    if let Some(id) = depth_loss {
        terms.push((id, T::c(wts.ds)));
    }
    let total = tape.weighted_sum("loss_total", terms)?;
    Ok(Some(ChunkGraph {
        hit,
        rgb,
        opacity,
        height,
        normal: normal_loss,
        lamb: lamb_loss,
        rgb_loss,
        depth_loss,
        total,
    }))
}

fn chunk_outputs<T: Real>(tape: &Tape<'_, T>, g: Option<&ChunkGraph>, n: usize, bg: [f64; 3]) -> Vec<RenderedRay> {
    let mut out = vec![
        RenderedRay {
            rgb: bg,
            height: f64::NAN,
            opacity: 0.0,
        };
        n
    ];
    if let Some(g) = g {
        let (rgb, op, h) = (tape.value(g.rgb), tape.value(g.opacity), tape.value(g.height));
        for (k, &i) in g.hit.iter().enumerate() {
            out[i] = RenderedRay {
                rgb: [rgb[3 * k].f64(), rgb[3 * k + 1].f64(), rgb[3 * k + 2].f64()],
                height: h[k].f64(),
                opacity: op[k].f64(),
            };
        }
    }
    out
}

fn chunk_report<T: Real>(tape: &Tape<'_, T>, g: Option<&ChunkGraph>, rgb_const: f64, w: &LossWeights) -> LossReport {
    let mut r = LossReport {
        rgb: rgb_const,
        total: w.rgb * rgb_const,
        ..LossReport::default()
    };
    if let Some(g) = g {
        r.rgb += g.rgb_loss.map_or(0.0, |id| tape.scalar(id).f64());
        r.normal = tape.scalar(g.normal).f64();
        r.lamb = tape.scalar(g.lamb).f64();
        r.ds = g.depth_loss.map_or(0.0, |id| tape.scalar(id).f64());
        r.total += tape.scalar(g.total).f64();
    }
    r
}

fn add_report(a: &mut LossReport, b: &LossReport) {
    a.rgb += b.rgb;
    a.tv += b.tv;
    a.normal += b.normal;
    a.lamb += b.lamb;
    a.ds += b.ds;
    a.total += b.total;
}

/// Loss from supervised rays that miss the box and render the background.
fn rgb_const_of(rays: &[TrainRay], bg: [f64; 3], norm: Normalizers) -> f64 {
    rays.iter()
        .filter(|r| r.samples.is_none())
        .filter_map(|r| r.rgb)
        .map(|gt| (0..3).map(|k| (bg[k] - gt[k]).powi(2)).sum::<f64>() / norm.rgb)
        .sum()
}

/// Renders rays without recording gradients. Chunks run on the current
/// rayon pool; results do not depend on the thread count.
pub fn render_rays<T: Real>(
    model: &RadianceModel<T>,
    rays: &[TrainRay],
    opts: &PipelineOptions,
) -> Result<Vec<RenderedRay>> {
    let norm = Normalizers::of(rays);
    let chunks: Vec<Result<Vec<RenderedRay>>> = rays
        .par_chunks(opts.chunk_rays.max(1))
        .map(|chunk| {
            let mut tape = Tape::new(model);
            let g = build_chunk(&mut tape, model, chunk, opts, norm)?;
            Ok(chunk_outputs(&tape, g.as_ref(), chunk.len(), opts.background))
        })
        .collect();
    let mut out = Vec::with_capacity(rays.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Losses and parameter gradients of one batch.
pub struct StepResult<T> {
    pub report: LossReport,
    pub grads: ModelGradients<T>,
    pub rendered: Vec<RenderedRay>,
}

/// Evaluates the weighted loss on `batch` and its exact gradient with
/// respect to every parameter block. Gradients are summed over fixed-size
/// chunks in chunk order, so the result is independent of the thread count.
pub fn forward_backward<T: Real>(
    model: &RadianceModel<T>,
    batch: &[TrainRay],
    opts: &PipelineOptions,
) -> Result<StepResult<T>> {
    let norm = Normalizers::of(batch);
    let w = &opts.weights;
    let parts: Vec<Result<(LossReport, ModelGradients<T>, Vec<RenderedRay>)>> = batch
        .par_chunks(opts.chunk_rays.max(1))
        .map(|chunk| {
            let mut tape = Tape::new(model);
            let mut grads = model.zeros_like();
            let g = build_chunk(&mut tape, model, chunk, opts, norm)?;
            let rgb_const = rgb_const_of(chunk, opts.background, norm);
            if let Some(g) = &g {
                tape.backward(g.total, &mut grads)?;
            }
            let report = chunk_report(&tape, g.as_ref(), rgb_const, w);
            let rendered = chunk_outputs(&tape, g.as_ref(), chunk.len(), opts.background);
            Ok((report, grads, rendered))
        })
        .collect();
    let mut report = LossReport::default();
    let mut grads: Option<ModelGradients<T>> = None;
    let mut rendered = Vec::with_capacity(batch.len());
    for p in parts {
        let (r, g, out) = p?;
        add_report(&mut report, &r);
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => acc.add_assign(&g),
        }
        rendered.extend(out);
    }
    let mut grads = grads.unwrap_or_else(|| model.zeros_like());

    if opts.regularizer != Regularizer::None {
        let mut tape = Tape::new(model);
        let reg = tape.regularizer("regularizer", FieldKind::Sigma, opts.regularizer, opts.tv_all_planes)?;
        let total = tape.weighted_sum("regularizer_weighted", vec![(reg, T::c(w.tv))])?;
        tape.backward(total, &mut grads)?;
        report.tv = tape.scalar(reg).f64();
        report.total += tape.scalar(total).f64();
    }
    Ok(StepResult {
        report,
        grads,
        rendered,
    })
}

/// Total loss only; used by finite differences.
pub fn loss_only<T: Real>(model: &RadianceModel<T>, batch: &[TrainRay], opts: &PipelineOptions) -> Result<LossReport> {
    let norm = Normalizers::of(batch);
    let mut report = LossReport::default();
    for chunk in batch.chunks(opts.chunk_rays.max(1)) {
        let mut tape = Tape::new(model);
        let g = build_chunk(&mut tape, model, chunk, opts, norm)?;
        let rgb_const = rgb_const_of(chunk, opts.background, norm);
        add_report(&mut report, &chunk_report(&tape, g.as_ref(), rgb_const, &opts.weights));
    }
    if opts.regularizer != Regularizer::None {
        let mut tape = Tape::new(model);
        let reg = tape.regularizer("regularizer", FieldKind::Sigma, opts.regularizer, opts.tv_all_planes)?;
        report.tv = tape.scalar(reg).f64();
        report.total += opts.weights.tv * report.tv;
    }
    Ok(report)
}

/// ReLU sign pattern of every chunk graph of `batch`, concatenated.
pub fn relu_pattern<T: Real>(model: &RadianceModel<T>, batch: &[TrainRay], opts: &PipelineOptions) -> Result<Vec<bool>> {
    let norm = Normalizers::of(batch);
    let mut out = Vec::new();
    for chunk in batch.chunks(opts.chunk_rays.max(1)) {
        let mut tape = Tape::new(model);
        build_chunk(&mut tape, model, chunk, opts, norm)?;
        out.extend(tape.relu_pattern());
    }
    Ok(out)
}
