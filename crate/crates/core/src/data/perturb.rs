use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const TRANSIENT_MIN_SIDE: usize = 3;
pub const TRANSIENT_MAX_SIDE: usize = 9;
/// Spread of the simulated reprojection error, in pixels.
pub const REPROJECTION_SIGMA: f64 = 0.5;
const PLACEMENT_ATTEMPTS: usize = 10_000;

/// An image with pasted transient occluders.
#[derive(Debug, Clone, PartialEq)]
pub struct Transients {
    pub image: RgbImage,
    pub mask: Vec<bool>,
    /// `(row, col, height, width)` of each rectangle.
    pub rects: Vec<(usize, usize, usize, usize)>,
}

/// Pastes `k` non-overlapping rectangles (3 to 9 px a side) at seeded
/// positions. Each rectangle takes, per channel, the extreme opposite to the
/// mean of the pixels it covers. The mask marks every changed pixel.
pub fn inject_transients(image: &RgbImage, seed: u64, k: usize) -> Result<Transients> {
    let (w, h) = (image.width, image.height);
    let mut out = image.clone();
    let mut mask = vec![false; w * h];
    let mut rects = Vec::with_capacity(k);
    if k == 0 {
        return Ok(Transients { image: out, mask, rects });
    }
    if w < TRANSIENT_MIN_SIDE || h < TRANSIENT_MIN_SIDE {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            window: TRANSIENT_MIN_SIDE,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..PLACEMENT_ATTEMPTS {
        if rects.len() == k {
            break;
        }
        let rw = rng.gen_range(TRANSIENT_MIN_SIDE..=TRANSIENT_MAX_SIDE.min(w));
        let rh = rng.gen_range(TRANSIENT_MIN_SIDE..=TRANSIENT_MAX_SIDE.min(h));
        let c0 = rng.gen_range(0..=w - rw);
        let r0 = rng.gen_range(0..=h - rh);
        let cells = || (r0..r0 + rh).flat_map(move |r| (c0..c0 + rw).map(move |c| r * w + c));
        if cells().any(|i| mask[i]) {
            continue;
        }
        let mut mean = [0.0; 3];
        for i in cells() {
            for ch in 0..3 {
                mean[ch] += image.data[3 * i + ch] / (rw * rh) as f64;
            }
        }
        let color = mean.map(|m| if m < 0.5 { 0.95 } else { 0.05 });
        for i in cells() {
            mask[i] = true;
            out.data[3 * i..3 * i + 3].copy_from_slice(&color);
        }
        rects.push((r0, c0, rh, rw));
    }
    let placed = rects.len();
    if placed < k {
        return Err(Error::InvalidConfigValue {
            key: "transients".into(),
            reason: format!("only {placed} of {k} rectangles fit in a {w}x{h} image"),
        });
    }
    Ok(Transients { image: out, mask, rects })
}

/// A known surface distance along one training pixel ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthRecord {
    pub view: usize,
    pub row: usize,
    pub col: usize,
    pub distance: f64,
    pub weight: f64,
}

/// Draws `count` distinct pixels with a finite true depth from the given
/// `(view index, width, depth map)` triples. Distances get Gaussian noise of
/// spread `sigma`; weights are `1 / (1 + e)` with `e` a simulated
/// reprojection error magnitude.
pub fn sparse_depth_points(views: &[(usize, usize, &[f64])], count: usize, sigma: f64, seed: u64) -> Result<Vec<DepthRecord>> {
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for (slot, (_, _, depth)) in views.iter().enumerate() {
        candidates.extend(depth.iter().enumerate().filter(|(_, d)| d.is_finite()).map(|(i, _)| (slot, i)));
    }
    if count > candidates.len() {
        return Err(Error::InvalidConfigValue {
            key: "depth_points".into(),
            reason: format!("{count} requested but only {} pixels hit the scene", candidates.len()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (chosen, _) = candidates.partial_shuffle(&mut rng, count);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfigValue {
        key: "depth_noise".into(),
        reason: e.to_string(),
    })?;
    let reproj = Normal::new(0.0, REPROJECTION_SIGMA).expect("positive constant");
    let mut out: Vec<DepthRecord> = chosen
        .iter()
        .map(|&(slot, i)| {
            let (view, width, depth) = views[slot];
            let e: f64 = reproj.sample(&mut rng);
            DepthRecord {
                view,
                row: i / width,
                col: i % width,
                distance: depth[i] + noise.sample(&mut rng),
                weight: 1.0 / (1.0 + e.abs()),
            }
        })
        .collect();
    out.sort_by_key(|d| (d.view, d.row, d.col));
    Ok(out)
}
