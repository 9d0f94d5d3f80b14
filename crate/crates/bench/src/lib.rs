//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use strf_core::data::SceneParams;
use strf_core::gradcheck::gradcheck_batch;
use strf_core::pipeline::{PipelineOptions, TrainRay};
use strf_core::{Config, RadianceModel, Real};

/// A freshly initialized model over the default synthetic scene box, a batch
/// of supervised rays and the matching pipeline options.
pub fn fixture<T: Real>(cfg: &Config, rays: usize) -> (RadianceModel<T>, Vec<TrainRay>, PipelineOptions) {
    let bounds = SceneParams::default().bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = RadianceModel::new(cfg, bounds, &mut rng);
    let batch = gradcheck_batch(&bounds, rays, cfg.render.samples, &mut rng);
    (model, batch, PipelineOptions::from_config(cfg))
}
