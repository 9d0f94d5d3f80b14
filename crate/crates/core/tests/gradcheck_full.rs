use std::time::Instant;

use strf_core::gradcheck::gradcheck_config;
use strf_core::{Config, SceneBounds, Vec3};

#[test]
fn default_pipeline_gradients_match_finite_differences() {
    let cfg = Config::default();
    let bounds = SceneBounds::new(Vec3::zeros(), Vec3::new(64.0, 64.0, 16.0)).unwrap();
    let start = Instant::now();
    let r = gradcheck_config(&cfg, bounds).unwrap();
    println!("{}kinks replaced: {}, {:.1}s", r.table(), r.kinks, start.elapsed().as_secs_f64());
    assert_eq!(r.rows.len(), 200);
    assert!(r.passed(), "max rel err {:e}", r.max_rel_err);
}
