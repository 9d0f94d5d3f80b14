//! Synthetic multi-view scenes with an independent ray-marched oracle,
//! multi-date perturbations, sparse depth and dataset directories.

mod dataset;
mod oracle;
mod perturb;
mod scene;

pub use dataset::{synthesize, Dataset, View, DEPTH_FILE, SCENE_FILE, TRUTH_DSM_FILE};
pub use oracle::{intersect_heightfield, make_cameras, oracle_render, OracleView, HIT_TOLERANCE};
pub use perturb::{
    inject_transients, sparse_depth_points, DepthRecord, Transients, REPROJECTION_SIGMA, TRANSIENT_MAX_SIDE,
    TRANSIENT_MIN_SIDE,
};
pub use scene::{make_scene, CameraKind, Heightfield, Pattern, SceneParams, SyntheticScene, Wave};
