//! Multiscale tensor radiance fields with a reflective light field, for
//! reconstructing surfaces from satellite-style imagery.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod lightfield;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod real;
pub mod render;
pub mod tape;

pub use checkpoint::Checkpoint;
pub use config::Config;
pub use data::Dataset;
pub use error::{Error, Result};
pub use geometry::{Camera, DepthPoint, PinholeCamera, Ray, RpcCamera, SceneBounds, Vec3};
pub use image::RgbImage;
pub use model::{ModelGradients, RadianceModel};
pub use real::Real;
