use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::oracle::{make_cameras, oracle_render};
use super::perturb::{inject_transients, sparse_depth_points, DepthRecord};
use super::scene::{make_scene, SceneParams, SyntheticScene};
use crate::config::parse_key_values;
use crate::error::{Error, Result};
use crate::geometry::{Camera, SceneBounds, Vec3};
use crate::image::{load_mask, save_mask, RgbImage};
use crate::render::Dsm;

pub const SCENE_FILE: &str = "scene.txt";
pub const DEPTH_FILE: &str = "depth_points.csv";
pub const TRUTH_DSM_FILE: &str = "truth_dsm.asc";
const DEPTH_HEADER: &str = "view,row,col,dist,weight";

/// One calibrated image.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: RgbImage,
    /// Acquisition date index.
    pub date: usize,
    /// Pixels covered by transient objects, when known.
    pub mask: Option<Vec<bool>>,
    /// True first-hit distance per pixel; only available in memory for
    /// synthetic data.
    pub depth: Option<Vec<f64>>,
}

/// Views of one scene with optional sparse depth and a reference DSM.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub bounds: SceneBounds,
    pub sun: Vec3,
    pub views: Vec<View>,
    pub test_views: Vec<usize>,
    pub depth_points: Vec<DepthRecord>,
    pub truth_dsm: Option<Dsm>,
}

fn view_stem(i: usize) -> String {
    format!("view_{i:03}")
}

fn vec3_text(v: &Vec3) -> String {
    format!("{},{},{}", v.x, v.y, v.z)
}

fn parse_vec3(key: &str, s: &str) -> Result<Vec3> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Parse(format!("`{key}` needs three numbers, got `{s}`")))?;
    match parts.as_slice() {
        [x, y, z] => Ok(Vec3::new(*x, *y, *z)),
        _ => Err(Error::Parse(format!("`{key}` needs three numbers, got `{s}`"))),
    }
}

fn parse_list(key: &str, s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad entry `{t}` in `{key}`"))))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Dataset {
    pub fn is_test(&self, view: usize) -> bool {
        self.test_views.contains(&view)
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|i| !self.is_test(*i)).collect()
    }

    /// Checks cross references between views, splits and depth records.
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() || self.train_indices().is_empty() {
            return Err(Error::EmptyDataset);
        }
        for &t in &self.test_views {
            if t >= self.views.len() {
                return Err(Error::Parse(format!("test view {t} does not exist")));
            }
        }
        for (i, v) in self.views.iter().enumerate() {
            if v.image.width != v.camera.width() || v.image.height != v.camera.height() {
                return Err(Error::ShapeMismatch(format!("view {i}: image and camera sizes differ")));
            }
            if v.mask.as_ref().is_some_and(|m| m.len() != v.image.pixel_count()) {
                return Err(Error::ShapeMismatch(format!("view {i}: mask size differs from image")));
            }
        }
        for d in &self.depth_points {
            let v = self
                .views
                .get(d.view)
                .ok_or_else(|| Error::Parse(format!("depth point references view {}", d.view)))?;
            if d.row >= v.image.height || d.col >= v.image.width {
                return Err(Error::PixelOutOfBounds {
                    index: d.view,
                    row: d.row,
                    col: d.col,
                    height: v.image.height,
                    width: v.image.width,
                });
            }
            if !(d.distance.is_finite() && d.weight > 0.0 && d.weight <= 1.0) {
                return Err(Error::Parse(format!("invalid depth record {d:?}")));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut s = String::new();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "bounds_min = {}", vec3_text(&self.bounds.min)).unwrap();
        writeln!(s, "bounds_max = {}", vec3_text(&self.bounds.max)).unwrap();
        writeln!(s, "sun = {}", vec3_text(&self.sun)).unwrap();
        writeln!(s, "views = {}", self.views.len()).unwrap();
        writeln!(s, "test_views = {}", join(&self.test_views)).unwrap();
        let dates: Vec<usize> = self.views.iter().map(|v| v.date).collect();
        writeln!(s, "dates = {}", join(&dates)).unwrap();
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write(SCENE_FILE, s)?;
        for (i, v) in self.views.iter().enumerate() {
            let stem = view_stem(i);
            v.image.save(&dir.join(format!("{stem}.ppm")))?;
            match &v.camera {
                Camera::Pinhole(c) => write(&format!("{stem}.cam"), c.to_text())?,
                Camera::Rpc(c) => write(&format!("{stem}.rpc"), c.to_text())?,
            }
            if let Some(m) = &v.mask {
                save_mask(&dir.join(format!("{stem}_mask.pgm")), m, v.image.width, v.image.height)?;
            }
        }
        if !self.depth_points.is_empty() {
            let mut csv = format!("{DEPTH_HEADER}\n");
            for d in &self.depth_points {
                writeln!(csv, "{},{},{},{},{}", d.view, d.row, d.col, d.distance, d.weight).unwrap();
            }
            write(DEPTH_FILE, csv)?;
        }
        if let Some(t) = &self.truth_dsm {
            t.save(&dir.join(TRUTH_DSM_FILE))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let scene_path = dir.join(SCENE_FILE);
        let text = fs::read_to_string(&scene_path).map_err(|e| Error::io(&scene_path, e))?;
        let mut seed = 0;
        let mut bmin = None;
        let mut bmax = None;
        let mut sun = Vec3::new(0.0, 0.0, 1.0);
        let mut n_views = None;
        let mut test_views = Vec::new();
        let mut dates = Vec::new();
        for (k, v) in parse_key_values(&text)? {
            match k.as_str() {
                "seed" => seed = v.parse().map_err(|_| Error::Parse(format!("bad seed `{v}`")))?,
                "bounds_min" => bmin = Some(parse_vec3(&k, &v)?),
                "bounds_max" => bmax = Some(parse_vec3(&k, &v)?),
                "sun" => sun = parse_vec3(&k, &v)?,
                "views" => n_views = Some(v.parse::<usize>().map_err(|_| Error::Parse(format!("bad view count `{v}`")))?),
                "test_views" => test_views = parse_list(&k, &v)?,
                "dates" => dates = parse_list(&k, &v)?,
                _ => return Err(Error::Parse(format!("{}: unknown key `{k}`", scene_path.display()))),
            }
        }
        let missing = |k: &str| Error::Parse(format!("{}: missing `{k}`", scene_path.display()));
        let bounds = SceneBounds::new(bmin.ok_or_else(|| missing("bounds_min"))?, bmax.ok_or_else(|| missing("bounds_max"))?)?;
        let n_views = n_views.ok_or_else(|| missing("views"))?;
        let mut views = Vec::with_capacity(n_views);
        for i in 0..n_views {
            let stem = view_stem(i);
            let cam_path = dir.join(format!("{stem}.cam"));
            let rpc_path = dir.join(format!("{stem}.rpc"));
            let camera = Camera::load(if cam_path.exists() { &cam_path } else { &rpc_path })?;
            let image = RgbImage::load(&dir.join(format!("{stem}.ppm")))?;
            let mask_path = dir.join(format!("{stem}_mask.pgm"));
            let mask = if mask_path.exists() {
                let (m, w, h) = load_mask(&mask_path)?;
                if (w, h) != (image.width, image.height) {
                    return Err(Error::ShapeMismatch(format!("{}: size differs from image", mask_path.display())));
                }
                Some(m)
            } else {
                None
            };
            views.push(View {
                camera,
                image,
                date: dates.get(i).copied().unwrap_or(0),
                mask,
                depth: None,
            });
        }
        let depth_path = dir.join(DEPTH_FILE);
        let depth_points = if depth_path.exists() {
            let t = fs::read_to_string(&depth_path).map_err(|e| Error::io(&depth_path, e))?;
            parse_depth_csv(&t)?
        } else {
            Vec::new()
        };
        let truth_path = dir.join(TRUTH_DSM_FILE);
        let truth_dsm = if truth_path.exists() {
            Some(Dsm::load(&truth_path)?)
        } else {
            None
        };
        let ds = Self {
            seed,
            bounds,
            sun,
            views,
            test_views,
            depth_points,
            truth_dsm,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn parse_depth_csv(text: &str) -> Result<Vec<DepthRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(DEPTH_HEADER) {
        return Err(Error::Parse(format!("depth CSV must start with `{DEPTH_HEADER}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            let bad = || Error::Parse(format!("bad depth record `{l}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(DepthRecord {
                view: f[0].parse().map_err(|_| bad())?,
                row: f[1].parse().map_err(|_| bad())?,
                col: f[2].parse().map_err(|_| bad())?,
                distance: f[3].parse().map_err(|_| bad())?,
                weight: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Snaps values to the 8-bit grid so in-memory images equal their files.
fn quantize(img: &RgbImage) -> RgbImage {
    RgbImage::from_ppm(&img.to_ppm()).expect("own encoding parses")
}

/// Renders a complete synthetic dataset: views with per-date tints,
/// transients in training views, sparse depth from training views and the
/// true DSM over cells seen by enough training views.
pub fn synthesize(params: &SceneParams) -> Result<(Dataset, SyntheticScene)> {
    let scene = make_scene(params)?;
    let cameras = make_cameras(&scene)?;
    let test_views = params.test_view_indices();
    let mut views = Vec::with_capacity(cameras.len());
    for (i, camera) in cameras.into_iter().enumerate() {
        let date = i % params.dates;
        let oracle = oracle_render(&scene, &camera, scene.tints[date], [0.0; 3])?;
        let (image, mask) = if params.transients > 0 && !test_views.contains(&i) {
            let t = inject_transients(&oracle.image, params.seed.wrapping_mul(1000).wrapping_add(i as u64), params.transients)?;
            (t.image, Some(t.mask))
        } else {
            (oracle.image, None)
        };
        views.push(View {
            camera,
            image: quantize(&image),
            date,
            mask,
            depth: Some(oracle.depth),
        });
    }
    let train: Vec<usize> = (0..views.len()).filter(|i| !test_views.contains(i)).collect();
    let depth_sources: Vec<(usize, usize, &[f64])> = train
        .iter()
        .map(|&i| (i, views[i].image.width, views[i].depth.as_deref().expect("rendered")))
        .collect();
    let mut depth_points = sparse_depth_points(&depth_sources, params.depth_points, params.depth_noise, params.seed ^ 0xdeb7)?;
    // Transient pixels have no valid sparse depth.
    depth_points.retain(|d| views[d.view].mask.as_ref().map_or(true, |m| !m[d.row * views[d.view].image.width + d.col]));

    let mut truth = scene.heightfield.grid(&scene.bounds, params.dsm_cellsize);
    for r in 0..truth.nrows {
        for c in 0..truth.ncols {
            let idx = r * truth.ncols + c;
            let (x, y) = truth.cell_center(r, c);
            let p = Vec3::new(x, y, truth.values[idx]);
            let seen = train
                .iter()
                .filter(|&&i| {
                    let cam = &views[i].camera;
                    cam.project(&p).is_some_and(|(row, col)| {
                        row >= 0.0 && col >= 0.0 && row < cam.height() as f64 && col < cam.width() as f64
                    })
                })
                .count();
            if seen < params.min_observations {
                truth.values[idx] = f64::NAN;
            }
        }
    }
    let ds = Dataset {
        seed: params.seed,
        bounds: scene.bounds,
        sun: scene.sun,
        views,
        test_views,
        depth_points,
        truth_dsm: Some(truth),
    };
    ds.validate()?;
    Ok((ds, scene))
}

#[cfg(test)]
mod tests {
    use super::super::scene::CameraKind;
    use super::*;

    fn small(kind: CameraKind) -> SceneParams {
        SceneParams {
            views: 5,
            test_views: 1,
            width: 24,
            height: 20,
            depth_points: 40,
            transients: 2,
            tint_weight: 0.1,
            camera: kind,
            ..Default::default()
        }
    }

    #[test]
    fn save_load_round_trip() {
        for kind in [CameraKind::Pinhole, CameraKind::Rpc] {
            let (ds, _) = synthesize(&small(kind)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            ds.save(dir.path()).unwrap();
            let back = Dataset::load(dir.path()).unwrap();
            let mut expect = ds.clone();
            expect.views.iter_mut().for_each(|v| v.depth = None);
            assert_eq!(back.views.len(), expect.views.len());
            for (a, b) in back.views.iter().zip(&expect.views) {
                assert_eq!(a.image, b.image);
                assert_eq!(a.mask, b.mask);
                assert_eq!(a.date, b.date);
                assert_eq!(a.camera.width(), b.camera.width());
            }
            assert_eq!(back.depth_points, expect.depth_points);
            assert_eq!(back.test_views, expect.test_views);
            assert_eq!(back.bounds, expect.bounds);
            let (t1, t2) = (back.truth_dsm.unwrap(), expect.truth_dsm.unwrap());
            assert!(t1.same_grid(&t2));
            for (a, b) in t1.values.iter().zip(&t2.values) {
                assert!((a.is_nan() && b.is_nan()) || (a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_split() {
        let p = small(CameraKind::Pinhole);
        let (a, _) = synthesize(&p).unwrap();
        let (b, _) = synthesize(&p).unwrap();
        // Debug output treats invalid (NaN) DSM cells as equal.
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        assert_eq!(a.test_views, vec![2]);
        assert!(a.views[2].mask.is_none());
        assert!(a.views[0].mask.is_some());
        assert!(a.depth_points.iter().all(|d| d.view != 2));
        assert!(a.truth_dsm.as_ref().unwrap().valid_count() > 0);
    }

    #[test]
    fn load_rejects_bad_references() {
        let (mut ds, _) = synthesize(&small(CameraKind::Pinhole)).unwrap();
        ds.depth_points[0].view = 99;
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert!(Dataset::load(dir.path()).is_err());
        assert!(Dataset::load(&dir.path().join("missing")).is_err());
    }
}
