//! Run configuration: flat `key = value` text with dotted section names.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::field::Decomposition;
use crate::lightfield::{Appearance, LightFieldShape, MAX_SH_DEGREE};
use crate::losses::{LossWeights, Regularizer};

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    pub decomposition: Decomposition,
    pub levels: usize,
    pub rank: usize,
    pub channels: usize,
    pub base_res: usize,
    pub max_res: usize,
    /// Resolution of the single-level ambient fields.
    pub ambient_res: usize,
    pub init_std: f64,
    /// Density multiplier; sample gaps are measured in units of the longest
    /// scene side.
    pub density_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightConfig {
    pub appearance: Appearance,
    pub head_a_depth: usize,
    pub head_a_width: usize,
    pub head_b_width: usize,
    pub head_d_width: usize,
    pub lobes: usize,
    pub asg_dim: usize,
    pub sh_degree: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub samples: usize,
    pub stratified: bool,
    pub background: [f64; 3],
    /// Samples whose render weight is at or below this skip the appearance
    /// network. Zero evaluates every sample.
    pub weight_threshold: f64,
    /// Minimum opacity for a DSM cell to count as valid.
    pub opacity_threshold: f64,
    /// Rays per independent work unit.
    pub chunk_rays: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub regularizer: Regularizer,
    pub tv_all_planes: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr_tensor: f64,
    pub lr_mlp: f64,
    pub steps: usize,
    pub batch: usize,
    pub depth_batch: usize,
    /// Final learning rate as a fraction of the base rate.
    pub decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub out: PathBuf,
    pub val_every: usize,
    pub precision: Precision,
    /// Wall-clock budget in seconds; 0 disables it.
    pub time_limit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub params: usize,
    pub eps: f64,
    pub rays: usize,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub threads: usize,
    pub data: PathBuf,
    pub field: FieldConfig,
    pub light: LightConfig,
    pub render: RenderConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            data: PathBuf::from("data"),
            field: FieldConfig {
                decomposition: Decomposition::Vm,
                levels: 8,
                rank: 4,
                channels: 4,
                base_res: 8,
                max_res: 64,
                ambient_res: 16,
                init_std: 0.1,
                density_scale: 25.0,
            },
            light: LightConfig {
                appearance: Appearance::Asg,
                head_a_depth: 2,
                head_a_width: 128,
                head_b_width: 64,
                head_d_width: 32,
                lobes: 8,
                asg_dim: 8,
                sh_degree: 2,
            },
            render: RenderConfig {
                samples: 64,
                stratified: true,
                background: [0.0; 3],
                weight_threshold: 1e-4,
                opacity_threshold: 0.5,
                chunk_rays: 256,
            },
            loss: LossConfig {
                weights: LossWeights::default(),
                regularizer: Regularizer::Tv,
                tv_all_planes: false,
            },
            optim: OptimConfig {
                lr_tensor: 2e-4,
                lr_mlp: 1e-4,
                steps: 5000,
                batch: 8192,
                depth_batch: 256,
                decay: 0.1,
            },
            train: TrainConfig {
                out: PathBuf::from("run"),
                val_every: 250,
                precision: Precision::F32,
                time_limit: 0.0,
            },
            gradcheck: GradcheckConfig {
                params: 200,
                eps: 1e-4,
                rays: 2,
                tolerance: 1e-4,
            },
        }
    }
}

fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::InvalidConfigValue {
        key: key.to_string(),
        reason: format!("cannot parse `{value}`"),
    })
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfigValue {
            key: key.to_string(),
            reason: format!("expected true/false, got `{value}`"),
        }),
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfigValue {
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl Config {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_text(&text)?;
        // Relative data and output paths resolve against the config file.
        if let Some(dir) = path.parent() {
            if cfg.data.is_relative() {
                cfg.data = dir.join(&cfg.data);
            }
            if cfg.train.out.is_relative() {
                cfg.train.out = dir.join(&cfg.train.out);
            }
        }
        Ok(cfg)
    }

    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key;
        let v = value;
        match k {
            "seed" => self.seed = num(k, v)?,
            "threads" => self.threads = num(k, v)?,
            "data.path" => self.data = PathBuf::from(v),
            "field.decomposition" => {
                self.field.decomposition = match v {
                    "vm" => Decomposition::Vm,
                    "cp" => Decomposition::Cp,
                    _ => return Err(invalid(k, "expected vm or cp")),
                }
            }
            "field.L" => self.field.levels = num(k, v)?,
            "field.R" => self.field.rank = num(k, v)?,
            "field.C" => self.field.channels = num(k, v)?,
            "field.base_res" => self.field.base_res = num(k, v)?,
            "field.max_res" => self.field.max_res = num(k, v)?,
            "field.ambient_res" => self.field.ambient_res = num(k, v)?,
            "field.init_std" => self.field.init_std = num(k, v)?,
            "field.density_scale" => self.field.density_scale = num(k, v)?,
            "light.appearance" => {
                self.light.appearance =
                    Appearance::parse(v).ok_or_else(|| invalid(k, "expected asg, sh or lambertian"))?
            }
            "light.head_a_depth" => self.light.head_a_depth = num(k, v)?,
            "light.head_a_width" => self.light.head_a_width = num(k, v)?,
            "light.head_b_width" => self.light.head_b_width = num(k, v)?,
            "light.head_d_width" => self.light.head_d_width = num(k, v)?,
            "light.lobes" => self.light.lobes = num(k, v)?,
            "light.asg_dim" => self.light.asg_dim = num(k, v)?,
            "light.sh_degree" => self.light.sh_degree = num(k, v)?,
            "render.samples" => self.render.samples = num(k, v)?,
            "render.stratified" => self.render.stratified = flag(k, v)?,
            "render.background" => {
                let parts: Vec<f64> = v
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| num(k, s))
                    .collect::<Result<_>>()?;
                self.render.background = parts
                    .try_into()
                    .map_err(|_| invalid(k, "expected three values"))?;
            }
            "render.weight_threshold" => self.render.weight_threshold = num(k, v)?,
            "render.opacity_threshold" => self.render.opacity_threshold = num(k, v)?,
            "render.chunk_rays" => self.render.chunk_rays = num(k, v)?,
            "loss.w_rgb" => self.loss.weights.rgb = num(k, v)?,
            "loss.w_tv" => self.loss.weights.tv = num(k, v)?,
            "loss.w_normal" => self.loss.weights.normal = num(k, v)?,
            "loss.w_lamb" => self.loss.weights.lamb = num(k, v)?,
            "loss.w_ds" => self.loss.weights.ds = num(k, v)?,
            "loss.regularizer" => {
                self.loss.regularizer =
                    Regularizer::parse(v).ok_or_else(|| invalid(k, "expected tv, l1 or none"))?
            }
            "loss.tv_all_planes" => self.loss.tv_all_planes = flag(k, v)?,
            "optim.lr_tensor" => self.optim.lr_tensor = num(k, v)?,
            "optim.lr_mlp" => self.optim.lr_mlp = num(k, v)?,
            "optim.steps" => self.optim.steps = num(k, v)?,
            "optim.batch" => self.optim.batch = num(k, v)?,
            "optim.depth_batch" => self.optim.depth_batch = num(k, v)?,
            "optim.decay" => self.optim.decay = num(k, v)?,
            "train.out" => self.train.out = PathBuf::from(v),
            "train.val_every" => self.train.val_every = num(k, v)?,
            "train.time_limit" => self.train.time_limit = num(k, v)?,
            "train.precision" => {
                self.train.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(invalid(k, "expected f32 or f64")),
                }
            }
            "gradcheck.params" => self.gradcheck.params = num(k, v)?,
            "gradcheck.eps" => self.gradcheck.eps = num(k, v)?,
            "gradcheck.rays" => self.gradcheck.rays = num(k, v)?,
            "gradcheck.tolerance" => self.gradcheck.tolerance = num(k, v)?,
            _ => return Err(Error::UnknownConfigKey(k.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.field;
        let positive = [
            ("threads", self.threads),
            ("field.L", f.levels),
            ("field.R", f.rank),
            ("field.C", f.channels),
            ("field.base_res", f.base_res),
            ("field.ambient_res", f.ambient_res),
            ("light.head_a_depth", self.light.head_a_depth),
            ("light.head_a_width", self.light.head_a_width),
            ("light.head_b_width", self.light.head_b_width),
            ("light.head_d_width", self.light.head_d_width),
            ("light.lobes", self.light.lobes),
            ("light.asg_dim", self.light.asg_dim),
            ("render.samples", self.render.samples),
            ("render.chunk_rays", self.render.chunk_rays),
            ("optim.batch", self.optim.batch),
            ("gradcheck.rays", self.gradcheck.rays),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(invalid(k, "must be at least 1"));
            }
        }
        if f.base_res < 2 || f.max_res < f.base_res {
            return Err(invalid("field.max_res", "need 2 <= base_res <= max_res"));
        }
        if f.ambient_res < 2 {
            return Err(invalid("field.ambient_res", "must be at least 2"));
        }
        if !(f.init_std >= 0.0 && f.init_std.is_finite()) {
            return Err(invalid("field.init_std", "must be finite and nonnegative"));
        }
        if !(f.density_scale > 0.0 && f.density_scale.is_finite()) {
            return Err(invalid("field.density_scale", "must be positive"));
        }
        if self.light.sh_degree > MAX_SH_DEGREE {
            return Err(invalid("light.sh_degree", format!("at most {MAX_SH_DEGREE}")));
        }
        let w = &self.loss.weights;
        for (k, v) in [
            ("loss.w_rgb", w.rgb),
            ("loss.w_tv", w.tv),
            ("loss.w_normal", w.normal),
            ("loss.w_lamb", w.lamb),
            ("loss.w_ds", w.ds),
            ("render.weight_threshold", self.render.weight_threshold),
            ("train.time_limit", self.train.time_limit),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(k, "must be finite and nonnegative"));
            }
        }
        if self.render.background.iter().any(|c| !c.is_finite()) {
            return Err(invalid("render.background", "must be finite"));
        }
        for (k, v) in [("optim.lr_tensor", self.optim.lr_tensor), ("optim.lr_mlp", self.optim.lr_mlp)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(k, "must be finite and nonnegative"));
            }
        }
        if !(self.optim.decay > 0.0 && self.optim.decay <= 1.0) {
            return Err(invalid("optim.decay", "must be in (0, 1]"));
        }
        if !(self.gradcheck.eps > 0.0) {
            return Err(invalid("gradcheck.eps", "must be positive"));
        }
        Ok(())
    }

    /// Canonical text form; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let f = &self.field;
        let l = &self.light;
        let r = &self.render;
        let w = &self.loss.weights;
        let o = &self.optim;
        let g = &self.gradcheck;
        let lines: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("data.path", self.data.display().to_string()),
            (
                "field.decomposition",
                match f.decomposition {
                    Decomposition::Vm => "vm",
                    Decomposition::Cp => "cp",
                }
                .into(),
            ),
            ("field.L", f.levels.to_string()),
            ("field.R", f.rank.to_string()),
            ("field.C", f.channels.to_string()),
            ("field.base_res", f.base_res.to_string()),
            ("field.max_res", f.max_res.to_string()),
            ("field.ambient_res", f.ambient_res.to_string()),
            ("field.init_std", format!("{:?}", f.init_std)),
            ("field.density_scale", format!("{:?}", f.density_scale)),
            ("light.appearance", l.appearance.name().into()),
            ("light.head_a_depth", l.head_a_depth.to_string()),
            ("light.head_a_width", l.head_a_width.to_string()),
            ("light.head_b_width", l.head_b_width.to_string()),
            ("light.head_d_width", l.head_d_width.to_string()),
            ("light.lobes", l.lobes.to_string()),
            ("light.asg_dim", l.asg_dim.to_string()),
            ("light.sh_degree", l.sh_degree.to_string()),
            ("render.samples", r.samples.to_string()),
            ("render.stratified", r.stratified.to_string()),
            (
                "render.background",
                format!("{:?}, {:?}, {:?}", r.background[0], r.background[1], r.background[2]),
            ),
            ("render.weight_threshold", format!("{:?}", r.weight_threshold)),
            ("render.opacity_threshold", format!("{:?}", r.opacity_threshold)),
            ("render.chunk_rays", r.chunk_rays.to_string()),
            ("loss.w_rgb", format!("{:?}", w.rgb)),
            ("loss.w_tv", format!("{:?}", w.tv)),
            ("loss.w_normal", format!("{:?}", w.normal)),
            ("loss.w_lamb", format!("{:?}", w.lamb)),
            ("loss.w_ds", format!("{:?}", w.ds)),
            ("loss.regularizer", self.loss.regularizer.name().into()),
            ("loss.tv_all_planes", self.loss.tv_all_planes.to_string()),
            ("optim.lr_tensor", format!("{:?}", o.lr_tensor)),
            ("optim.lr_mlp", format!("{:?}", o.lr_mlp)),
            ("optim.steps", o.steps.to_string()),
            ("optim.batch", o.batch.to_string()),
            ("optim.depth_batch", o.depth_batch.to_string()),
            ("optim.decay", format!("{:?}", o.decay)),
            ("train.out", self.train.out.display().to_string()),
            ("train.val_every", self.train.val_every.to_string()),
            ("train.time_limit", format!("{:?}", self.train.time_limit)),
            (
                "train.precision",
                match self.train.precision {
                    Precision::F32 => "f32",
                    Precision::F64 => "f64",
                }
                .into(),
            ),
            ("gradcheck.params", g.params.to_string()),
            ("gradcheck.eps", format!("{:?}", g.eps)),
            ("gradcheck.rays", g.rays.to_string()),
            ("gradcheck.tolerance", format!("{:?}", g.tolerance)),
        ];
        for (k, v) in lines {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn light_shape(&self) -> LightFieldShape {
        LightFieldShape {
            appearance: self.light.appearance,
            feature_dim: self.field.levels * self.field.channels,
            head_a_depth: self.light.head_a_depth,
            head_a_width: self.light.head_a_width,
            head_b_width: self.light.head_b_width,
            head_d_width: self.light.head_d_width,
            lobes: self.light.lobes,
            asg_dim: self.light.asg_dim,
            sh_degree: self.light.sh_degree,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::default();
        assert_eq!(Config::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn modified_round_trip() {
        let text = "# desk run\nfield.L = 4\nfield.decomposition = cp \nlight.appearance = sh\n\
                    render.background = 0.1, 0.2, 0.3\nloss.regularizer = l1 # trailing\n";
        let cfg = Config::from_text(text).unwrap();
        assert_eq!(cfg.field.levels, 4);
        assert_eq!(cfg.field.decomposition, Decomposition::Cp);
        assert_eq!(cfg.render.background, [0.1, 0.2, 0.3]);
        assert_eq!(Config::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::from_text("field.levels = 3\n").unwrap_err();
        assert!(matches!(&err, Error::UnknownConfigKey(k) if k == "field.levels"));
        assert!(err.to_string().contains("field.levels"));
    }

    #[test]
    fn bad_values() {
        assert!(matches!(
            Config::from_text("field.R = many"),
            Err(Error::InvalidConfigValue { .. })
        ));
        assert!(Config::from_text("field.R = 0").is_err());
        assert!(Config::from_text("light.sh_degree = 4").is_err());
        assert!(Config::from_text("no equals sign").is_err());
    }
}
