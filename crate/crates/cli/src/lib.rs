//! Command-line front end: synthesize datasets, train, render, evaluate,
//! rasterize DSMs and check gradients.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use strf_core::config::Precision;
use strf_core::data::{synthesize, CameraKind, SceneParams};
use strf_core::eval::{evaluate, Split};
use strf_core::gradcheck::gradcheck_config;
use strf_core::image::save_pgm16;
use strf_core::optim::{train, TrainData};
use strf_core::pipeline::PipelineOptions;
use strf_core::render::{render_dsm, render_image};
use strf_core::{Camera, Checkpoint, Config, Dataset, Error, RadianceModel, Real};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "strf", version, about = "Tensor radiance fields for satellite-style scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; outputs go to `train.out` of the config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render one view: rgb.ppm, altitude.pgm and opacity.pgm.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// View index of the dataset, or a .cam/.rpc file.
        #[arg(long)]
        view: String,
        #[arg(long)]
        out: PathBuf,
        /// Dataset for view indices; defaults to the checkpoint's `data`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split and write metrics.csv.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train, test or all.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
    },
    /// Rasterize the model's surface on a regular grid (ESRI ASCII).
    Dsm {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cellsize: f64,
        #[arg(long, default_value = "dsm.asc")]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of a fresh model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a synthetic dataset.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Total views; two evenly spaced ones are held out.
        #[arg(long, default_value_t = 20)]
        views: usize,
        /// Transient rectangles per training view.
        #[arg(long, default_value_t = 0)]
        transients: usize,
        /// Give every acquisition date its own color tint.
        #[arg(long)]
        tints: bool,
        /// Image width and height in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Sparse depth points sampled from the training views.
        #[arg(long, default_value_t = 1000)]
        depth_points: usize,
        /// pinhole or rpc.
        #[arg(long, default_value = "pinhole")]
        camera: String,
    },
}

/// Tint spread used by `synth --tints`.
pub const TINT_WEIGHT: f64 = 0.15;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::Core(Error::UnknownConfigKey(_) | Error::InvalidConfigValue { .. }) => EXIT_USAGE,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Parses `args` (program name first) and runs the command. Help and
/// version requests print to `out` and succeed.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            write!(out, "{e}").map_err(|e| io_err(Path::new("<stdout>"), e))?;
            return Ok(());
        }
        Err(e) => {
            let msg = e.to_string();
            let msg = msg.strip_prefix("error: ").unwrap_or(&msg).trim_end().to_string();
            return Err(CliError::Usage(msg));
        }
    };
    match cli.command {
        Command::Train { config } => cmd_train(&config, out),
        Command::Render { ckpt, view, out: dir, data } => cmd_render(&ckpt, &view, &dir, data.as_deref(), out),
        Command::Eval { ckpt, data, split, out: path } => cmd_eval(&ckpt, &data, &split, &path, out),
        Command::Dsm { ckpt, cellsize, out: path } => cmd_dsm(&ckpt, cellsize, &path, out),
        Command::Gradcheck { config } => cmd_gradcheck(&config, out),
        Command::Synth {
            out: dir,
            seed,
            views,
            transients,
            tints,
            size,
            depth_points,
            camera,
        } => {
            let mut p = SceneParams {
                seed,
                views,
                transients,
                width: size,
                height: size,
                depth_points,
                camera: CameraKind::parse(&camera).ok_or_else(|| CliError::Usage(format!("unknown camera `{camera}`")))?,
                ..SceneParams::default()
            };
            if tints {
                p.tint_weight = TINT_WEIGHT;
            }
            cmd_synth(&p, &dir, out)
        }
    }
}

/// Reads a config file. Relative `data` and `train.out` paths are taken
/// relative to the file's directory.
pub fn load_config(path: &Path) -> CliResult<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut cfg = Config::from_text(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    if cfg.data.is_relative() {
        cfg.data = base.join(&cfg.data);
    }
    if cfg.train.out.is_relative() {
        cfg.train.out = base.join(&cfg.train.out);
    }
    Ok(cfg)
}

fn say(out: &mut dyn Write, msg: impl fmt::Display) -> CliResult<()> {
    writeln!(out, "{msg}").map_err(|e| io_err(Path::new("<stdout>"), e))
}

pub fn cmd_synth(params: &SceneParams, dir: &Path, out: &mut dyn Write) -> CliResult<()> {
    let (ds, _) = synthesize(params)?;
    ds.save(dir)?;
    say(
        out,
        format!(
            "wrote {} views ({} held out) to {}",
            ds.views.len(),
            ds.test_views.len(),
            dir.display()
        ),
    )
}

fn train_as<T: Real>(cfg: &Config, ds: &Dataset, out: &mut dyn Write) -> CliResult<()> {
    let data = TrainData::from_dataset(ds)?;
    let mut model = RadianceModel::<T>::new(cfg, ds.bounds, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let every = (cfg.optim.steps / 20).max(1);
    let outcome = train(&mut model, &data, cfg, Some(&cfg.train.out), |log| {
        if log.step % every == 0 {
            eprintln!("step {:>6}  loss {:.6}  rgb {:.6}", log.step, log.report.total, log.report.rgb);
        }
    })?;
    if let Some((step, p)) = outcome.best {
        say(out, format!("best validation PSNR {p:.3} dB at step {step}"))?;
    }
    say(out, format!("wrote {}", cfg.train.out.display()))
}

pub fn cmd_train(config: &Path, out: &mut dyn Write) -> CliResult<()> {
    let cfg = load_config(config)?;
    let ds = Dataset::load(&cfg.data)?;
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(&cfg, &ds, out),
        Precision::F64 => train_as::<f64>(&cfg, &ds, out),
    }
}

pub fn cmd_render(ckpt: &Path, view: &str, dir: &Path, data: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let ck = Checkpoint::load(ckpt)?;
    let camera = match view.parse::<usize>() {
        Ok(i) => {
            let ds = Dataset::load(data.unwrap_or(&ck.config.data))?;
            ds.views
                .get(i)
                .map(|v| v.camera.clone())
                .ok_or_else(|| CliError::Usage(format!("view {i} not in dataset of {} views", ds.views.len())))?
        }
        Err(_) => Camera::load(Path::new(view))?,
    };
    let opts = PipelineOptions::from_config(&ck.config);
    let r = render_image(&ck.model, &camera, ck.config.render.samples, &opts)?;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    r.rgb.clamped().save(&dir.join("rgb.ppm"))?;
    let b = ck.model.bounds;
    let (w, h) = (camera.width(), camera.height());
    save_pgm16(&dir.join("altitude.pgm"), &r.altitude(), w, h, b.min.z, b.max.z)?;
    save_pgm16(&dir.join("opacity.pgm"), &r.opacity, w, h, 0.0, 1.0)?;
    say(out, format!("wrote {w}x{h} render to {}", dir.display()))
}

pub fn cmd_eval(ckpt: &Path, data: &Path, split: &str, path: &Path, out: &mut dyn Write) -> CliResult<()> {
    let split = Split::parse(split).map_err(|e| CliError::Usage(e.to_string()))?;
    let ck = Checkpoint::load(ckpt)?;
    let ds = Dataset::load(data)?;
    if ds.bounds != ck.model.bounds {
        return Err(CliError::Core(Error::Checkpoint(
            "checkpoint bounds differ from the dataset's".into(),
        )));
    }
    let e = evaluate(&ck.model, &ds, split, &ck.config)?;
    std::fs::write(path, e.to_csv()).map_err(|err| io_err(path, err))?;
    say(
        out,
        format!(
            "psnr {:.3} dB  ssim {:.4}  dsm mae {:.3} m  ({})",
            e.mean_psnr(),
            e.mean_ssim(),
            e.dsm_mae,
            path.display()
        ),
    )
}

pub fn cmd_dsm(ckpt: &Path, cellsize: f64, path: &Path, out: &mut dyn Write) -> CliResult<()> {
    if !(cellsize > 0.0) {
        return Err(CliError::Usage(format!("cellsize must be positive, got {cellsize}")));
    }
    let ck = Checkpoint::load(ckpt)?;
    let opts = PipelineOptions::from_config(&ck.config);
    let dsm = render_dsm(
        &ck.model,
        cellsize,
        ck.config.render.samples,
        ck.config.render.opacity_threshold,
        &opts,
    )?;
    dsm.save(path)?;
    say(
        out,
        format!(
            "wrote {}x{} DSM ({} valid cells) to {}",
            dsm.nrows,
            dsm.ncols,
            dsm.valid_count(),
            path.display()
        ),
    )
}

pub fn cmd_gradcheck(config: &Path, out: &mut dyn Write) -> CliResult<()> {
    let cfg = load_config(config)?;
    let bounds = match Dataset::load(&cfg.data) {
        Ok(ds) => ds.bounds,
        Err(_) => SceneParams::default().bounds(),
    };
    let r = gradcheck_config(&cfg, bounds)?;
    write!(out, "{}", r.table()).map_err(|e| io_err(Path::new("<stdout>"), e))?;
    say(
        out,
        format!(
            "{} parameters, max rel err {:.3e} (tolerance {:.0e}), {} kink draws replaced: {}",
            r.rows.len(),
            r.max_rel_err,
            r.tolerance,
            r.kinks,
            if r.passed() { "PASS" } else { "FAIL" }
        ),
    )?;
    if r.passed() {
        Ok(())
    } else {
        Err(CliError::Core(Error::NonFinite(format!(
            "gradient check: max relative error {:.3e}",
            r.max_rel_err
        ))))
    }
}
