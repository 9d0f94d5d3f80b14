use std::path::Path;
use std::process::Command;

use strf_cli::{run, CliError, EXIT_DATA, EXIT_USAGE};

fn strf(args: &[&str]) -> Result<String, CliError> {
    let mut out = Vec::new();
    let mut full = vec!["strf"];
    full.extend_from_slice(args);
    run(full, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "field.L = 2\nfield.max_res = 16\nfield.ambient_res = 8\nlight.head_a_width = 16\n\
                     light.head_b_width = 8\nlight.head_d_width = 8\nlight.lobes = 4\nlight.asg_dim = 4\n\
                     render.samples = 8\n";

#[test]
fn help_succeeds() {
    assert!(strf(&["--help"]).unwrap().contains("train"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(strf(&["frobnicate"]).unwrap_err().exit_code(), EXIT_USAGE);
    assert_eq!(strf(&["train"]).unwrap_err().exit_code(), EXIT_USAGE);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "field.levels = 3\n").unwrap();
    let e = strf(&["train", "--config", s(&cfg)]).unwrap_err();
    assert_eq!(e.exit_code(), EXIT_USAGE, "{e}");
    assert!(e.to_string().contains("field.levels"));
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("a.cfg");
    std::fs::write(&cfg, "data.path = nowhere\n").unwrap();
    assert_eq!(strf(&["train", "--config", s(&cfg)]).unwrap_err().exit_code(), EXIT_DATA);
    let ck = dir.path().join("none.strf");
    assert_eq!(
        strf(&["dsm", "--ckpt", s(&ck), "--cellsize", "1"]).unwrap_err().exit_code(),
        EXIT_DATA
    );
}

#[test]
fn binary_maps_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_strf");
    assert_eq!(Command::new(exe).arg("--version").output().unwrap().status.code(), Some(0));
    assert_eq!(Command::new(exe).arg("nope").output().unwrap().status.code(), Some(1));
    let out = Command::new(exe)
        .args(["eval", "--ckpt", "/nonexistent.strf", "--data", "/nonexistent"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn synth_train_render_eval_dsm() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    strf(&["synth", "--out", s(&data), "--views", "4", "--size", "16", "--seed", "3", "--depth-points", "100"]).unwrap();
    assert!(data.join("view_000.ppm").exists());

    let cfg = root.join("t.cfg");
    std::fs::write(&cfg, format!("{SMALL}data.path = data\ntrain.out = run\noptim.steps = 0\n")).unwrap();
    strf(&["train", "--config", s(&cfg)]).unwrap();
    let ck = root.join("run/final.strf");
    assert!(ck.exists() && root.join("run/loss.csv").exists());

    let out = root.join("render");
    strf(&["render", "--ckpt", s(&ck), "--view", "1", "--out", s(&out), "--data", s(&data)]).unwrap();
    for f in ["rgb.ppm", "altitude.pgm", "opacity.pgm"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let img = strf_core::RgbImage::load(&out.join("rgb.ppm")).unwrap();
    assert_eq!((img.width, img.height), (16, 16));

    // A camera file works in place of a view index.
    let cam = data.join("view_002.cam");
    let out2 = root.join("render2");
    strf(&["render", "--ckpt", s(&ck), "--view", s(&cam), "--out", s(&out2)]).unwrap();
    assert!(out2.join("rgb.ppm").exists());
    let e = strf(&["render", "--ckpt", s(&ck), "--view", "99", "--out", s(&out2), "--data", s(&data)]).unwrap_err();
    assert_eq!(e.exit_code(), EXIT_USAGE);

    let metrics = root.join("m.csv");
    strf(&["eval", "--ckpt", s(&ck), "--data", s(&data), "--split", "test", "--out", s(&metrics)]).unwrap();
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert!(text.starts_with("view,psnr,ssim,mae\n"));
    assert!(text.lines().last().unwrap().starts_with("all,"));
    assert_eq!(
        strf(&["eval", "--ckpt", s(&ck), "--data", s(&data), "--split", "dev"]).unwrap_err().exit_code(),
        EXIT_USAGE
    );

    let dsm = root.join("dsm.asc");
    strf(&["dsm", "--ckpt", s(&ck), "--cellsize", "2", "--out", s(&dsm)]).unwrap();
    assert!(std::fs::read_to_string(&dsm).unwrap().starts_with("ncols"));
    assert_eq!(
        strf(&["dsm", "--ckpt", s(&ck), "--cellsize", "0"]).unwrap_err().exit_code(),
        EXIT_USAGE
    );
}

#[test]
fn gradcheck_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.cfg");
    std::fs::write(&cfg, format!("{SMALL}gradcheck.params = 30\n")).unwrap();
    let out = strf(&["gradcheck", "--config", s(&cfg)]).unwrap();
    assert!(out.starts_with("block,max_abs_err,max_rel_err,result\n"));
    assert!(out.trim_end().ends_with("PASS"));
}
