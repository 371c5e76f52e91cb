//! End-to-end checks of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaze-redirect"))
        .args(args)
        .env("GAZE_REDIRECT_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_required_argument_is_a_usage_error() {
    let o = run(&["gazemap", "--pitch", "0", "--yaw", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--out"));
}

#[test]
fn train_fine_requires_a_coarse_checkpoint() {
    let o = run(&["train-fine", "--config", "x.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--coarse-ckpt"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_files_are_named() {
    let o = run(&["train-coarse", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/run.toml"), "{}", stderr(&o));
    let o = run(&["eval", "--ckpt", "/nonexistent/fine.ckpt", "--report", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/fine.ckpt"));
}

#[test]
fn out_of_range_angle_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.png");
    let o = run(&["gazemap", "--pitch", "95", "--yaw", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

fn read_rgb(path: &Path) -> (u32, u32, Vec<u8>) {
    let img = image::open(path).unwrap().to_rgb8();
    (img.width(), img.height(), img.into_raw())
}

#[test]
fn gazemap_png_has_the_iris_where_the_geometry_puts_it() {
    use gaze_redirect::npg::{GazeAngle, GazemapGeometry};
    let dir = tempfile::tempdir().unwrap();
    for (pitch, yaw) in [(-10.0, 15.0), (10.0, -15.0), (0.0, 0.0)] {
        let out = dir.path().join(format!("g_{pitch}_{yaw}.png"));
        let (p, y) = (pitch.to_string(), yaw.to_string());
        let o = run(&["gazemap", "--pitch", &p, "--yaw", &y, "--size", "64", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let (w, h, raw) = read_rgb(&out);
        assert_eq!((w, h), (64, 64));
        let (mut n, mut sr, mut sc) = (0.0, 0.0, 0.0);
        for (i, px) in raw.chunks(3).enumerate() {
            assert!(px[1] == 0 || px[0] == 255, "iris pixel outside the eyeball");
            if px[1] == 255 {
                n += 1.0;
                sr += (i / 64) as f64 + 0.5;
                sc += (i % 64) as f64 + 0.5;
            }
        }
        let geo = GazemapGeometry::new(GazeAngle { pitch, yaw }, 64, 64).unwrap();
        let (row, col) = (sr / n, sc / n);
        assert!((row - geo.nu).abs() <= 1.0 && (col - geo.mu).abs() <= 1.0, "({pitch}, {yaw}): ({row}, {col})");
        if pitch == 0.0 && yaw == 0.0 {
            assert!((row - 32.0).abs() <= 1.0 && (col - 32.0).abs() <= 1.0);
        }
    }
}

#[test]
fn gradcheck_suite_passes() {
    let o = run(&["gradcheck", "--seeds", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn synth_writes_a_loadable_corpus() {
    use gaze_redirect::data::{load_dataset, LoadOptions};
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--count", "3", "--seed", "9", "--size", "16", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let opts = LoadOptions { size: 16, channels: 1, strict: true };
    assert_eq!(load_dataset(dir.path(), Path::new("labels.csv"), opts).unwrap().len(), 6);
}

#[test]
fn smoke_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg_path = d.join("smoke.toml");
    assert!(run(&["init-config", "--preset", "smoke", "--out", cfg_path.to_str().unwrap()]).status.success());
    let text = std::fs::read_to_string(&cfg_path).unwrap();
    let text = text
        .lines()
        .map(|l| if l.starts_with("out_dir") { format!("out_dir = {:?}", d.join("runs")) } else { l.to_string() })
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(&cfg_path, text).unwrap();

    let o = run(&["train-coarse", "--config", cfg_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let coarse = String::from_utf8(o.stdout).unwrap().trim().to_string();
    let o = run(&["train-fine", "--config", cfg_path.to_str().unwrap(), "--coarse-ckpt", &coarse]);
    assert!(o.status.success(), "{}", stderr(&o));
    let fine = String::from_utf8(o.stdout).unwrap().trim().to_string();
    let run_dir = Path::new(&fine).parent().unwrap();
    for f in ["config.toml", "trace_fine.csv", "residual_checks.csv"] {
        assert!(run_dir.join(f).is_file(), "{f} missing");
    }

    // A coarse checkpoint is not enough for redirection.
    let o = run(&["eval", "--ckpt", &coarse, "--report", d.join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let report = d.join("report");
    let o = run(&["eval", "--ckpt", &fine, "--report", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(report.join("eval_report.csv").is_file() && report.join("copy_input/eval_report.csv").is_file());

    let syn = d.join("syn");
    assert!(run(&["synth", "--count", "1", "--seed", "1", "--size", "16", "--out-dir", syn.to_str().unwrap()]).status.success());
    let labels = std::fs::read_to_string(syn.join("labels.csv")).unwrap();
    let first = labels.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    let out = d.join("panels.png");
    let o = run(&[
        "redirect", "--ckpt", &fine, "--input", syn.join(&first).to_str().unwrap(),
        "--labels", syn.join("labels.csv").to_str().unwrap(),
        "--target-pitch", "0", "--target-yaw", "-10", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (w, h, _) = read_rgb(&out);
    assert_eq!((w, h), (48, 16));
}
