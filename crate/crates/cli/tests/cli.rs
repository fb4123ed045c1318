use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
run_id = "tiny"

[adain]
steps = 1
batch_size = 1
crop_size = 32
resize_shorter = 32

[nerf]
steps = 2
batch_rays = 32

[nerf.network]
depth = 2
width = 16
skips = [1]
color_width = 8

[nerf.sampling]
n_coarse = 4
n_fine = 4

[multistyle]
steps = 2
batch_rays = 16
style_hidden = 8
style_dim = 8
view_dim = 8
rgb_hidden = 8

[multistyle.sampling]
n_coarse = 4
n_fine = 4
"#;

fn stylenerf(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stylenerf"))
        .args(args)
        .current_dir(cwd)
        .env("STYLENERF_RUNS", cwd.join("runs"))
        .output()
        .unwrap()
}

fn ok(cwd: &Path, args: &[&str]) -> Output {
    let out = stylenerf(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn help_exits_zero_without_touching_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["render", "--help"], &["train-nerf", "-h"], &["--version"]] {
        let out = stylenerf(dir.path(), args);
        assert_eq!(out.status.code(), Some(0), "{args:?}");
        assert!(!out.stdout.is_empty());
    }
    let help = String::from_utf8(stylenerf(dir.path(), &["render", "--help"]).stdout).unwrap();
    for flag in ["--style", "--pose-index", "--orbit", "--resolution", "--seed", "--config", "--run-id"] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
    assert!(files(dir.path()).is_empty());
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = stylenerf(dir.path(), &["paint"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
    assert_eq!(stylenerf(dir.path(), &["train-nerf", "--bogus"]).status.code(), Some(1));
    assert_eq!(stylenerf(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(stylenerf(dir.path(), &["train-nerf", "--steps", "-3"]).status.code(), Some(1));
}

#[test]
fn validation_failures_exit_one_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = stylenerf(dir.path(), &["train-nerf", "--scene", "s", "--learning-rate", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr(&out).trim_end().lines().count(), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("learning_rate"));

    std::fs::write(dir.path().join("bad.toml"), "run_id = \"x\"\nsteps = 3\n").unwrap();
    let out = stylenerf(dir.path(), &["--config", "bad.toml", "train-nerf", "--scene", "s"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("steps"));

    assert_eq!(stylenerf(dir.path(), &["train-nerf"]).status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = stylenerf(dir.path(), &["render", "--style", "style_00", "--pose-index", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("run that stage first"));

    let ckpt = dir.path().join("runs/default/checkpoints/multistyle.ckpt");
    std::fs::create_dir_all(ckpt.parent().unwrap()).unwrap();
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let out = stylenerf(dir.path(), &["render", "--style", "style_00"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    // a missing scene is the caller's mistake
    let out = stylenerf(dir.path(), &["train-nerf", "--scene", "missing-scene"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn serve_refuses_to_start_without_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = stylenerf(dir.path(), &["serve"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no multi-style checkpoint"));
}

fn progress_lines(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn full_pipeline_on_a_tiny_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    std::fs::write(cwd.join("tiny.toml"), TINY_CONFIG).unwrap();
    ok(
        cwd,
        &[
            "synth-scene", "--out", "scene", "--styles-out", "styles", "--train-views", "3", "--val-views", "1",
            "--resolution", "32", "--style-size", "32",
        ],
    );
    assert_eq!(files(&cwd.join("styles")), ["checker.png", "rings.png", "stripes.png"]);
    let cfg = ["--config", "tiny.toml"];
    let with = |rest: &[&'static str]| -> Vec<&str> { cfg.iter().copied().chain(rest.iter().copied()).collect() };

    let out = ok(cwd, &with(&["train-adain", "--content", "scene/images", "--styles", "styles"]));
    let lines = progress_lines(&out);
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["stage"], "adain");
    assert!(lines[0]["loss"].is_number());

    let out = ok(cwd, &with(&["train-nerf", "--scene", "scene"]));
    let lines = progress_lines(&out);
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l["psnr"].is_number()));

    ok(cwd, &with(&["build-stylized", "--scene", "scene", "--styles", "styles"]));
    let run: PathBuf = cwd.join("runs/tiny");
    assert_eq!(files(&run.join("stylized")), ["content", "style_00", "style_01", "style_02"]);
    assert!(run.join("registry.json").exists());

    let out = ok(cwd, &with(&["train-multistyle", "--scene", "scene"]));
    let lines = progress_lines(&out);
    assert_eq!(lines.len(), 2);
    assert!(lines[0]["extra"].as_object().unwrap().keys().any(|k| k.starts_with("loss/")));
    assert_eq!(files(&run.join("checkpoints")), ["adain.ckpt", "multistyle.ckpt", "nerf.ckpt"]);
    let archived = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(archived.contains("stage = \"multistyle\""));
    assert!(!run.join(".lock").exists());

    ok(cwd, &with(&["render", "--pose-index", "0", "--style", "style_02", "--out", "one"]));
    assert_eq!(files(&cwd.join("one")), ["pose_000.png"]);
    let first = std::fs::read(cwd.join("one/pose_000.png")).unwrap();
    ok(cwd, &with(&["render", "--pose-index", "0", "--style", "style_02", "--out", "one"]));
    assert_eq!(std::fs::read(cwd.join("one/pose_000.png")).unwrap(), first);

    ok(cwd, &with(&["render", "--orbit", "--frames", "3", "--style", "content", "--resolution", "16", "--out", "orbit"]));
    assert_eq!(files(&cwd.join("orbit")), ["orbit_000.png", "orbit_001.png", "orbit_002.png"]);

    ok(cwd, &with(&["interpolate", "--style-a", "style_00", "--style-b", "style_01", "--steps", "11", "--out", "interp"]));
    let frames = files(&cwd.join("interp"));
    assert_eq!(frames.len(), 11);
    assert_eq!(frames.first().unwrap(), "lambda_0.00.png");
    assert_eq!(frames.last().unwrap(), "lambda_1.00.png");
    assert!(frames.contains(&"lambda_0.50.png".to_string()));

    let out = stylenerf(cwd, &with(&["render", "--pose-index", "0", "--style", "style_09"]));
    assert_eq!(out.status.code(), Some(1));
}
