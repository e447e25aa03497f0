//! End-to-end runs of the `metalopt` binary.

use std::path::Path;
use std::process::{Command, Output};

fn metalopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metalopt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("cell.toml");
    let text = format!(
        r#"output_dir = "{}"

[grid]
nx = 12
ny = 12

[[busbar.segments]]
edge = "left"
start = 0.0065
length = 0.002

[run]
max_iters = 5
{extra}
"#,
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn run_writes_images_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("custom");
    let o = metalopt(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "2",
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("best efficiency"));
    for f in [
        "density.pgm",
        "overlay.ppm",
        "log.csv",
        "checkpoint.json",
        "config.toml",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(out.join("log.csv")).unwrap();
    assert!(log.starts_with("iter,power_w,efficiency_pct,loss,grad_norm,newton_iters,wall_s\n"));
    assert_eq!(log.lines().count(), 6);
    let resolved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(resolved.contains("seed = 2"), "{resolved}");
}

#[test]
fn resume_and_render_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "pipeline = \"solarnet\"");
    let cfg = cfg.to_str().unwrap();
    assert!(metalopt(&["run", "--config", cfg]).status.success());
    let ckpt = dir.path().join("out").join("checkpoint.json");
    let o = metalopt(&["run", "--config", cfg, "--resume", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));

    let img = dir.path().join("again.pgm");
    let o = metalopt(&[
        "render",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        img.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(
        std::fs::read(&img).unwrap(),
        std::fs::read(dir.path().join("out/density.pgm")).unwrap()
    );
}

#[test]
fn gradcheck_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = metalopt(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}{}", text(&o.stdout), text(&o.stderr));
    let stdout = text(&o.stdout);
    assert!(stdout.contains("adjoint 8x8") && stdout.contains("adjoint 16x16"));
    assert!(!stdout.contains("FAIL"));
    let o = metalopt(&[
        "gradcheck",
        "--config",
        cfg.to_str().unwrap(),
        "--grid",
        "10",
    ]);
    assert!(o.status.success());
    assert!(text(&o.stdout).contains("adjoint 10x10"));
}

#[test]
fn compare_emits_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "max_iters = 2");
    let cfg_text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("max_iters = 5\n", "");
    std::fs::write(&cfg, cfg_text).unwrap();
    let o = metalopt(&["compare", "--config", cfg.to_str().unwrap(), "--seeds", "2"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    let rows: Vec<&str> = stdout.lines().skip(1).collect();
    assert_eq!(rows.len(), 5, "{stdout}");
    for name in [
        "edge-centered",
        "full-edge",
        "opposite-edges",
        "corner",
        "triangle",
    ] {
        assert!(stdout.contains(name), "{name}");
    }
    let csv = std::fs::read_to_string(dir.path().join("out/compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 3);
}

#[test]
fn bad_inputs_fail_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = metalopt(&[
        "run",
        "--config",
        dir.path().join("missing.toml").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("missing.toml"));

    let cfg = write_config(dir.path(), "bogus = 1");
    let o = metalopt(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("bogus"), "{}", text(&o.stderr));

    let o = metalopt(&[
        "render",
        "--checkpoint",
        cfg.to_str().unwrap(),
        "--out",
        "x.pgm",
    ]);
    assert!(!o.status.success());
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = metalopt_core::ExperimentConfig::load(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.problem()
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 4);
}
