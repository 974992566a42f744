use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nerfdem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nerfdem")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

const TERRAIN: &str = r#"{
  "kind": "gaussian_craters", "count": 2, "radius_range": [3, 5],
  "amplitude": 3, "x_range": [-10, 10], "y_range": [-10, 10], "seed": 1,
  "lighting": { "sun": { "dir": [0.6, 0.0, 0.8], "intensity": 3.0 } }
}"#;

const TRAJECTORY: &str = r#"{
  "n_frames": 3, "start_altitude": 14, "end_altitude": 10,
  "camera": { "width": 24, "height": 24, "fov_deg": 120 }
}"#;

const CONFIG: &str = r#"{
  "iterations": 20, "ray_batch_size": 32, "n_coarse": 8, "n_fine": 8,
  "t_near": 0.5, "t_far": 40,
  "height_grid": { "rows": 4, "cols": 4, "n_coarse": 8, "n_fine": 8 },
  "height_field": { "grid_res": [8, 8], "k1": 20, "k2": 20, "bound_margin": 0.1 },
  "radiance": { "levels": 2, "log2_table_size": 8, "hidden": 8, "hidden_layers": 1, "embedding_dim": 4 },
  "color_hidden": 8, "log_every": 5, "dem_resolution": 256
}"#;

fn simulate(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let terrain = write(dir, "terrain.json", TERRAIN);
    let traj = write(dir, "trajectory.json", TRAJECTORY);
    let data = dir.join("data");
    let mut args = vec!["simulate", "--terrain", &terrain, "--trajectory", &traj, "--out", path(&data)];
    args.extend_from_slice(extra);
    let out = nerfdem(&args);
    assert!(out.status.success(), "simulate failed: {}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn simulate_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), &["--mvs-holes", "0.3", "--mvs-noise", "0.2"]);
    for f in ["cameras.json", "meta.json", "gt_dem.pfm", "mvs_dem.pfm", "images/frame_000.pfm", "masks/frame_002.png"] {
        assert!(data.join(f).is_file(), "missing {f}");
    }
    let ds = nerfdem::dataset::Dataset::load(&data).unwrap();
    assert_eq!(ds.frames.len(), 3);
    assert!(ds.valid_pixel_count() > 0);
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), &["--mvs-holes", "0.3"]);
    let config = write(dir.path(), "config.json", CONFIG);
    let run = dir.path().join("run");
    let mvs = data.join("mvs_dem.pfm");
    let out = nerfdem(&[
        "train",
        "--config",
        &config,
        "--data",
        path(&data),
        "--out",
        path(&run),
        "--mvs",
        path(&mvs),
        "--deterministic",
        "--dump-rays",
        "2",
    ]);
    assert!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("AED") && table.contains("Coverage@0.1"), "{table}");

    let csv = fs::read_to_string(run.join("losses.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iteration,L_cA,L_cB,L_dist,L_height,L_mvs,total"));
    let rows: Vec<_> = lines.collect();
    assert!(rows.len() >= 4);
    // the MVS term is active when a map is passed
    assert!(rows.iter().all(|r| r.split(',').nth(5).unwrap().parse::<f64>().unwrap() > 0.0));
    assert!(run.join("checkpoint.bin").is_file());
    assert!(fs::read_dir(run.join("rays")).unwrap().count() >= 2);

    let pred = run.join("dem.pfm");
    let gt = data.join("gt_dem.pfm");
    let report_dir = dir.path().join("eval");
    let out = nerfdem(&[
        "eval",
        "--pred",
        path(&pred),
        "--gt",
        path(&gt),
        "--cell-size",
        "0.078125",
        "--window",
        "5",
        "--out",
        path(&report_dir),
    ]);
    assert!(out.status.success(), "eval failed: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(report_dir.join("eval_report.json")).unwrap()).unwrap();
    for key in ["aed", "red", "coverage"] {
        assert!(report[key].as_f64().is_some_and(f64::is_finite), "{key} in {report}");
    }
    assert!(report_dir.join("eval_diff.png").is_file());
    assert!(report_dir.join("eval_relative_diff.png").is_file());
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), &[]);
    let gt = data.join("gt_dem.pfm");
    let out = nerfdem(&["eval", "--pred", path(&gt), "--gt", path(&gt), "--cell-size", "0.1", "--out", path(dir.path())]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["aed"].as_f64(), Some(0.0));
    assert_eq!(report["coverage"].as_f64(), Some(1.0));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.pfm");
    let out = nerfdem(&["eval", "--pred", path(&missing), "--gt", path(&missing), "--cell-size", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.pfm"));

    let out = nerfdem(&["eval", "--pred", "a", "--gt", "b", "--cell-size", "-1"]);
    assert!(!out.status.success());

    let bad = write(dir.path(), "config.json", r#"{ "iterations": 10, "ray_batch_size": 0 }"#);
    let out = nerfdem(&["train", "--config", &bad, "--data", path(dir.path()), "--out", path(&dir.path().join("o"))]);
    assert!(!out.status.success());

    let out = nerfdem(&["frobnicate"]);
    assert!(!out.status.success());
}
