use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sphpr::io::{read_dataset, read_grid_csv, read_json, write_spherical};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sphpr"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn sphpr")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn estimate_fixed(data: &Path, out: &Path, seed: &str) -> Output {
    run(&[
        "estimate",
        "--data",
        s(data),
        "--lambda",
        "10",
        "--grid-theta",
        "20",
        "--grid-phi",
        "40",
        "--perms",
        "3",
        "--eval-theta",
        "10",
        "--eval-phi",
        "20",
        "--seed",
        seed,
        "--out-dir",
        s(out),
    ])
}

#[test]
fn two_and_three_column_inputs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let xyz = data("single_vmf_n221.csv");
    let sph = dir.path().join("sph.csv");
    write_spherical(&sph, &read_dataset(&xyz).unwrap().points).unwrap();

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(estimate_fixed(&xyz, &a, "4").status.success());
    assert!(estimate_fixed(&sph, &b, "4").status.success());
    let (ga, va) = read_grid_csv(a.join("psi.csv")).unwrap();
    let (gb, vb) = read_grid_csv(b.join("psi.csv")).unwrap();
    assert_eq!(ga.len(), gb.len());
    for (x, y) in va.iter().zip(&vb) {
        assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-300), "{x} vs {y}");
    }
}

#[test]
fn same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let d = data("two_vmf_n221.csv");
    assert!(estimate_fixed(&d, &a, "9").status.success());
    assert!(estimate_fixed(&d, &b, "9").status.success());
    for f in ["psi.csv", "mixture_density.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["estimate", "--data", "/nonexistent/points.csv", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["estimate", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    let out = run(&["estimate", "--data", s(&data("single_vmf_n221.csv")), "--gamma", "2", "--lambda", "10"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn gof_favours_single_kernel_on_single_vmf_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gof", "--data", s(&data("single_vmf_n221.csv")), "--out-dir", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = read_json(dir.path().join("gof.json")).unwrap();
    assert_eq!(v["verdict"], "FavorsH0");
    assert!(v["log10_bf"].as_f64().unwrap() > 1.0);
}

#[test]
fn plot_data_emits_one_row_per_node() {
    let dir = tempfile::tempdir().unwrap();
    let est = dir.path().join("est");
    assert!(estimate_fixed(&data("single_vmf_n221.csv"), &est, "1").status.success());
    let plot = dir.path().join("plot");
    let out = run(&[
        "plot-data",
        "--estimate",
        s(&est.join("psi.csv")),
        "--lambda",
        "10",
        "--eval-theta",
        "12",
        "--eval-phi",
        "24",
        "--data",
        s(&data("single_vmf_n221.csv")),
        "--out-dir",
        s(&plot),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = |f: &str| csv::Reader::from_path(plot.join(f)).unwrap().records().count();
    assert_eq!(rows("psi_contour.csv"), 20 * 40);
    assert_eq!(rows("density_contour.csv"), 12 * 24);
    assert_eq!(rows("data_points.csv"), 221);
}

#[test]
fn cluster_labels_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "cluster",
        "--data",
        s(&data("two_vmf_n221.csv")),
        "--grid-theta",
        "30",
        "--grid-phi",
        "60",
        "--perms",
        "2",
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let labels: Vec<usize> = csv::Reader::from_path(dir.path().join("labels.csv"))
        .unwrap()
        .records()
        .map(|r| r.unwrap()[1].parse().unwrap())
        .collect();
    assert_eq!(labels.len(), 221);
    let modes: serde_json::Value = read_json(dir.path().join("modes.json")).unwrap();
    let k = modes["modes"].as_array().unwrap().len();
    assert!(k >= 2);
    assert!(labels.iter().all(|l| *l < k));
}

#[test]
fn fit_em_with_fixed_components() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "fit-em",
        "--data",
        s(&data("two_vmf_n221.csv")),
        "--components",
        "2",
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = read_json(dir.path().join("report.json")).unwrap();
    assert_eq!(v["results"]["components"], 2);
    assert!(v["results"]["log_lik"].as_f64().unwrap().is_finite());
}

#[test]
fn simulate_bundled_config_at_reduced_size() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/vmf-1.toml");
    let out = run(&[
        "simulate",
        "--config",
        s(&cfg),
        "--replications",
        "1",
        "--n",
        "150",
        "--perms",
        "2",
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = read_json(dir.path().join("simulation.json")).unwrap();
    assert_eq!(v["completed"], 1);
    assert!(v["kl_pr"]["mean"].as_f64().unwrap() > 0.0);

    let sample = dir.path().join("sample.csv");
    let out = run(&["simulate", "--preset", "vmf-1", "--n", "50", "--sample", s(&sample), "--out-dir", s(dir.path())]);
    assert!(out.status.success());
    assert_eq!(read_dataset(&sample).unwrap().points.len(), 50);
}

#[test]
fn bad_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "label = \"x\"\nfamily = \"vmf\"\nlambda = \"ten\"\n").unwrap();
    let out = run(&["simulate", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml:3:"), "{}", String::from_utf8_lossy(&out.stderr));
}
