use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use infsa_core::format::{load_tensor, store_tensor, Tensor};
use infsa_core::Matrix;
use serde_json::Value;
use tempfile::TempDir;

fn infsa() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_infsa"));
    c.env_remove("INFSA_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    infsa().args(args).output().expect("binary runs")
}

fn write_matrix(dir: &Path, name: &str, rows: &[&[f64]]) -> PathBuf {
    let p = dir.join(name);
    store_tensor(&p, &Tensor::Matrix(Matrix::from_rows(rows).unwrap())).unwrap();
    p
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("valid json")
}

#[test]
fn swap_centrality_is_symmetric() {
    let dir = TempDir::new().unwrap();
    let p = write_matrix(dir.path(), "swap.inft", &[&[0.0, 1.0], &[1.0, 0.0]]);
    let v = json(&run(&["--format", "json", "--gamma", "0.5", "centrality", "--input", p.to_str().unwrap()]));
    let c: Vec<f64> = v["centrality"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    // (I − A/2)⁻¹ − I for the swap has rows [1/3, 2/3].
    for x in c {
        assert!((x - 1.0).abs() < 1e-12, "{x}");
    }
}

#[test]
fn divergent_gamma_exits_one() {
    let dir = TempDir::new().unwrap();
    let p = write_matrix(dir.path(), "eye.inft", &[&[1.0, 0.0], &[0.0, 1.0]]);
    let out = run(&["--gamma", "1.5", "kernel", "--input", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("diverge"), "{err}");
}

#[test]
fn kernel_round_trips_through_output_file() {
    let dir = TempDir::new().unwrap();
    let p = write_matrix(dir.path(), "a.inft", &[&[0.0, 0.5], &[0.25, 0.0]]);
    let k = dir.path().join("k.inft");
    let out = run(&["kernel", "--input", p.to_str().unwrap(), "--output", k.to_str().unwrap()]);
    assert!(out.status.success());
    let m = load_tensor(&k).unwrap().into_matrix();
    // Oracle: 2×2 inverse of I − γA with γ = 0.7.
    let (b, c) = (0.7 * 0.5, 0.7 * 0.25);
    let det = 1.0 - b * c;
    let want = Matrix::from_rows(&[&[1.0 / det - 1.0, b / det], &[c / det, 1.0 / det - 1.0]]).unwrap();
    assert!(m.max_abs_diff(&want) < 1e-14);
}

#[test]
fn affinity_normalizes_to_unit_frobenius() {
    let dir = TempDir::new().unwrap();
    let q = write_matrix(dir.path(), "q.inft", &[&[1.0, 0.0], &[0.5, 0.5], &[0.0, 2.0]]);
    let v = json(&run(&["--format", "json", "affinity", "--q", q.to_str().unwrap()]));
    let total: f64 = v["affinity"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap().powi(2)))
        .sum();
    assert!((total.sqrt() - 1.0).abs() < 1e-5);
}

fn simulate_csv(path: &Path, threads: &str) -> Vec<u8> {
    let out = infsa()
        .env("INFSA_THREADS", threads)
        .args(["--format", "csv", "--seed", "42", "simulate", "--normalize", "--walks", "20000", "--input"])
        .arg(path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

#[test]
fn simulate_is_byte_identical_across_runs_and_threads() {
    let dir = TempDir::new().unwrap();
    let p = write_matrix(
        dir.path(),
        "w.inft",
        &[&[0.1, 0.9, 0.3], &[0.4, 0.0, 0.8], &[0.7, 0.2, 0.5]],
    );
    let one = simulate_csv(&p, "1");
    assert_eq!(one, simulate_csv(&p, "1"));
    assert_eq!(one, simulate_csv(&p, "4"));
    assert!(String::from_utf8(one).unwrap().contains("token,mean,std_error"));
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(run(&["kernel", "--bogus"]).status.code(), Some(2));
}

#[test]
fn short_bench_plan_is_usage_error() {
    let out = run(&["bench", "--sizes", "64,128,256"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unsorted_bench_plan_is_usage_error() {
    let out = run(&["bench", "--sizes", "64,32,128,256"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fig3_demo_argmax() {
    let v = json(&run(&["--format", "json", "fig3-demo"]));
    assert_eq!(v["argmax"]["one_hop"], 0);
    assert_eq!(v["argmax"]["multi_hop"], 4);
}

#[test]
fn markov_fundamental_matches_kernel() {
    let dir = TempDir::new().unwrap();
    let p = write_matrix(dir.path(), "a.inft", &[&[0.2, 0.6], &[0.5, 0.1]]);
    let path = p.to_str().unwrap();
    let m = json(&run(&["--format", "json", "markov", "--input", path]));
    let k = json(&run(&["--format", "json", "kernel", "--input", path]));
    for i in 0..2 {
        for j in 0..2 {
            let n = m["fundamental"][i][j].as_f64().unwrap();
            let c = k["kernel"][i][j].as_f64().unwrap();
            let id = if i == j { 1.0 } else { 0.0 };
            assert!((n - id - c).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_preserves_shape() {
    let dir = TempDir::new().unwrap();
    let rows: Vec<Vec<f64>> = (0..5).map(|i| (0..4).map(|j| ((i * 4 + j) as f64).sin()).collect()).collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let x = write_matrix(dir.path(), "x.inft", &refs);
    let y = dir.path().join("y.inft");
    for variant in ["linear", "pure"] {
        let out = run(&[
            "forward",
            "--input",
            x.to_str().unwrap(),
            "--variant",
            variant,
            "--heads",
            "2",
            "--layers",
            "2",
            "--output",
            y.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(load_tensor(&y).unwrap().dims(), vec![5, 4]);
    }
}

#[test]
fn forward_rejects_bad_head_split() {
    let dir = TempDir::new().unwrap();
    let x = write_matrix(dir.path(), "x.inft", &[&[1.0, 2.0, 3.0]]);
    let out = run(&["forward", "--input", x.to_str().unwrap(), "--heads", "2", "--d-h", "2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corrupt_file_reports_error() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("bad.inft");
    std::fs::write(&p, b"nope").unwrap();
    let out = run(&["kernel", "--input", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn gradcheck_single_op() {
    let v = json(&run(&["--format", "json", "gradcheck", "--op", "layer_norm", "--seeds", "3"]));
    assert_eq!(v["gradcheck"][0]["status"], "pass");
    assert_eq!(run(&["gradcheck", "--op", "nope"]).status.code(), Some(2));
}

#[test]
fn small_bench_csv() {
    let out = run(&["--format", "csv", "bench", "--variant", "linear", "--sizes", "16,32,64,128"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("variant,n_tokens,median_s,repeats"));
    assert_eq!(lines.count(), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("slope linear"));
}
