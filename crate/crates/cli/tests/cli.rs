use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn pte_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pte-lab"))
        .args(args)
        .env_remove("PTE_LAB_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(rows: &[Vec<String>], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j].parse().unwrap()).collect()
}

#[test]
fn gamma_boundaries() {
    let (_, rows) = read_csv(&stdout(&pte_lab(&["gamma", "--alpha", "1"])));
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap() == 0.0 && r[2].parse::<f64>().unwrap() == 0.0));
    let (_, rows) = read_csv(&stdout(&pte_lab(&["gamma", "--alpha", "0"])));
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap() == 1.0 && r[2].parse::<f64>().unwrap() == 1.0));
}

#[test]
fn gamma_default_grid_is_monotone() {
    let (header, rows) = read_csv(&stdout(&pte_lab(&["gamma"])));
    assert_eq!(header, ["delta_sq", "gamma2", "gamma4"]);
    assert_eq!(rows.len(), 61);
    for j in 1..3 {
        let col = column(&rows, j);
        assert!(col.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn amse_curve_rows() {
    let (header, rows) = read_csv(&stdout(&pte_lab(&["amse-curve", "--grid", "0,9,200"])));
    assert_eq!(header, ["delta_sq", "amse_u", "amse_c", "amse_pte"]);
    let first: Vec<f64> = rows[0].iter().map(|s| s.parse().unwrap()).collect();
    assert_eq!(&first[..3], &[0.0, 10.0, 1.0]);
    assert!(first[3] < 10.0);
    let last: Vec<f64> = rows[2].iter().map(|s| s.parse().unwrap()).collect();
    assert!((last[3] - 10.0).abs() < 0.05);
}

#[test]
fn csv_round_trips_through_its_own_parser() {
    let text = stdout(&pte_lab(&["amse-curve", "--grid", "0:5:0.1", "--p", "6", "--r", "2"]));
    assert!(!text.contains('\r'));
    let (_, rows) = read_csv(&text);
    for row in &rows {
        for cell in row {
            let x: f64 = cell.parse().unwrap();
            assert_eq!(format!("{x:.16e}"), *cell);
        }
    }
}

#[test]
fn json_output_parses() {
    let text = stdout(&pte_lab(&["gamma", "--format", "json", "--grid", "0,1"]));
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["p"], 10);
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn linreg_centered_and_boundary() {
    let (_, rows) = read_csv(&stdout(&pte_lab(&["linreg-amse", "--x-bar0", "0", "--s0", "2", "--verify"])));
    assert!(column(&rows, 2).iter().chain(column(&rows, 3).iter()).all(|x| *x == 0.0));

    let (s2, xb, s0) = (0.7, 1.3, 2.5);
    let out = pte_lab(&[
        "linreg-amse", "--sigma-sq", "0.7", "--x-bar0", "1.3", "--s0", "2.5", "--alpha", "1", "--delta-grid", "0:3:1",
    ]);
    let (_, rows) = read_csv(&stdout(&out));
    let inv = [s2 * (1.0 + xb * xb / s0), -s2 * xb / s0, -s2 * xb / s0, s2 / s0];
    for row in &rows {
        for (j, expect) in inv.iter().enumerate() {
            let got: f64 = row[j + 1].parse().unwrap();
            assert!((got - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn linreg_verification_flag_passes_on_random_inputs() {
    let out = pte_lab(&[
        "linreg-amse", "--sigma-sq", "2.2", "--x-bar0", "-0.8", "--s0", "0.3", "--alpha", "0.1", "--delta-grid",
        "-4:4:0.5", "--verify",
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("verified 17 rows"));
}

#[test]
fn exit_codes() {
    assert_eq!(pte_lab(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(pte_lab(&["gamma", "--p", "nope"]).status.code(), Some(1));
    assert_eq!(pte_lab(&["gamma", "--grid", "5:1:1"]).status.code(), Some(1));
    assert_eq!(pte_lab(&["gamma", "--p", "2", "--r", "2"]).status.code(), Some(2));
    assert_eq!(pte_lab(&["gamma", "--alpha", "1.5"]).status.code(), Some(2));
    assert_eq!(pte_lab(&["linreg-amse", "--s0", "0"]).status.code(), Some(2));
    assert_eq!(pte_lab(&["simulate", "--n-i", "2"]).status.code(), Some(2));
    assert_eq!(pte_lab(&["--help"]).status.code(), Some(0));
    assert_eq!(pte_lab(&["gamma", "--config", "/nonexistent/run.toml"]).status.code(), Some(1));
}

fn simulate_into(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.join("run.csv");
    let mut args = vec!["simulate", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    pte_lab(&args)
}

#[test]
fn simulate_smoke_run_writes_all_files() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = simulate_into(dir.path(), &["--M", "1"]);
    assert!(start.elapsed() < Duration::from_secs(5));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
    let (header, rows) = read_csv(&text);
    assert_eq!(
        header,
        ["kind", "ell", "delta_sq", "estimator", "empirical_amse_s", "se", "analytic_amse_s", "M_effective"]
    );
    assert_eq!(rows.len(), 10 * 9);
    for kind in ["scale", "shape", "cov"] {
        for part in ["empirical", "analytic"] {
            let path = dir.path().join(format!("run_{kind}_{part}.csv"));
            let (_, rows) = read_csv(&std::fs::read_to_string(path).unwrap());
            assert_eq!(rows.len(), 10);
        }
    }
}

#[test]
fn simulate_is_reproducible_across_runs_and_threads() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["--M", "30", "--n-i", "300", "--seed", "11", "--ells", "0,4,8"];
    let mut one = vec!["--threads", "1"];
    one.extend_from_slice(&args[..]);
    let mut four = vec!["--threads", "4"];
    four.extend_from_slice(&args[..]);
    assert!(simulate_into(a.path(), &one).status.success());
    assert!(simulate_into(b.path(), &four).status.success());
    for name in ["run.csv", "run_scale_empirical.csv", "run_cov_analytic.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn config_file_values_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "format = \"json\"\n[amse-curve]\np = 4\nr = 2\ngrid = \"0,1\"\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let v: serde_json::Value = serde_json::from_str(&stdout(&pte_lab(&["amse-curve", "--config", cfg]))).unwrap();
    assert_eq!(v["p"], 4);
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    let v: serde_json::Value =
        serde_json::from_str(&stdout(&pte_lab(&["amse-curve", "--config", cfg, "--p", "7"]))).unwrap();
    assert_eq!(v["p"], 7);
    let text = stdout(&pte_lab(&["amse-curve", "--config", cfg, "--format", "csv"]));
    assert!(text.starts_with("delta_sq,"));
}

#[test]
fn simulate_json_carries_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    let out = pte_lab(&[
        "simulate", "--M", "2", "--ells", "0,1", "--format", "json", "--out", path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let point = &v["levels"][1]["points"][0];
    assert_eq!(point["empirical_matrix"].as_array().unwrap().len(), 6);
    assert_eq!(point["analytic_matrix"][0].as_array().unwrap().len(), 6);
    assert!(dir.path().join("run_shape_analytic.csv").exists());
}

#[test]
fn thread_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pte-lab"))
        .args(["simulate", "--M", "1", "--ells", "0", "--out", dir.path().join("r.csv").to_str().unwrap()])
        .env("PTE_LAB_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_pte-lab"))
        .args(["gamma"])
        .env("PTE_LAB_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
