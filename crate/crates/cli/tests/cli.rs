//! End-to-end checks of the `aqn` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn aqn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aqn")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// Rows without the header and the `wall_ms` column.
fn numeric_body(rows: &[Vec<String>]) -> Vec<Vec<String>> {
    rows[1..].iter().map(|r| r[..r.len() - 1].to_vec()).collect()
}

fn column(rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let j = rows[0].iter().position(|h| h == name).unwrap();
    rows[1..].iter().map(|r| r[j].parse().unwrap()).collect()
}

#[test]
fn run_writes_the_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.csv");
    let res = aqn(&[
        "run", "--problem", "rosenbrock:d=100", "--method", "type1", "--rule", "forward", "--n", "25", "--h", "1e-9",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let rows = read_csv(&out);
    assert_eq!(rows[0].join(","), "t,oracle_calls,f,grad_norm,M,step_norm,backtracks,wall_ms");
    assert!(rows.len() > 2);
    assert!(rows.iter().all(|r| r.len() == 8));
    let f = column(&rows, "f");
    assert!(f.windows(2).all(|w| w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0)));
}

#[test]
fn full_memory_quadratic_converges_in_three_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("q.csv");
    let res = aqn(&[
        "run", "--problem", "quadratic:d=10:seed=1", "--method", "type1", "--rule", "ortho-batch", "--n", "10",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let rows = read_csv(&out);
    let g = column(&rows, "grad_norm");
    let t = column(&rows, "t");
    assert!(*g.last().unwrap() <= 1e-8, "final grad_norm {}", g.last().unwrap());
    assert!(*t.last().unwrap() <= 3.0, "took {} iterations", t.last().unwrap());
}

#[test]
fn identical_specs_give_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let mut bodies = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("r{i}.csv"));
        let res = aqn(&[
            "run", "--problem", "logistic:n=100:d=10", "--method", "type1", "--rule", "random", "--n", "4",
            "--seed", "42", "--max-iter", "40", "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        bodies.push(numeric_body(&read_csv(&out)));
    }
    assert!(!bodies[0].is_empty());
    assert_eq!(bodies[0], bodies[1]);
}

#[test]
fn master_seed_changes_random_problems() {
    let dir = tempfile::tempdir().unwrap();
    let mut first_f = Vec::new();
    for seed in ["1", "2"] {
        let out = dir.path().join(format!("s{seed}.csv"));
        let res = aqn(&[
            "run", "--problem", "quadratic:d=5", "--method", "gd", "--seed", seed, "--max-iter", "3",
            "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(code(&res), 0);
        first_f.push(column(&read_csv(&out), "f")[0]);
    }
    assert_ne!(first_f[0], first_f[1]);
}

#[test]
fn run_without_out_prints_csv() {
    let res = aqn(&["run", "--problem", "rosenbrock:d=4", "--method", "lbfgs", "--max-iter", "5"]);
    assert_eq!(code(&res), 0);
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.starts_with("t,oracle_calls,f,grad_norm,M,step_norm,backtracks,wall_ms\n"));
    assert_eq!(stdout.lines().count(), 7);
}

#[test]
fn compare_needs_two_methods() {
    let dir = tempfile::tempdir().unwrap();
    let res = aqn(&[
        "compare", "--problem", "rosenbrock:d=4", "--method", "gd", "--out-dir", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 2);
}

#[test]
fn unreachable_tolerance_is_null() {
    let dir = tempfile::tempdir().unwrap();
    let res = aqn(&[
        "compare", "--problem", "rosenbrock:d=6", "--method", "gd", "--method", "nesterov", "--tol", "1e-30",
        "--max-iter", "5", "--out-dir", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let rows = summary.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert!(r["oracle_calls_to_tol"].is_null());
        let mut keys: Vec<_> = r.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["final_f", "final_grad_norm", "method", "oracle_calls_to_tol"]);
    }
    assert!(dir.path().join("gd.csv").exists());
    assert!(dir.path().join("nesterov.csv").exists());
}

#[test]
fn compare_ranks_type1_before_gd_on_logistic() {
    let dir = tempfile::tempdir().unwrap();
    let res = aqn(&[
        "compare", "--problem", "logistic:n=500:d=50:reg=1e-3:seed=0", "--method", "gd", "--method",
        "type1:rule=forward", "--tol", "1e-6", "--max-iter", "5000", "--out-dir", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let rows = summary.as_array().unwrap();
    assert_eq!(rows[0]["method"], "type1-forward");
    assert_eq!(rows[1]["method"], "gd");
    assert!(rows[0]["oracle_calls_to_tol"].is_u64());
}

#[test]
fn compare_trace_matches_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--problem", "cubic-ls:d=8", "--seed", "3", "--max-iter", "30"];
    let mut cmp = vec!["compare", "--method", "type1:rule=random:n=3", "--method", "lbfgs"];
    cmp.extend(args);
    cmp.extend(["--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&aqn(&cmp)), 0);
    let single = dir.path().join("single.csv");
    let mut run = vec!["run", "--method", "type1", "--rule", "random", "--n", "3"];
    run.extend(args);
    run.extend(["--out", single.to_str().unwrap()]);
    assert_eq!(code(&aqn(&run)), 0);
    assert_eq!(
        numeric_body(&read_csv(&dir.path().join("type1-random.csv"))),
        numeric_body(&read_csv(&single))
    );
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let out = dir.path().join("c.csv");
    fs::write(&cfg, format!("problem=rosenbrock:d=5\nmethod=gd\nmax-iter=50\nout={}\n", out.display())).unwrap();
    let res = aqn(&["run", "--config", cfg.to_str().unwrap(), "--max-iter", "4"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(read_csv(&out).len(), 6);
}

#[test]
fn exit_codes_for_bad_input() {
    assert_eq!(code(&aqn(&["run", "--problem", "rosenbrock", "--method", "newton"])), 2);
    assert_eq!(code(&aqn(&["run", "--problem", "rosenbrock", "--method", "gd", "--n", "many"])), 2);
    assert_eq!(code(&aqn(&["run", "--method", "gd"])), 2);
    assert_eq!(code(&aqn(&["run", "--bogus"])), 2);
    assert_eq!(code(&aqn(&["run", "--problem", "rosenbrock:d=4", "--method", "type1", "--n", "9"])), 2);
    assert_eq!(code(&aqn(&["run", "--config", "/nonexistent/run.cfg"])), 3);
    assert_eq!(code(&aqn(&["run", "--problem", "libsvm:path=/nonexistent/x.svm", "--method", "gd"])), 3);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("missing-dir").join("t.csv");
    let res = aqn(&["run", "--problem", "rosenbrock:d=3", "--method", "gd", "--max-iter", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 3);
}

#[test]
fn libsvm_problems_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.svm");
    fs::write(&data, "+1 1:2.0 3:0.5\n-1 2:1.0\n+1 1:1.5 2:-0.3\n-1 3:1.2 1:-0.7\n").unwrap();
    for loss in ["logistic", "square"] {
        let problem = format!("libsvm:loss={loss}:reg=1e-2:path={}", data.display());
        let res = aqn(&["run", "--problem", &problem, "--method", "type1", "--n", "3", "--max-iter", "200", "--tol", "1e-7"]);
        assert_eq!(code(&res), 0, "{loss}: {}", String::from_utf8_lossy(&res.stderr));
        assert!(String::from_utf8_lossy(&res.stderr).contains("converged"), "{loss}");
    }
    fs::write(&data, "+1 1:x\n").unwrap();
    let res = aqn(&["run", "--problem", &format!("libsvm:path={}", data.display()), "--method", "gd"]);
    assert_eq!(code(&res), 3);
}
