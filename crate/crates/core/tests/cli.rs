use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_blowup-wave"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn col(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

#[test]
fn example1_writes_documented_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "run", "--preset", "example1", "--p", "2", "--I", "256", "--emit", "all", "--out", out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let expect = [
        (
            "tau_series.csv",
            vec!["block", "k", "tau_star", "lambda_pow_k_tau", "t_k"],
        ),
        (
            "blowup_curve.csv",
            vec!["block", "x_mid", "T_j", "depth", "status"],
        ),
        (
            "error_table.csv",
            vec!["I", "rel_l2", "rel_linf", "eval_time"],
        ),
        ("norm_trace.csv", vec!["t", "l2", "linf", "level"]),
        ("snapshots.csv", vec!["level", "k", "x", "t", "value"]),
    ];
    for (name, cols) in expect {
        let (h, rows) = read_csv(&dir.path().join(name));
        assert_eq!(h, cols, "{name}");
        assert!(!rows.is_empty(), "{name}");
    }
    let (h, rows) = read_csv(&dir.path().join("error_table.csv"));
    assert_eq!(rows.len(), 1);
    let l2: f64 = rows[0][col(&h, "rel_l2")].parse().unwrap();
    let li: f64 = rows[0][col(&h, "rel_linf")].parse().unwrap();
    assert!(l2 > 1e-3 && l2 < 3e-2, "{l2}");
    assert!(li > 1e-3 && li < 3e-2, "{li}");
    assert_eq!(rows[0][col(&h, "I")], "256");

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["config"]["cfg"]["lambda"], "1/2");
    let run0 = &summary["runs"][0];
    assert_eq!(run0["J"], 16);
    assert_eq!(run0["blocks"].as_array().unwrap().len(), 16);
    assert!(run0["global"]["tau_series"].as_array().unwrap().len() > 3);
    assert!(run0["blocks"][5]["rate_fit"]["slope"].as_f64().is_some());
}

#[test]
fn example2_tau_series() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["run", "--preset", "example2", "--I", "100", "--out", out]);
    assert!(o.status.success());
    let (h, rows) = read_csv(&dir.path().join("tau_series.csv"));
    let k10 = rows
        .iter()
        .find(|r| r[col(&h, "block")] == "0" && r[col(&h, "k")] == "10")
        .unwrap();
    let tau: f64 = k10[col(&h, "tau_star")].parse().unwrap();
    assert!((tau - 0.0840).abs() < 0.03 * 0.0840, "{tau}");
    assert!(!dir.path().join("blowup_curve.csv").exists());
}

#[test]
fn example3_curve_has_two_minima() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["run", "--preset", "example3", "--I", "256", "--out", out]);
    assert!(o.status.success());
    let (h, rows) = read_csv(&dir.path().join("blowup_curve.csv"));
    let t: Vec<f64> = rows
        .iter()
        .map(|r| r[col(&h, "T_j")].parse().unwrap())
        .collect();
    assert_eq!(t.len(), 16);
    let minima = (1..t.len() - 1)
        .filter(|&j| t[j] < t[j - 1] && t[j] < t[j + 1])
        .count();
    assert_eq!(minima, 2, "{t:?}");
}

#[test]
fn config_file_with_cli_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let out = dir.path().join("out");
    std::fs::write(
        &cfg,
        format!(
            "# two grids, only the tau series\npreset = example2\nI = 100,200\nemit = tau_series\nout = {}\n",
            out.display()
        ),
    )
    .unwrap();
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--k-max", "12"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for n in [100, 200] {
        let d = out.join(format!("I_{n}"));
        let (h, rows) = read_csv(&d.join("tau_series.csv"));
        let kmax = rows
            .iter()
            .map(|r| r[col(&h, "k")].parse::<usize>().unwrap())
            .max();
        assert_eq!(kmax, Some(12));
        assert!(!d.join("norm_trace.csv").exists());
    }
    let s = std::fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(s.contains("\"k_max\": 12"));
}

#[test]
fn bad_settings_give_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "run", "--preset", "example1", "--I", "128", "--J", "11", "--out", out,
    ]);
    assert_eq!(o.status.code(), Some(2));
    let rec: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(rec["error"]["kind"], "config");
    assert!(rec["error"]["message"].as_str().unwrap().contains("J^2"));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "preset = example2\nwidth = 3\n").unwrap();
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    let rec: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(rec["error"]["message"].as_str().unwrap().contains("width"));

    let o = run(&[
        "run", "--preset", "example2", "--lambda", "2/3", "--out", out,
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_failure_is_reported() {
    // the comparison time lies past the blow-up of the exact solution
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "run",
        "--preset",
        "example1",
        "--I",
        "64",
        "--eval-time",
        "0.7",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(1));
    let rec: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(rec["error"]["kind"], "numerical");
    assert!(dir.path().join("error.json").exists());
}

#[test]
fn custom_preset_reads_init_file() {
    let dir = tempfile::tempdir().unwrap();
    let init = dir.path().join("init.csv");
    let mut text = String::from("x,u0,u1\n");
    for i in 0..50 {
        let x = i as f64 / 50.0;
        let u0 = 100.0 * (1.0 - (2.0 * std::f64::consts::PI * x).cos());
        text += &format!("{x},{u0},0\n");
    }
    std::fs::write(&init, text).unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "run",
        "--preset",
        "custom",
        "--init",
        init.to_str().unwrap(),
        "--I",
        "100",
        "--k-max",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (_, rows) = read_csv(&out.join("tau_series.csv"));
    assert_eq!(rows.len(), 9);

    let o = run(&["run", "--preset", "custom", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn study_reports_orders() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "study",
        "--preset",
        "example1",
        "--I",
        "64,128,256",
        "--out",
        out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_csv(&dir.path().join("error_table.csv"));
    assert_eq!(h, ["I", "rel_l2", "rel_linf", "eval_time"]);
    assert_eq!(rows.len(), 3);
    let (h, rows) = read_csv(&dir.path().join("convergence.csv"));
    assert_eq!(rows.len(), 2);
    let last: f64 = rows[1][col(&h, "order_l2")].parse().unwrap();
    assert!(last > 1.5 && last < 2.5, "{last}");
    assert_eq!(rows[1][col(&h, "below_threshold")], "false");

    let o = run(&[
        "study", "--preset", "example1", "--I", "64,128", "--out", out,
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&[
        "study",
        "--preset",
        "example1",
        "--I",
        "64,128,200",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&[
        "study",
        "--preset",
        "example2",
        "--I",
        "64,128,256",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_lemmas_small() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "verify-lemmas",
        "--seed",
        "5",
        "--cases",
        "50",
        "--out",
        out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("lemmas.json")).unwrap())
            .unwrap();
    assert_eq!(v["lemma3_passed"], 50);
    assert_eq!(v["mutations"], v["mutations_detected"]);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run(&[
            "run",
            "--preset",
            "example3",
            "--I",
            "64",
            "--emit",
            "all",
            "--out",
            d.path().to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    for name in [
        "summary.json",
        "tau_series.csv",
        "blowup_curve.csv",
        "norm_trace.csv",
        "snapshots.csv",
    ] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs");
    }
}
