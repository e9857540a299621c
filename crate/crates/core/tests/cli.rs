use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{name}.conf"))
}

fn randers(args: &[&str], cfg: &str, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_randers"))
        .args(args)
        .arg("--config")
        .arg(config(cfg))
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn diag_reports_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let out = randers(&["diag"], "rb05", dir.path());
    assert_eq!(out.status.code(), Some(0));
    let d = json(&dir.path().join("diag.json"));
    assert!((d["lambda"].as_f64().unwrap() - 3.0).abs() < 1e-5);
    assert_eq!(d["pass"], Value::Bool(true));

    let out = randers(&["diag"], "riemannian", dir.path());
    assert_eq!(out.status.code(), Some(0));
    let d = json(&dir.path().join("diag.json"));
    assert!((d["lambda"].as_f64().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn diag_rejects_randers_violation() {
    let dir = tempfile::tempdir().unwrap();
    let out = randers(&["diag"], "rb12", dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("construction rejected"));
    for cmd in ["geodesic", "distmap"] {
        assert_eq!(randers(&[cmd], "rb12", dir.path()).status.code(), Some(1));
    }
}

#[test]
fn lens_on_cylinder_and_plane() {
    let dir = tempfile::tempdir().unwrap();
    let out = randers(&["lens", "--K", "2"], "cylinder", dir.path());
    assert_eq!(out.status.code(), Some(0));
    let s = json(&dir.path().join("summary.json"));
    let rays = s["rays"].as_array().unwrap();
    assert_eq!(rays.len(), 5);
    let mut last = 0.0;
    for (i, r) in rays.iter().enumerate() {
        let k = r["winding"][0].as_i64().unwrap() as f64;
        let t = r["arrival_time"].as_f64().unwrap();
        assert!((t - (1.0 + (PI / 2.0 + 2.0 * PI * k).powi(2)).sqrt()).abs() < 1e-4);
        assert!(t > last);
        last = t;
        let (header, rows) = csv_rows(&dir.path().join(format!("ray_{i}.csv")));
        assert_eq!(header, ["s", "x1", "x2", "t"]);
        assert!((rows.last().unwrap()[3] - t).abs() < 1e-12);
    }

    let dir = tempfile::tempdir().unwrap();
    assert_eq!(randers(&["lens"], "plane", dir.path()).status.code(), Some(0));
    assert_eq!(json(&dir.path().join("summary.json"))["rays"].as_array().unwrap().len(), 1);
}

#[test]
fn past_lens_flags_direction() {
    let dir = tempfile::tempdir().unwrap();
    let out = randers(&["lens", "--direction", "past"], "rot", dir.path());
    assert_eq!(out.status.code(), Some(0));
    let s = json(&dir.path().join("summary.json"));
    assert_eq!(s["direction"], "past");
    for r in s["rays"].as_array().unwrap() {
        assert_eq!(r["direction"], "past");
        assert!(r["arrival_time"].as_f64().unwrap() < 0.0);
    }
    let bad = randers(&["lens", "--direction", "sideways"], "rot", dir.path());
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn timelike_minkowski() {
    let dir = tempfile::tempdir().unwrap();
    let out = randers(&["timelike"], "mink", dir.path());
    assert_eq!(out.status.code(), Some(0));
    let s = json(&dir.path().join("summary.json"));
    let rays = s["rays"].as_array().unwrap();
    assert_eq!(rays.len(), 1);
    assert!((rays[0]["arrival_time"].as_f64().unwrap() - 10f64.sqrt()).abs() < 1e-6);
    let (header, rows) = csv_rows(&dir.path().join("timelike_0.csv"));
    assert_eq!(header, ["s", "x1", "x2", "t", "u"]);
    assert!(rays.iter().all(|r| r["energy_residual"].as_f64().unwrap() < 1e-3));
    assert!((rows[0][0]).abs() < 1e-15 && (rows.last().unwrap()[0] - 1.0).abs() < 1e-12);
    for e in ["0", "-1"] {
        assert_eq!(randers(&["timelike", "--energy", e], "mink", dir.path()).status.code(), Some(2));
    }
}

#[test]
fn distmap_euclidean_raster() {
    let dir = tempfile::tempdir().unwrap();
    let out = randers(&["distmap", "--resolution", "101", "--plot-data"], "euclidean", dir.path());
    assert_eq!(out.status.code(), Some(0));
    let (header, rows) = csv_rows(&dir.path().join("distmap.csv"));
    assert_eq!(header, ["x1", "x2", "dplus", "dminus"]);
    assert_eq!(rows.len(), 101 * 101);
    let worst = rows
        .iter()
        .filter_map(|r| {
            let n = r[0].hypot(r[1]);
            (n >= 0.2).then(|| (r[2] / n - 1.0).abs())
        })
        .fold(0.0, f64::max);
    assert!(worst < 0.02, "{worst}");
    let heat = std::fs::read_to_string(dir.path().join("dplus.dat")).unwrap();
    assert_eq!(heat.lines().count(), 101);
    assert_eq!(heat.lines().next().unwrap().split_whitespace().count(), 101);
}

#[test]
fn connect_same_point_gives_zero_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("same.conf");
    std::fs::write(
        &cfg,
        "dim = 2\nbounds = [[-1, 1], [-1, 1]]\nomega = [0.3, 0]\nsource = [0.2, 0.1]\nobserver = [0.2, 0.1]\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_randers"))
        .args(["connect", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let s = json(&dir.path().join("summary.json"));
    assert_eq!(s["curves"][0]["zero_curve"], Value::Bool(true));
    assert_eq!(s["curves"][0]["length"].as_f64(), Some(0.0));
}

#[test]
fn causal_membership_queries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("q.conf");
    let base = std::fs::read_to_string(config("mink")).unwrap();
    for (t1, inside) in [(4.0, true), (2.5, false)] {
        let text = base.replace("t1 = 4", &format!("t1 = {t1}"));
        std::fs::write(&cfg, text).unwrap();
        let out = Command::new(env!("CARGO_BIN_EXE_randers"))
            .args(["causal", "--plot-data", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path())
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        let s = json(&dir.path().join("summary.json"));
        assert_eq!(s["member"], Value::Bool(inside));
        assert_eq!(s["crosscheck"]["member"], Value::Bool(inside));
        assert_eq!(s["crosscheck"]["constructed"], Value::Bool(inside));
    }
    let cone = json(&dir.path().join("cone.json"));
    let slices = cone["slices"].as_array().unwrap();
    assert_eq!(slices.len(), 8);
    let s3 = &slices[3];
    let r = s3["s"].as_f64().unwrap();
    for p in s3["polylines"][0].as_array().unwrap() {
        let (x, y) = (p[0].as_f64().unwrap(), p[1].as_f64().unwrap());
        assert!((x.hypot(y) - r).abs() < 0.02);
    }
    assert!(dir.path().join("slice_3.dat").exists());
}

#[test]
fn dump_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["cylinder", "rot", "rb05", "annulus", "mink"] {
        let first = randers(&["lens", "--dump-config", "--N", "48", "--seed", "3"], name, dir.path());
        assert_eq!(first.status.code(), Some(0));
        let dumped = dir.path().join(format!("{name}.dump"));
        std::fs::write(&dumped, &first.stdout).unwrap();
        let second = Command::new(env!("CARGO_BIN_EXE_randers"))
            .args(["lens", "--dump-config", "--config"])
            .arg(&dumped)
            .output()
            .unwrap();
        assert_eq!(first.stdout, second.stdout, "{name}");
        let text = String::from_utf8(first.stdout).unwrap();
        assert!(text.contains("N = 48") && text.contains("seed = 3"));
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_randers");
    let code = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(code(&["lens"]), Some(2));
    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(code(&["diag", "--config", "/nonexistent.conf"]), Some(2));
    assert_eq!(randers(&["connect", "--N", "1"], "rb05", dir.path()).status.code(), Some(2));
    assert_eq!(randers(&["lens"], "rb05", dir.path()).status.code(), Some(2));
    let help = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}
