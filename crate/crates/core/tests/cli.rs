use std::path::Path;
use std::process::{Command, Output};

fn kbm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kbm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.to_string_lossy().into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).expect("file written")).expect("valid json")
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(kbm(&[]).status.code(), Some(2));
    assert_eq!(kbm(&["nope"]).status.code(), Some(2));
    assert_eq!(kbm(&["ldp", "--point", "0,0"]).status.code(), Some(2));
    assert_eq!(kbm(&["simulate", "--samples", "many"]).status.code(), Some(2));
    assert_eq!(kbm(&["--threads", "0", "ldp"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[ldp]\nunknown = 3\n").unwrap();
    let o = kbm(&["--config", bad.to_str().unwrap(), "ldp"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("out").exists());
    let o = kbm(&["-o", &out_arg(tmp.path()), "correction", "--tau", "2", "--grids", "missing"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn help_and_version_exit_with_zero() {
    assert_eq!(kbm(&["--help"]).status.code(), Some(0));
    assert_eq!(kbm(&["--version"]).status.code(), Some(0));
    for sub in ["charfn", "density", "simulate", "correction", "ldp", "pendulum", "check"] {
        assert_eq!(kbm(&[sub, "--help"]).status.code(), Some(0), "{sub}");
    }
}

#[test]
fn check_flag_runs_a_suite() {
    let o = kbm(&["charfn", "--check"]);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 4, "{stdout}");
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn ldp_full_turn_circle() {
    let tmp = tempfile::tempdir().unwrap();
    let o = kbm(&["-o", &out_arg(tmp.path()), "ldp", "--point", "0,0,6.2831853", "--n", "128"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&tmp.path().join("rate.json"));
    let v = r["result"]["value"]["value"].as_f64().unwrap();
    let exact = 2.0 * std::f64::consts::PI.powi(2);
    assert!((v / exact - 1.0).abs() < 0.01, "{v}");
    assert_eq!(r["result"]["certified"], true);
    assert_eq!(r["macro_rate"]["infinite"], false);
    let curve = std::fs::read_to_string(tmp.path().join("curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("t,gamma"));
    assert_eq!(curve.lines().count(), 130);
    let m = json(&tmp.path().join("manifest.json"));
    assert_eq!(m["command"], "ldp");
}

#[test]
fn ldp_outside_the_disc_is_infinite() {
    let tmp = tempfile::tempdir().unwrap();
    let o = kbm(&["-o", &out_arg(tmp.path()), "ldp", "--point", "0,1.2,0", "--n", "32"]);
    let r = json(&tmp.path().join("rate.json"));
    assert_eq!(r["result"]["value"]["infinite"], true);
    assert!(r["result"]["value"]["value"].is_null());
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn simulate_rescaled_diffusion() {
    let tmp = tempfile::tempdir().unwrap();
    let o = kbm(&[
        "-o",
        &out_arg(tmp.path()),
        "simulate",
        "--t",
        "0.01",
        "--samples",
        "1e3",
        "--steps",
        "32",
        "--rescale",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("samples.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("xc,yc,phic"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 1000);
    assert!(rows.iter().all(|r| r.len() == 3 && r.iter().all(|v| v.is_finite())));
    let manifest = json(&tmp.path().join("samples.json"));
    assert!(manifest.is_object());
}

#[test]
fn flags_win_over_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    let out = tmp.path().join("from-config");
    std::fs::write(
        &cfg,
        format!(
            "[run]\nthreads = 1\nout = {:?}\n\n[simulate]\nsamples = 500\nsteps = 16\nseed = 3\n",
            out.to_string_lossy()
        ),
    )
    .unwrap();
    let o = kbm(&["--config", cfg.to_str().unwrap(), "simulate", "--samples", "200"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["threads"], 1);
    assert_eq!(m["parameters"]["samples"], 200);
    assert_eq!(m["parameters"]["steps"], 16);
    assert_eq!(m["parameters"]["seed"], 3);

    let o = kbm(&["--config", cfg.to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    assert_eq!(csv.lines().count(), 501);
}

#[test]
fn charfn_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let o = kbm(&["-o", &out_arg(tmp.path()), "charfn", "--points", "3", "--gaussian-slice"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["charfn.csv", "charfn.json", "gaussian_slice.csv", "manifest.json"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(tmp.path().join("charfn.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 27);
}
