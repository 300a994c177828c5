use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn qdalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qdalign"))
        .args(args)
        .env_remove("QDALIGN_LOG")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn stderr_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no error json: {text}"));
    serde_json::from_str(line).unwrap()
}

fn ok(o: &Output) -> Value {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    stdout_json(o)
}

#[test]
fn simulate_writes_the_requested_devices() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    let v = ok(&qdalign(&["simulate", "--preset", "fig2b", "--n", "50", "--seed", "7", "--squares", "0", "--out", path(&out)]));
    assert_eq!(v["status"], "ok");
    let devices = fs::read_to_string(out.join("devices.csv")).unwrap();
    assert_eq!(devices.lines().count(), 51);
    let pgm = fs::read(out.join("devices/device_0049_qd.pgm")).unwrap();
    let header = String::from_utf8_lossy(&pgm[..64.min(pgm.len())]);
    assert!(header.starts_with("P5") && header.contains("# pitch_nm=59"), "{header}");
}

#[test]
fn zero_devices_is_not_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tmp.path().join("c");
    ok(&qdalign(&["simulate", "--preset", "fig2c", "--n", "0", "--squares", "0", "--out", path(&c)]));
    let o = tmp.path().join("o");
    let v = ok(&qdalign(&["misalign", "--input", path(&c), "--out", path(&o)]));
    assert_eq!(v["summary"]["devices"], 0);
    let table = fs::read_to_string(o.join("misalignment.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 1);
}

#[test]
fn missing_emitter_image_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tmp.path().join("c");
    ok(&qdalign(&["simulate", "--preset", "fig2b", "--n", "0", "--squares", "1", "--out", path(&c)]));
    fs::remove_file(c.join("squares/square_000_emitters.pgm")).unwrap();
    let o = qdalign(&["locate", "--input", path(&c), "--out", path(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["status"], "error");
    assert_eq!(e["stage"], "emitters");
    assert_eq!(e["exit_code"], 2);
}

#[test]
fn bad_configuration_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"preset": "fig2b", "no_such_field": 1}"#).unwrap();
    let out = path(&tmp.path().join("o")).to_string();
    for args in [
        vec!["simulate", "--config", path(&cfg), "--out", &out],
        vec!["simulate", "--preset", "fig9", "--out", &out],
        vec!["locate", "--input", "/nonexistent/qdalign", "--out", &out],
        vec!["simulate", "--jobs", "0", "--out", &out],
        vec!["frobnicate"],
    ] {
        let o = qdalign(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert_eq!(stderr_json(&o)["kind"], "config", "{args:?}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"preset": "fig2b", "seed": 3, "n": 4, "squares": 0}"#).unwrap();
    let out = tmp.path().join("c");
    let v = ok(&qdalign(&["simulate", "--config", path(&cfg), "--n", "2", "--out", path(&out)]));
    assert_eq!(v["summary"]["seed"], 3);
    let devices = fs::read_to_string(out.join("devices.csv")).unwrap();
    assert_eq!(devices.lines().count(), 3);
}

/// SVG text with its numbers dropped: compares drawing structure only.
fn svg_shape(s: &str) -> String {
    s.chars().filter(|c| !c.is_ascii_digit() && *c != '.' && *c != '-').collect()
}

#[test]
fn commands_are_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tmp.path().join("c");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&qdalign(&["simulate", "--preset", "fig2b", "--n", "5", "--squares", "1", "--seed", "3", "--out", path(&c)]));
    for out in [&a, &b] {
        ok(&qdalign(&["locate", "--input", path(&c), "--out", path(out)]));
        ok(&qdalign(&["misalign", "--input", path(&c), "--out", path(out), "--jobs", "2"]));
        ok(&qdalign(&["report", "--input", path(out), "--out", path(out)]));
    }
    for f in ["markers.csv", "emitters.csv", "qd_global.csv", "transform.json", "misalignment.csv", "histogram.csv", "misalignment.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    for f in ["histogram.svg", "report.html"] {
        let (x, y) = (fs::read_to_string(a.join(f)).unwrap(), fs::read_to_string(b.join(f)).unwrap());
        assert_eq!(svg_shape(&x), svg_shape(&y), "{f}");
    }
    let html = fs::read_to_string(a.join("report.html")).unwrap();
    assert!(html.contains("<h2>Misalignment</h2>"));
}

#[test]
fn flat_stark_map_has_no_field_dependence() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("in");
    fs::create_dir_all(dir.join("maps")).unwrap();
    // one line at 930 nm whose position ignores the bias
    let wavelengths: Vec<f64> = (0..400).map(|j| 928.0 + 0.01 * j as f64).collect();
    let mut map = String::from("voltage_V");
    for wl in &wavelengths {
        map.push_str(&format!(",{wl}"));
    }
    map.push('\n');
    for i in 0..60 {
        map.push_str(&format!("{}", 0.5 + 0.01 * i as f64));
        for wl in &wavelengths {
            let y = 500.0 * (-0.5 * ((wl - 930.0) / 0.05f64).powi(2)).exp() + 10.0;
            map.push_str(&format!(",{y}"));
        }
        map.push('\n');
    }
    fs::write(dir.join("maps/flat_before.csv"), &map).unwrap();
    fs::write(dir.join("maps/flat_after.csv"), &map).unwrap();
    fs::write(dir.join("maps.csv"), "map_id,before,after\nflat,maps/flat_before.csv,maps/flat_after.csv\n").unwrap();
    let out = tmp.path().join("out");
    let o = qdalign(&["stark", "--input", path(&dir), "--out", path(&out)]);
    let v = ok(&o);
    assert_eq!(v["summary"]["maps"], 1, "{v}");
    let s: Value = serde_json::from_str(&fs::read_to_string(out.join("stark.json")).unwrap()).unwrap();
    let traces = s["maps"][0]["before"].as_array().unwrap();
    assert!(!traces.is_empty(), "{s}");
    for t in traces {
        let m = &t["model"];
        let (p, a) = (m["p_z"].as_f64().unwrap(), m["alpha"].as_f64().unwrap());
        assert!(p.abs() < 1e-6 && a.abs() < 1e-7, "{t}");
        assert!((m["lambda0_nm"].as_f64().unwrap() - 930.0).abs() < 1e-3, "{t}");
    }
}
