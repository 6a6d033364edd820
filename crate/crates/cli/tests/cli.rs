use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const DEFAULT: &str = include_str!("../configs/default.json");

fn patlab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patlab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn patlab")
}

fn manifest(out: &Path) -> Value {
    serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    p.display().to_string()
}

fn default_config() -> Value {
    serde_json::from_str(DEFAULT).unwrap()
}

#[test]
fn selftest_on_bundled_config_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = patlab(&["selftest"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["subcommand"], "selftest");
    let csv = fs::read_to_string(out.join("selftest.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("true")), "{csv}");
}

#[test]
fn stability_writes_one_row_per_eps_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &default_config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = patlab(&["stability", "--config", &cfg], dir);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv = fs::read_to_string(a.join("stability.csv")).unwrap();
    let eps: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(eps, ["0.0", "0.005", "0.01", "0.02"]);
    for name in ["stability.csv", "stability.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let (mut ma, mut mb) = (manifest(&a), manifest(&b));
    ma.as_object_mut().unwrap().remove("wall_time_s");
    mb.as_object_mut().unwrap().remove("wall_time_s");
    assert_eq!(ma, mb);
    assert_eq!(ma["outputs"], serde_json::json!(["stability.csv", "stability.json"]));
}

#[test]
fn forward_artifacts_are_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = default_config();
    c["time"] = serde_json::json!({ "fixed": 1.0 });
    let cfg = write_config(tmp.path(), "c.json", &c);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(patlab(&["forward", "--config", &cfg, "--threads", "1", "--snapshot-stride", "20"], &a).status.code(), Some(0));
    assert_eq!(patlab(&["forward", "--config", &cfg, "--threads", "3", "--snapshot-stride", "20"], &b).status.code(), Some(0));
    let outputs = manifest(&a)["outputs"].as_array().unwrap().clone();
    assert!(outputs.iter().any(|p| p.as_str().unwrap().starts_with("snapshots/")));
    for p in &outputs {
        let p = p.as_str().unwrap();
        assert_eq!(fs::read(a.join(p)).unwrap(), fs::read(b.join(p)).unwrap(), "{p}");
    }
}

#[test]
fn missing_outer_radius_is_named_and_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = default_config();
    c["domain"].as_object_mut().unwrap().remove("R_M");
    let cfg = write_config(tmp.path(), "c.json", &c);
    let out = tmp.path().join("run");
    let o = patlab(&["forward", "--config", &cfg], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("domain.R_M"));
    let m = manifest(&out);
    assert_eq!(m["status"], "error");
    assert!(m["message"].as_str().unwrap().contains("domain.R_M"));
    let files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files, ["manifest.json"]);
}

#[test]
fn validation_lists_every_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = default_config();
    c["domain"]["R_K"] = 1.5.into();
    c["source"]["sigma"] = (-1.0).into();
    let cfg = write_config(tmp.path(), "c.json", &c);
    let o = patlab(&["forward", "--config", &cfg], &tmp.path().join("run"));
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("domain.R_K") && err.contains("source.sigma"), "{err}");
}

#[test]
fn config_hash_tracks_content_not_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let hash = |name: &str, text: &str| {
        let p = tmp.path().join(name);
        fs::write(&p, text).unwrap();
        let out = tmp.path().join(format!("{name}.out"));
        let o = patlab(&["selftest", "--config", p.to_str().unwrap()], &out);
        assert_eq!(o.status.code(), Some(0));
        manifest(&out)["config_sha256"].as_str().unwrap().to_string()
    };
    let base = hash("a.json", DEFAULT);
    let compact = hash("b.json", &serde_json::to_string(&default_config()).unwrap());
    assert_eq!(base, compact);
    let mut c = default_config();
    c["source"]["sigma"] = 0.16.into();
    assert_ne!(base, hash("c.json", &c.to_string()));
    let mut c = default_config();
    c["seeds"]["master"] = 7.into();
    assert_ne!(base, hash("d.json", &c.to_string()));
}

#[test]
fn non_convex_weight_is_a_hypothesis_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = default_config();
    c["speed"]["bumps"] = serde_json::json!([{ "center": [0.0, 0.0], "radius": 0.58, "amplitude": -0.3 }]);
    let cfg = write_config(tmp.path(), "c.json", &c);
    let out = tmp.path().join("run");
    let o = patlab(&["carleman", "--config", &cfg], &out);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(manifest(&out)["status"], "hypothesis_violation");
    assert!(out.join("carleman.json").exists());
}

#[test]
fn gnuplot_scripts_only_on_request() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &default_config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(patlab(&["convexity", "--config", &cfg], &a).status.code(), Some(0));
    assert_eq!(patlab(&["convexity", "--config", &cfg, "--emit-gnuplot"], &b).status.code(), Some(0));
    assert!(!a.join("convexity.gp").exists());
    assert!(b.join("convexity.gp").exists());
}
