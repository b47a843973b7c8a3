use std::path::Path;
use std::process::{Command, Output};

use berezin_cli::report::Report;

fn berezin(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_berezin"));
    cmd.args(args).env_remove("BEREZIN_CACHE_DIR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn load(dir: &Path) -> Report {
    Report::from_json(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

const SMALL: &str = "level = 4\ntruncation = 30\nladder = [20, 30]\n";

#[test]
fn malformed_config_exits_2_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    for text in ["level = \"six\"", "truncaton = 40", "level = 99", "ladder = [80, 40]"] {
        let cfg = write_config(tmp.path(), text);
        let o = berezin(&["run", "kernel-check", &cfg, "--out", out.to_str().unwrap()], &[]);
        assert_eq!(o.status.code(), Some(2), "{text}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!out.exists(), "{text} left outputs behind");
    }
}

#[test]
fn unknown_command_and_missing_file_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = berezin(&["run", "nope", "cfg.toml", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = berezin(&["run", "trace", "/nonexistent.toml", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn kernel_check_reports_area_and_reproducing_residuals() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "level = 4\n");
    let o = berezin(&["run", "kernel-check", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let r = load(&out);
    assert_eq!(r.schema, "report_v1");
    assert_eq!(r.command, "kernel-check");
    let names: Vec<&str> = r.checks.iter().map(|c| c.name.as_str()).collect();
    assert!(names.contains(&"quad.area") && names.contains(&"bergman.reproducing"));
    assert!(r.cache_keys.iter().all(|k| out.join("cache").join(k).exists()));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("criterion | check"));
}

#[test]
fn command_can_come_from_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "command = \"poincare\"\n");
    let o = berezin(&["run", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert!(matches!(o.status.code(), Some(0 | 1)));
    assert_eq!(load(&out).command, "poincare");
}

#[test]
fn trace_of_the_identity_is_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), SMALL);
    let o = berezin(&["run", "trace", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert!(matches!(o.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&o.stderr));
    let r = load(&out);
    let tau = r.checks.iter().find(|c| c.name == "trace.tau_identity").unwrap();
    assert!(tau.passed && tau.value < 1e-6);
    assert_eq!(o.status.code(), Some(if r.passed { 0 } else { 1 }));
}

#[test]
fn emit_svg_writes_ladders_and_the_delta_heat_map() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), SMALL);
    let o = berezin(&["run", "cusp-action", &cfg, "--out", out.to_str().unwrap(), "--emit-svg"], &[]);
    assert!(matches!(o.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&o.stderr));
    let r = load(&out);
    let heat = std::fs::read_to_string(out.join("delta_field.svg")).unwrap();
    assert!(heat.len() > 1000 && heat.contains(&r.config_hash));
    let csv = std::fs::read_to_string(out.join("cusp_intertwining_T.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 2);
    assert!(out.join("cusp_intertwining_T.svg").exists());
}

#[test]
fn cache_directory_comes_from_the_environment_unless_flagged() {
    let tmp = tempfile::tempdir().unwrap();
    let (env_cache, flag_cache) = (tmp.path().join("env"), tmp.path().join("flag"));
    let out = tmp.path().join("out");
    let o = berezin(&["run", "kernel-check", "--level", "2", "--out", out.to_str().unwrap()], &[("BEREZIN_CACHE_DIR", &env_cache)]);
    assert_eq!(o.status.code(), Some(0));
    let keys = load(&out).cache_keys;
    assert!(!keys.is_empty() && keys.iter().all(|k| env_cache.join(k).exists()));
    assert!(!out.join("cache").exists());
    let o = berezin(
        &["run", "kernel-check", "--level", "2", "--out", out.to_str().unwrap(), "--cache", flag_cache.to_str().unwrap()],
        &[("BEREZIN_CACHE_DIR", &env_cache)],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(keys.iter().all(|k| flag_cache.join(k).exists()));
}

#[test]
fn flags_override_the_file_and_reports_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "level = 5\nseed = 1\n");
    let cache = tmp.path().join("cache");
    let out = tmp.path().join("out");
    let mut texts = Vec::new();
    for _ in 0..2 {
        let args = ["run", "kernel-check", &cfg, "--out", out.to_str().unwrap(), "--level", "3", "--seed", "7"];
        let o = berezin(&[&args[..], &["--cache", cache.to_str().unwrap()]].concat(), &[]);
        assert_eq!(o.status.code(), Some(0));
        let r = load(&out);
        assert_eq!((r.config.level, r.config.seed), (3, 7));
        texts.push(r.canonical_json());
    }
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn render_prints_a_saved_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = berezin(&["run", "poincare", "--out", out.to_str().unwrap()], &[]);
    assert!(matches!(o.status.code(), Some(0 | 1)));
    let plots = tmp.path().join("plots");
    let o = berezin(&["render", out.join("report.json").to_str().unwrap(), "--svg-dir", plots.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("poincare.separation [") && text.contains("criteria"));
    assert!(plots.join("poincare_separation.svg").exists());
}
