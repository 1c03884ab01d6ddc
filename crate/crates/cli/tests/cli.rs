use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_motion4d"));
    c.env("SOURCE_DATE_EPOCH", "1700000000");
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "motion4d {args:?} failed");
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Defaults for the reduced phantom with a short fit schedule.
fn setup(root: &Path) -> (PathBuf, PathBuf) {
    let defaults = root.join("defaults");
    ok(&["defaults", "--reduced", "--out", s(&defaults)]);
    let cfg_path = defaults.join("config.json");
    let mut cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg["levels"] = serde_json::json!([[2, 2, 2], [1, 1, 1]]);
    cfg["max_alternations"] = 2.into();
    cfg["max_inner_iters"] = 3.into();
    cfg["max_mcir_iters"] = 3.into();
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let data = root.join("data");
    ok(&["simulate", "--spec", s(&defaults.join("spec.json")), "--out", s(&data)]);
    (cfg_path, data)
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn end_to_end_workflow() {
    let root = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(root.path());
    for f in ["segments", "signals.csv", "labels.csv", "sorted/phase_0.json", "sorted/gaps.csv", "gt/template.json", "manifest.json"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let fit_a = root.path().join("fit_a");
    let msg = ok(&["fit", "--config", s(&cfg), "--data", s(&data), "--out", s(&fit_a)]);
    assert!(msg.contains("final objective"));
    for f in ["config.json", "i0.json", "signals.csv", "model_1.json", "model_2.json", "trace.csv", "coverage.json", "labels.csv", "manifest.json"] {
        assert!(fit_a.join(f).exists(), "{f}");
    }

    // identical inputs and pinned clock give identical directories
    let fit_b = root.path().join("fit_b");
    ok(&["fit", "--config", s(&cfg), "--data", s(&data), "--out", s(&fit_b)]);
    assert_eq!(tree(&fit_a), tree(&fit_b));

    let eval = root.path().join("eval");
    let msg = ok(&["evaluate", "--result", s(&fit_a), "--gt", s(&data), "--out", s(&eval), "--stride", "5"]);
    assert!(msg.contains("model") && msg.contains("sorted"));
    for f in ["report.csv", "summary.json", "baseline_report.csv", "baseline_summary.json", "manifest.json"] {
        assert!(eval.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n"], 8);

    let none = root.path().join("export_none");
    ok(&["export", "--result", s(&fit_a), "--out", s(&none)]);
    let names: Vec<String> = tree(&none).into_iter().map(|f| f.0).collect();
    assert_eq!(names, ["extreme_inhalation.json", "manifest.json"]);
    let pair: serde_json::Value = serde_json::from_str(&fs::read_to_string(none.join("extreme_inhalation.json")).unwrap()).unwrap();
    assert!(pair["t_deep"].as_u64().is_some() && pair["t_shallow"].as_u64().is_some());

    let one = root.path().join("export_one");
    ok(&["export", "--result", s(&fit_a), "--timepoints", "0", "--out", s(&one)]);
    let frames: Vec<String> = tree(&one.join("frames")).into_iter().map(|f| f.0).collect();
    assert_eq!(frames, ["frame_00000.json", "frame_00000.raw"]);

    let bad = run(&["export", "--result", s(&fit_a), "--timepoints", "9999", "--out", s(&root.path().join("bad"))]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(root.path());

    // driven mode without a breathing signal
    fs::remove_file(data.join("signals.csv")).unwrap();
    let mut driven: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    driven["mode"] = "driven".into();
    let driven_cfg = root.path().join("driven.json");
    fs::write(&driven_cfg, driven.to_string()).unwrap();
    let out = run(&["fit", "--config", s(&driven_cfg), "--data", s(&data), "--out", s(&root.path().join("o1"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("signals.csv"));

    let out = run(&["fit", "--config", s(&cfg), "--data", s(&root.path().join("missing")), "--out", s(&root.path().join("o2"))]);
    assert_eq!(out.status.code(), Some(3));

    let mut unknown: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    unknown["no_such_field"] = 1.into();
    let unknown_cfg = root.path().join("unknown.json");
    fs::write(&unknown_cfg, unknown.to_string()).unwrap();
    let out = run(&["fit", "--config", s(&unknown_cfg), "--data", s(&data), "--out", s(&root.path().join("o3"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["export", "--result", s(&data), "--timepoints", "1,x", "--out", s(&root.path().join("o4"))]);
    assert_eq!(out.status.code(), Some(2));
}
