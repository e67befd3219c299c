use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};

fn headwise(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_headwise")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn base(strategy: Value, n_blocks: usize) -> Value {
    json!({
        "strategy": strategy,
        "head_role_map": "role_map.json",
        "prompt_schedule": [
            {"prompt": "a red car driving along a coastal road", "start_block": 1},
            {"prompt": "the car enters a tunnel at night", "start_block": 9}
        ],
        "N_blocks": n_blocks
    })
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn profile_into(dir: &Path) {
    let cfg = write_config(dir, "profile.json", &base(json!({"type": "head_wise"}), 4));
    let out = dir.join("profile");
    let (code, err) = headwise(&["profile", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    fs::copy(out.join("role_map.json"), dir.join("role_map.json")).unwrap();
}

#[test]
fn profile_is_deterministic_and_counts_roles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &base(json!({"type": "head_wise"}), 4));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(headwise(&["profile", "--config", &cfg, "--out", a.to_str().unwrap()]).0, 0);
    assert_eq!(headwise(&["profile", "--config", &cfg, "--out", b.to_str().unwrap()]).0, 0);
    for f in ["role_map.json", "bucket_proportions.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let map: Value = serde_json::from_slice(&fs::read(a.join("role_map.json")).unwrap()).unwrap();
    let roles = map["roles"].as_array().unwrap();
    let count = |r: &str| roles.iter().filter(|x| x["role"] == r).count();
    assert_eq!((count("anchor"), count("local"), count("memory")), (6, 5, 13));
    let rows = csv_rows(&a.join("bucket_proportions.csv"));
    assert_eq!(rows.len(), 24);
    for r in rows {
        let total: f64 = r[2..5].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

#[test]
fn seed_override_changes_the_profile() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &base(json!({"type": "head_wise"}), 4));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(headwise(&["profile", "--config", &cfg, "--out", a.to_str().unwrap()]).0, 0);
    assert_eq!(headwise(&["profile", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "11"]).0, 0);
    assert_ne!(
        fs::read(a.join("bucket_proportions.csv")).unwrap(),
        fs::read(b.join("bucket_proportions.csv")).unwrap()
    );
}

#[test]
fn invalid_thresholds_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = base(json!({"type": "unbounded"}), 4);
    c["hyperparameters"] = json!({"alpha_anchor": 0.6, "tau_local": 0.5});
    let cfg = write_config(dir.path(), "c.json", &c);
    let (code, err) = headwise(&["profile", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("configuration error"), "{err}");
}

#[test]
fn missing_role_map_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &base(json!({"type": "head_wise"}), 4));
    let (code, _) = headwise(&["generate", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 2);
    let (code, _) = headwise(&["generate", "--config", "/nonexistent/c.json"]);
    assert_eq!(code, 2);
}

#[test]
fn unbounded_fidelity_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &base(json!({"type": "unbounded"}), 10));
    let out = dir.path().join("o");
    assert_eq!(headwise(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()]).0, 0);
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 10);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0].parse::<usize>().unwrap(), i + 1);
        assert!((r[1].parse::<f64>().unwrap() - 1.0).abs() <= 1e-9);
    }
    assert_eq!(rows[8][5], "the car enters a tunnel at night");
    let admissions = fs::read_to_string(out.join("admission_log.csv")).unwrap();
    assert_eq!(admissions, "block_index,delta,admitted,compressed\n");
}

#[test]
fn single_head_wise_block_matches_reference() {
    let dir = tempfile::tempdir().unwrap();
    profile_into(dir.path());
    let cfg = write_config(dir.path(), "c.json", &base(json!({"type": "head_wise"}), 1));
    let out = dir.path().join("o");
    assert_eq!(headwise(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()]).0, 0);
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 1);
    assert!((rows[0][1].parse::<f64>().unwrap() - 1.0).abs() <= 1e-9);
}

#[test]
fn long_runs_skip_the_reference_unless_asked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &base(json!({"type": "uniform_window", "W": 4}), 65));
    let out = dir.path().join("o");
    assert_eq!(headwise(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()]).0, 0);
    assert!(csv_rows(&out.join("metrics.csv")).iter().all(|r| r[1].is_empty()));
    assert_eq!(
        headwise(&["generate", "--config", &cfg, "--out", out.to_str().unwrap(), "--with-oracle"]).0,
        0
    );
    assert!(csv_rows(&out.join("metrics.csv")).iter().all(|r| !r[1].is_empty()));
}

#[test]
fn scalar_ratio_tracks_frame_slot_ratio() {
    let dir = tempfile::tempdir().unwrap();
    profile_into(dir.path());
    let last_scalars = |strategy: Value, name: &str| -> (f64, f64) {
        let cfg = write_config(dir.path(), name, &base(strategy, 32));
        let out = dir.path().join(name.trim_end_matches(".json"));
        assert_eq!(headwise(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()]).0, 0);
        let rows = csv_rows(&out.join("metrics.csv"));
        let r = rows.last().unwrap();
        (r[2].parse().unwrap(), r[3].parse().unwrap())
    };
    let (hw_scalars, hw_slots) = last_scalars(json!({"type": "head_wise"}), "hw.json");
    let (u_scalars, u_slots) = last_scalars(json!({"type": "uniform_window", "W": 4}), "u4.json");
    assert_eq!(u_slots, 4.0 * 24.0);
    let budget = {
        let cfg = write_config(dir.path(), "b.json", &base(json!({"type": "head_wise"}), 1));
        let out = dir.path().join("b");
        assert_eq!(headwise(&["budget", "--config", &cfg, "--out", out.to_str().unwrap()]).0, 0);
        csv_rows(&out.join("budget.csv"))[0][2].parse::<f64>().unwrap()
    };
    assert_eq!(budget, 205.0);
    assert_eq!(hw_slots, budget);
    let ratio = (hw_scalars / u_scalars) / (budget / u_slots);
    assert!((ratio - 1.0).abs() <= 0.02, "ratio {ratio}");

    let state: Value = serde_json::from_slice(&fs::read(dir.path().join("hw/final_state.json")).unwrap()).unwrap();
    assert_eq!(state["strategy"], "head_wise");
    assert!(state["state"]["episodic"].as_array().unwrap().len() <= 5);
}

#[test]
fn budget_with_toy_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = base(json!({"type": "head_wise"}), 1);
    c["budget"] = json!({"counts": {"local": 5, "anchor": 6, "memory": 13}});
    let cfg = write_config(dir.path(), "c.json", &c);
    let out = dir.path().join("o");
    assert_eq!(headwise(&["budget", "--config", &cfg, "--out", out.to_str().unwrap()]).0, 0);
    let rows = csv_rows(&out.join("budget.csv"));
    assert_eq!(rows[0], vec!["head_wise", "4/7/11", "205", "100.0"]);
    assert_eq!(rows.len(), 5);
}

#[test]
fn stability_writes_run_maps() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = base(json!({"type": "unbounded"}), 1);
    c["stability"] = json!({"runs": 2, "axis": "repeats"});
    let cfg = write_config(dir.path(), "c.json", &c);
    let out = dir.path().join("o");
    assert_eq!(headwise(&["stability", "--config", &cfg, "--out", out.to_str().unwrap()]).0, 0);
    assert!(out.join("run_0_role_map.json").exists());
    assert!(out.join("run_1_role_map.json").exists());
    assert_eq!(csv_rows(&out.join("stability.csv")).len(), 4);

    c["stability"] = json!({"runs": 1});
    let cfg = write_config(dir.path(), "c1.json", &c);
    assert_eq!(headwise(&["stability", "--config", &cfg, "--out", out.to_str().unwrap()]).0, 2);
}
