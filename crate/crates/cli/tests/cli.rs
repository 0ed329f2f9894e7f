use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_emag-lab"));
    c.env_remove("EMAG_LAB_OUT");
    c
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok_dir(o: Output) -> PathBuf {
    assert!(
        o.status.success(),
        "exit {:?}: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Trains a tiny model and returns `(workdir, checkpoint dir)`.
fn trained(mode: &str, steps: usize) -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "train.json",
        &json!({
            "seed": 3,
            "model": {"mode": mode},
            "data": {"size": 64},
            "train": {"steps": steps, "batch": 4, "held_out": 8, "eval_every": 5}
        }),
    );
    let dir = ok_dir(run(&["train"], &cfg, &tmp.path().join("runs")));
    (tmp, dir.join("checkpoint"))
}

fn sample_config(ckpt: &Path, kind: &str, steps: Option<usize>, guidance: Value) -> Value {
    let mut schedule = json!({"kind": kind});
    if let Some(s) = steps {
        schedule["steps"] = json!(s);
    }
    json!({
        "seed": 11,
        "schedule": schedule,
        "guidance": guidance,
        "sampling": {"checkpoint": ckpt.to_str().unwrap(), "samples": 8},
        "metrics": {"k": 2, "reference": 32}
    })
}

#[test]
fn missing_mode_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &json!({"schedule": {"kind": "vp"}, "guidance": {"w_cfg": 3.0},
                "sampling": {"checkpoint": "nowhere"}}),
    );
    let o = run(&["sample"], &cfg, tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mode"));
}

#[test]
fn unknown_field_and_missing_config_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &json!({"sed": 1}));
    assert_eq!(run(&["train"], &cfg, tmp.path()).status.code(), Some(2));
    let o = bin().arg("train").arg("--out").arg(tmp.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_step_training_writes_init_and_one_loss_row() {
    let (_tmp, ckpt) = trained("eps", 0);
    let (params, _) = emag_core::model::checkpoint::load(&ckpt).unwrap();
    let init = emag_core::model::ToyModelParams::init(params.config.clone(), 3).unwrap();
    assert_eq!(params, init);
    let loss = std::fs::read_to_string(ckpt.parent().unwrap().join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2);
}

#[test]
fn training_rerun_is_bit_identical_and_seed_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "t.json",
        &json!({"seed": 1, "model": {"mode": "velocity"}, "data": {"size": 32},
                "train": {"steps": 6, "batch": 4, "held_out": 4}}),
    );
    let a = ok_dir(run(&["train"], &cfg, &tmp.path().join("a")));
    let b = ok_dir(run(&["train"], &cfg, &tmp.path().join("b")));
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    let c = ok_dir(run(&["train", "--seed", "2"], &cfg, &tmp.path().join("a")));
    assert!(c.to_string_lossy().ends_with("-s2"));
    assert_ne!(tree_bytes(&a), tree_bytes(&c));
}

#[test]
fn env_var_sets_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "t.json",
        &json!({"model": {"mode": "eps"}, "data": {"size": 8}, "train": {"steps": 0, "held_out": 2}}),
    );
    let root = tmp.path().join("env-root");
    let o = bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .env("EMAG_LAB_OUT", &root)
        .output()
        .unwrap();
    assert!(ok_dir(o).starts_with(&root));
}

#[test]
fn inverted_window_exits_2() {
    let (tmp, ckpt) = trained("eps", 0);
    let g = json!({"mode": "emag", "window": {"start": 10, "end": 20, "warmup": 0}});
    let cfg = write_config(tmp.path(), "s.json", &sample_config(&ckpt, "vp", Some(30), g));
    let o = run(&["sample"], &cfg, &tmp.path().join("runs"));
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn emag_with_unit_scale_matches_cfg_samples() {
    let (tmp, ckpt) = trained("eps", 10);
    let root = tmp.path().join("runs");
    let cfg = write_config(
        tmp.path(),
        "cfg.json",
        &sample_config(&ckpt, "vp", Some(20), json!({"mode": "cfg", "w_cfg": 3.0})),
    );
    let emag = write_config(
        tmp.path(),
        "emag.json",
        &sample_config(&ckpt, "vp", Some(20), json!({"mode": "emag", "w_cfg": 3.0, "w_e": 1.0})),
    );
    let a = ok_dir(run(&["sample"], &cfg, &root));
    let b = ok_dir(run(&["sample"], &emag, &root));
    assert_ne!(a, b);
    assert_eq!(
        std::fs::read(a.join("samples.csv")).unwrap(),
        std::fs::read(b.join("samples.csv")).unwrap()
    );
}

#[test]
fn flow_defaults_to_26_steps_and_replaces_from_step_20() {
    let (tmp, ckpt) = trained("velocity", 0);
    let cfg = write_config(
        tmp.path(),
        "f.json",
        &sample_config(&ckpt, "flow", None, json!({"mode": "emag"})),
    );
    let dir = ok_dir(run(&["sample"], &cfg, &tmp.path().join("runs")));
    let index: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("trajectory.json")).unwrap()).unwrap();
    let steps = index["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 26);
    let replaced: Vec<u64> = steps
        .iter()
        .filter(|s| s["replaced"].as_bool().unwrap())
        .map(|s| s["step"].as_u64().unwrap())
        .collect();
    assert_eq!(replaced.first(), Some(&20));
    assert_eq!(replaced.last(), Some(&6));
    let diag = std::fs::read_to_string(dir.join("diagnostics.csv")).unwrap();
    assert!(diag.starts_with("step,branch,layer,delta,chosen_layer,lambda,beta"));
}

#[test]
fn analyze_needs_runs_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin().arg("analyze").arg("--out").arg(tmp.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin()
        .arg("analyze")
        .arg(tmp.path())
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "a directory without trajectories");

    let (tmp, ckpt) = trained("eps", 5);
    let root = tmp.path().join("runs");
    let cfg = write_config(
        tmp.path(),
        "s.json",
        &sample_config(&ckpt, "vp", Some(8), json!({"mode": "cfg"})),
    );
    let run_dir = ok_dir(run(&["sample"], &cfg, &root));
    let analyze = |out: &Path| {
        ok_dir(
            bin()
                .arg("analyze")
                .arg(&run_dir)
                .arg("--config")
                .arg(&cfg)
                .arg("--out")
                .arg(out)
                .output()
                .unwrap(),
        )
    };
    let a = analyze(&tmp.path().join("x"));
    let b = analyze(&tmp.path().join("y"));
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    let metrics: Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["samples"], json!(8));
    assert!(metrics["frechet"].as_f64().unwrap() >= 0.0);
}

#[test]
fn sweep_matches_sample_and_analyze() {
    let (tmp, ckpt) = trained("eps", 5);
    let root = tmp.path().join("runs");
    let guidance = json!({"mode": "emag", "w_cfg": 2.0, "w_e": 1.5});
    let mut single = sample_config(&ckpt, "vp", Some(10), guidance.clone());
    let cfg = write_config(tmp.path(), "one.json", &single);
    let run_dir = ok_dir(run(&["sample"], &cfg, &root));
    let analysis = ok_dir(
        bin()
            .arg("analyze")
            .arg(&run_dir)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&root)
            .output()
            .unwrap(),
    );
    let direct: Value =
        serde_json::from_str(&std::fs::read_to_string(analysis.join("metrics.json")).unwrap()).unwrap();

    single["sweep"] = json!({"w_cfg": [2.0], "w_e": [1.5]});
    let sweep_cfg = write_config(tmp.path(), "sweep1.json", &single);
    let table_dir = ok_dir(run(&["sweep"], &sweep_cfg, &tmp.path().join("sweep-root")));
    let table = std::fs::read_to_string(table_dir.join("table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    let cells: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(cells[3].parse::<f64>().unwrap(), direct["frechet"].as_f64().unwrap());
    assert_eq!(cells[4].parse::<f64>().unwrap(), direct["precision"].as_f64().unwrap());
    assert!(run_dir.to_string_lossy().contains(cells[2]));
}

#[test]
fn sweep_grid_is_ordered_distinct_and_reproducible() {
    let (tmp, ckpt) = trained("eps", 5);
    let mut c = sample_config(&ckpt, "vp", Some(10), json!({"mode": "emag"}));
    c["sweep"] = json!({"w_cfg": [1.5, 3.0], "w_e": [1.0, 2.0]});
    let cfg = write_config(tmp.path(), "grid.json", &c);
    let table = |root: &str, jobs: &str| {
        let dir = ok_dir(run(&["sweep", "--jobs", jobs], &cfg, &tmp.path().join(root)));
        std::fs::read_to_string(dir.join("table.csv")).unwrap()
    };
    let a = table("a", "4");
    let rows: Vec<Vec<&str>> = a.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let grid: Vec<(&str, &str)> = rows.iter().map(|r| (r[0], r[1])).collect();
    assert_eq!(grid, [("1.5", "1.0"), ("1.5", "2.0"), ("3.0", "1.0"), ("3.0", "2.0")]);
    let mut hashes: Vec<&str> = rows.iter().map(|r| r[2]).collect();
    hashes.sort();
    hashes.dedup();
    assert_eq!(hashes.len(), 4);
    assert_eq!(a, table("b", "1"));
}
