#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_curedesign"));
    c.env("RUST_LOG", "warn");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Desk preset shrunk to seconds of work: tiny networks, few designs and
/// short optimizer runs.
pub fn tiny_config() -> Value {
    let text = curedesign::config::preset("desk-scale").unwrap();
    let mut v: Value = serde_json::from_str(text).unwrap();
    let t = &mut v["train"];
    t["designs"] = json!(3);
    t["collocation"] = json!(16);
    t["boundary_points"] = json!(8);
    t["ic_points"] = json!(3);
    t["epochs"] = json!(2);
    t["steps_per_epoch"] = json!(5);
    t["initial_subdomains"] = json!(2);
    t["split_threshold"] = json!(0.0);
    t["max_splits"] = json!(1);
    t["eval_batches"] = json!(2);
    t["architecture"] = json!({"branch": [6, 6], "trunk": [6, 6], "decoder": [6]});
    v["sim"]["dt"] = json!(5.0);
    v["sim"]["dz"] = json!(0.004);
    v["objective"]["n_z"] = json!(5);
    v["objective"]["n_t"] = json!(10);
    v["adam"]["iterations"] = json!(4);
    v["nadam"]["iterations"] = json!(4);
    v["pso"]["particles"] = json!(4);
    v["pso"]["iterations"] = json!(3);
    v["ga"]["population"] = json!(6);
    v["ga"]["generations"] = json!(3);
    v
}

pub fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

/// Contents of every file under `root` except wall-clock timings, keyed by
/// relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "timing.json" {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub fn differing(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>) -> Vec<PathBuf> {
    let mut keys: Vec<&PathBuf> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}

pub fn same_files(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>) {
    let diff = differing(a, b);
    assert!(diff.is_empty(), "files differ: {diff:?}");
}
