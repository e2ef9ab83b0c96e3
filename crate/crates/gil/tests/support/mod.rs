#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gil_core::config::RunConfig;

/// Small enough that a full run takes well under a second.
pub const TINY: &str = r#"{
  "data": {"pretrain_classes": 6, "finetune_classes": 6, "unseen_classes": 2, "feature_dim": 8, "semantic_dim": 8,
           "samples_min": 6, "samples_max": 8},
  "gan": {"hidden": 16, "noise_dim": 4, "steps": 30, "batch_size": 16},
  "cvae": {"hidden": 16, "latent": 4, "epochs": 30, "finetune_epochs": 5},
  "pipeline": {"head_hidden": 16, "pretrain_epochs": 3, "epochs": 3, "adapt_epochs": 3, "schedule_percent": 50,
               "stage_curve": true},
  "seeds": [0, 1]
}"#;

pub fn tiny_config() -> RunConfig {
    let preset = serde_json::to_value(RunConfig::default()).unwrap();
    let mut v = preset;
    let over: serde_json::Value = serde_json::from_str(TINY).unwrap();
    for (k, sub) in over.as_object().unwrap() {
        match sub {
            serde_json::Value::Object(m) => {
                for (kk, vv) in m {
                    v[k][kk] = vv.clone();
                }
            }
            other => v[k] = other.clone(),
        }
    }
    serde_json::from_value(v).unwrap()
}

pub fn write_tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

pub fn gil(args: &[&str]) -> Output {
    gil_env(args, &[])
}

pub fn gil_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gil"));
    c.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("gil binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every regular file under `dir`, relative path and contents, sorted.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
