//! Helpers shared by the CLI test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn robex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robex"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("robex binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// A configuration small enough to run every command in a few seconds.
pub fn tiny_config(mode: &str) -> serde_json::Value {
    let attack = (mode == "at").then(|| {
        serde_json::json!({ "norm": "l2", "epsilon": 0.3, "num_steps": 3, "random_start": true })
    });
    serde_json::json!({
        "seed": 5,
        "jobs": 2,
        "folds": 3,
        "synth": { "videos_per_class": 3, "frames_per_video": 2, "height": 8, "width": 8 },
        "model": { "architecture": "small_cnn", "conv1_channels": 2, "conv2_channels": 3, "hidden_units": 6 },
        "train": {
            "mode": mode,
            "epochs": 2,
            "batch_size": 4,
            "attack": attack,
            "eval_attack_steps": 3
        },
        "epsilons": [0.0, 0.3],
        "eval_attack": { "norm": "l2", "epsilon": 0.3, "num_steps": 3 },
        "explain": {
            "epsilon": 0.3,
            "attack": { "norm": "l2", "epsilon": 0.3, "num_steps": 3 },
            "num_samples": 2
        }
    })
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> PathBuf {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_path_buf()
}

/// Every file under `root`, keyed by relative path.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Runs each command, then reruns it from its manifest into a fresh
/// directory. Returns the relative paths whose bytes differ.
pub fn rerun_mismatches(work: &Path) -> Vec<String> {
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let cfg = write_json(&work.join("at.json"), &tiny_config("at"));
    let mut mismatches = Vec::new();
    let train = work.join("train");
    let mut check = |name: &str, extra: Vec<String>| {
        let first = work.join(name);
        let second = work.join(format!("{name}_rerun"));
        let mut a = vec![
            name.to_owned(),
            "--config".into(),
            s(&cfg),
            "--out".into(),
            s(&first),
        ];
        a.extend(extra);
        let o = robex(&a.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(
            code(&o),
            0,
            "{name}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        let manifest = s(&first.join("manifest.json"));
        let o = robex(&[name, "--config", &manifest, "--out", &s(&second)]);
        assert_eq!(
            code(&o),
            0,
            "{name} rerun: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        let (x, y) = (tree(&first), tree(&second));
        if x.keys().ne(y.keys()) {
            mismatches.push(format!("{name}: file sets differ"));
        }
        for (k, v) in &x {
            if y.get(k) != Some(v) {
                mismatches.push(format!("{name}/{k}"));
            }
        }
    };
    check("synth", Vec::new());
    check("train", Vec::new());
    let run = vec!["--run".to_owned(), s(&train)];
    check("curve", run.clone());
    check("report", run.clone());
    check("explain", run);
    mismatches
}
