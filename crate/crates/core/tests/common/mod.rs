#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A short-horizon experiment that trains in well under a second.
pub const TINY_CONFIG: &str = r#"
seed = 7

[sim]
horizon = 0.1

[net]
hidden = [8]
residual_blocks = 1

[algo.policy_iteration]
iterations = 2
paths_per_iteration = 2
inner_epochs = 3
eval_paths = 4

[algo.actor_critic]
episodes = 6
eval_every = 3
eval_paths = 3
"#;

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

pub fn optmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optmm")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

/// Every regular file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap());
        }
    }
    out
}
