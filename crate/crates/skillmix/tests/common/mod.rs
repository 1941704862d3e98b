#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small enough that a full gen-data, pretrain, adapt round runs in seconds.
pub const TINY_TOML: &str = r#"
seed = 5

[model]
d_model = 16
n_heads = 2
d_ff = 32
rep_layers = 1
router_hidden = 16
gate_hidden = 16
adapter_bottleneck = 4

[world]
entities = 30
relations = 4
types = 3
triples = 80

[data]
per_skill = 24
held_out_per_skill = 6
downstream_train = 40
downstream_test = 12
few_shot = 8

[pretrain]
epochs = 1
batch_size = 16

[adapt]
epochs = 1
batch_size = 16
"#;

pub fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY_TOML).unwrap();
    p
}

pub fn skillmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skillmix")).args(args).output().unwrap()
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = skillmix(args);
    assert!(
        out.status.success(),
        "skillmix {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path → contents for every file under `dir`.
pub fn dir_contents(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
