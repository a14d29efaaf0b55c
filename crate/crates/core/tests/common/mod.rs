#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

/// A run configuration small enough to push every stage through in
/// seconds.
pub fn tiny_config() -> serde_json::Value {
    json!({
        "seed": 3,
        "data": {
            "topics": 4,
            "topic_words": 10,
            "seen_topic_words": 5,
            "ambiguous_words": 3,
            "attributes": 4,
            "attributes_per_image": 2,
            "regions": 6,
            "image_dim": 12,
            "train_pairs": 60,
            "heldout_pairs": 20,
            "tag_train": 30,
            "tag_test": 12,
            "nli_train": 20,
            "nli_test": 8,
            "translation_train": 20,
            "translation_test": 8
        },
        "embedding": { "text_dim": 8, "shared_dim": 8, "batch_size": 8, "epochs": 2 },
        "encoder": { "dim": 8, "heads": 2, "fusion_heads": 2, "layers": 1, "ff_dim": 16, "max_len": 16 },
        "task": { "epochs": 2, "batch_size": 8, "max_decode_len": 8 }
    })
}

pub fn write_config(dir: &Path, value: &serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

pub fn visaware(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_visaware"))
        .args(args)
        .output()
        .expect("spawn visaware")
}

/// Runs one subcommand against `config` and `out`, panicking on failure.
pub fn stage(config: &Path, out: &Path, args: &[&str]) -> String {
    let mut all = vec![
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    all.extend_from_slice(args);
    let o = visaware(&all);
    assert!(
        o.status.success(),
        "visaware {all:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}
