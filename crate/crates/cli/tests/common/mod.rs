#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small enough that the whole pipeline runs in a few seconds.
pub const SMALL_CONFIG: &str = r#"
[synth]
n_sequences = 6
duration_s = 20.0

[pipeline.smoothing]
iters = 5

[rvq]
layers = 3
codebook_size = 32
latent_dim = 16
hidden = 32
steps = 20
batch_size = 4

[mct]
d_model = 32
layers = 1
heads = 4
max_positions = 64
steps = 20
batch_size = 4
inference_steps = 4
"#;

pub fn choreo(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_choreo"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn choreo")
}

pub fn choreo_ok(cwd: &Path, args: &[&str]) -> Output {
    let out = choreo(cwd, args);
    assert!(
        out.status.success(),
        "choreo {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Every verb, with relative paths under `cwd`, writing to `run/<step>`.
pub const PIPELINE: &[&[&str]] = &[
    &["--out", "run/data", "synth-data"],
    &["--out", "run/clips", "preprocess", "--manifest", "run/data"],
    &["--out", "run/rvq", "train-rvq", "--manifest", "run/clips"],
    &["--out", "run/mct", "train-mct", "--manifest", "run/clips", "--rvq", "run/rvq/rvq.ckpt"],
    &["--out", "run/gen", "generate", "--rvq", "run/rvq/rvq.ckpt", "--mct", "run/mct/mct.ckpt", "--manifest", "run/clips"],
    &["--out", "run/eval", "evaluate", "--generated", "run/gen", "--reference", "run/clips"],
    &[
        "--out", "run/one", "generate", "--rvq", "run/rvq/rvq.ckpt", "--mct", "run/mct/mct.ckpt",
        "--music", "run/data/syn0000.music.bin", "--text", "run/data/syn0000.text.bin",
    ],
    &["--out", "run/png", "render", "--motion", "run/one/motion.bin", "--every-n", "50", "--size", "96"],
    &["--out", "run/ablate", "ablate", "--manifest", "run/clips", "--rvq", "run/rvq/rvq.ckpt", "--seeds", "0"],
];

pub fn run_pipeline(cwd: &Path, seed: u64) {
    std::fs::write(cwd.join("small.toml"), SMALL_CONFIG).unwrap();
    let seed = seed.to_string();
    for step in PIPELINE {
        let mut args = vec!["--config", "small.toml", "--seed", &seed];
        args.extend_from_slice(step);
        choreo_ok(cwd, &args);
    }
}

/// Relative path to contents for every file below `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
