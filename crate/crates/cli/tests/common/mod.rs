#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// The binary, run from `cwd` with the fixture directory as data directory.
pub fn cbqa(cwd: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cbqa"));
    cmd.current_dir(cwd).env("CBQA_DATA_DIR", fixtures());
    cmd
}

pub fn run(cwd: &Path, args: &[&str]) -> Output {
    cbqa(cwd).args(args).output().expect("spawn cbqa")
}

/// Run and require exit 0, returning stdout.
pub fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = run(cwd, args);
    assert!(
        out.status.success(),
        "cbqa {} failed ({}): {}",
        args.join(" "),
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

pub fn try_ok(cwd: &Path, args: &[&str]) -> Result<String, String> {
    let out = run(cwd, args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "cbqa {} exited {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

/// Every stage from vocabulary to audit export, with relative paths only.
pub fn pipeline(cwd: &Path, threads: usize) -> Result<(), String> {
    let threads = threads.to_string();
    let steps: &[&[&str]] = &[
        &["build-vocab", "--corpus", "corpus.jsonl", "--qa", "nq=nq.jsonl", "--qa", "wq=wq.jsonl", "--size", "400", "--out", "vocab.txt"],
        &["corrupt", "--corpus", "corpus.jsonl", "--vocab", "vocab.txt", "--seed", "7", "--out", "sc.jsonl"],
        &["mine-ssm", "--corpus", "corpus.jsonl", "--vocab", "vocab.txt", "--seed", "7", "--out", "ssm.jsonl"],
        &[
            "pretrain", "--corpus", "corpus.jsonl", "--vocab", "vocab.txt", "--objective", "ssm", "--steps", "4",
            "--checkpoint-every", "2", "--batch-tokens", "512", "--seed", "7", "--out-dir", "pt",
        ],
        &[
            "finetune", "--task", "nq=nq.jsonl", "--task", "wq=wq.jsonl", "--vocab", "vocab.txt", "--init",
            "pt/ckpt-00000004.ckpt", "--steps", "4", "--checkpoint-every", "2", "--batch-tokens", "600",
            "--decode-max-len", "6", "--seed", "7", "--out-dir", "ft",
        ],
        &[
            "decode", "--checkpoint", "ft/best.ckpt", "--vocab", "vocab.txt", "--dataset", "nq.jsonl", "--task", "nq",
            "--max-len", "6", "--threads", &threads, "--out", "preds.jsonl",
        ],
        &["evaluate", "--mode", "em", "--predictions", "preds.jsonl", "--dataset", "nq.jsonl"],
        &[
            "audit", "sample", "--report", "preds.report.json", "--dataset", "nq.jsonl", "--sample-size", "5",
            "--seed", "7", "--journal", "audit.jsonl",
        ],
        &["audit", "export", "--journal", "audit.jsonl", "--out", "audit.tsv"],
    ];
    for args in steps {
        try_ok(cwd, args)?;
    }
    Ok(())
}

/// Relative path to contents for every file under `root`.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("read dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("under root").display().to_string();
                out.insert(rel, std::fs::read(&path).expect("read file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Names of files whose bytes differ (or exist on one side only).
pub fn differing(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut names: Vec<&String> = a.keys().chain(b.keys()).collect();
    names.sort();
    names.dedup();
    names.into_iter().filter(|n| a.get(*n) != b.get(*n)).cloned().collect()
}

pub fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
