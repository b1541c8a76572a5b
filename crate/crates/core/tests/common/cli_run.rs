//! Drives the `phrasetag` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub const BIN: &str = env!("CARGO_BIN_EXE_phrasetag");

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("UCP_THREADS", "1")
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

pub fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Runs every subcommand once in `dir` on a small synthetic corpus.
pub fn pipeline(dir: &Path, n_docs: &str, extra_train: &[&str]) {
    ok(
        dir,
        &[
            "gen-synth",
            "--out",
            "train",
            "--seed",
            "1",
            "--n-docs",
            n_docs,
        ],
    );
    ok(
        dir,
        &[
            "gen-synth",
            "--out",
            "test",
            "--seed",
            "2",
            "--n-docs",
            "50",
        ],
    );
    ok(
        dir,
        &[
            "mine-labels",
            "--corpus",
            "train/corpus.jsonl",
            "--out",
            "labels.jsonl",
            "--report",
            "mine.json",
        ],
    );
    let first = fs::read_to_string(dir.join("train/keyphrases.jsonl")).unwrap();
    let first: Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    let gaz: String = first["keyphrases"]
        .as_array()
        .unwrap()
        .iter()
        .map(|k| format!("{}\n", k.as_str().unwrap()))
        .collect();
    fs::write(dir.join("gaz.txt"), gaz).unwrap();
    ok(
        dir,
        &[
            "match-gazetteer",
            "--corpus",
            "train/corpus.jsonl",
            "--gazetteer",
            "gaz.txt",
            "--out",
            "gaz.jsonl",
        ],
    );
    for split in ["train", "test"] {
        ok(
            dir,
            &[
                "extract-features",
                "--corpus",
                &format!("{split}/corpus.jsonl"),
                "--provider",
                "synthetic-planted",
                "--planted",
                &format!("{split}/planted.json"),
                "--gold",
                &format!("{split}/gold.jsonl"),
                "--out",
                &format!("{split}.ucat"),
            ],
        );
    }
    let mut train = vec![
        "train",
        "--corpus",
        "train/corpus.jsonl",
        "--labels",
        "labels.jsonl",
        "--archive",
        "train.ucat",
        "--checkpoint",
        "model.ucpm",
        "--report",
        "train.jsonl",
    ];
    train.extend_from_slice(extra_train);
    ok(dir, &train);
    ok(
        dir,
        &[
            "tag",
            "--corpus",
            "test/corpus.jsonl",
            "--archive",
            "test.ucat",
            "--checkpoint",
            "model.ucpm",
            "--decode",
            "greedy",
            "--out",
            "preds.jsonl",
            "--report",
            "tag_summary.json",
        ],
    );
    ok(
        dir,
        &[
            "eval-tagging",
            "--predictions",
            "preds.jsonl",
            "--gold",
            "test/gold.jsonl",
            "--report",
            "tagging.json",
        ],
    );
    ok(
        dir,
        &[
            "eval-kp",
            "--corpus",
            "test/corpus.jsonl",
            "--predictions",
            "preds.jsonl",
            "--gold",
            "test/keyphrases.jsonl",
            "--report",
            "kp.json",
        ],
    );
    ok(
        dir,
        &[
            "rank",
            "--corpus",
            "test/corpus.jsonl",
            "--predictions",
            "preds.jsonl",
            "--out",
            "ranked.jsonl",
        ],
    );
    ok(
        dir,
        &[
            "sample-annotation",
            "--ranked",
            "ranked.jsonl",
            "--out",
            "sample.tsv",
            "--size",
            "10",
        ],
    );
    let judged: String = fs::read_to_string(dir.join("sample.tsv"))
        .unwrap()
        .lines()
        .enumerate()
        .map(|(i, l)| format!("{l}{}\n", i % 2))
        .collect();
    fs::write(dir.join("judged.tsv"), judged).unwrap();
    ok(
        dir,
        &[
            "rank",
            "--corpus",
            "test/corpus.jsonl",
            "--predictions",
            "preds.jsonl",
            "--out",
            "ranked_top.jsonl",
            "--top-k",
            "100",
            "--annotations",
            "judged.tsv",
            "--report",
            "pak.json",
        ],
    );
}

pub fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

/// Runs mine-labels and match-gazetteer on the heat-island fixture and
/// compares with the checked-in expectations.
pub fn heat_island_labels(dir: &Path) -> Result<(), String> {
    let fx = fixture("heat_island");
    let corpus = fx.join("corpus.jsonl");
    let corpus = corpus.to_str().unwrap();
    let gazetteer = fx.join("gazetteer.txt");
    ok(
        dir,
        &[
            "mine-labels",
            "--corpus",
            corpus,
            "--out",
            "core.jsonl",
            "--positives-only",
        ],
    );
    ok(
        dir,
        &[
            "match-gazetteer",
            "--corpus",
            corpus,
            "--gazetteer",
            gazetteer.to_str().unwrap(),
            "--out",
            "gaz.jsonl",
            "--positives-only",
        ],
    );
    for (got, want) in [
        ("core.jsonl", "expected_core.jsonl"),
        ("gaz.jsonl", "expected_gazetteer.jsonl"),
    ] {
        let got = fs::read_to_string(dir.join(got)).unwrap();
        if got != fs::read_to_string(fx.join(want)).unwrap() {
            return Err(format!("{want} differs:\n{got}"));
        }
    }
    Ok(())
}

/// Runs the whole pipeline twice; returns the number of files compared.
pub fn pipeline_determinism() -> Result<usize, String> {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let quick = ["--max-epochs", "2"];
    pipeline(a.path(), "60", &quick);
    pipeline(b.path(), "60", &quick);
    let (fa, fb) = (files(a.path()), files(b.path()));
    if fa.iter().map(|f| &f.0).ne(fb.iter().map(|f| &f.0)) {
        return Err("different file sets".into());
    }
    for ((name, x), (_, y)) in fa.iter().zip(&fb) {
        if x != y {
            return Err(format!("{} differs between runs", name.display()));
        }
        if x.is_empty() {
            return Err(format!("{} is empty", name.display()));
        }
    }
    Ok(fa.len())
}
