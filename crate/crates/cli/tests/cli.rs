//! Drives the `bevloop` binary end to end on a small synthetic sequence.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn bevloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevloop"))
        .args(args)
        .output()
        .expect("spawn bevloop")
}

fn ok(args: &[&str]) -> String {
    let out = bevloop(args);
    assert!(
        out.status.success(),
        "bevloop {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) {
    ok(&[
        "synth",
        "--scans",
        "80",
        "--revisits",
        "8",
        "--density",
        "15",
        "--seed",
        "4",
        "--out",
        dir.to_str().unwrap(),
    ]);
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

#[test]
fn synth_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path());
    synth(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.contains_key("poses.txt"));
    assert_eq!(ta.keys().filter(|k| k.ends_with(".bin")).count(), 80);
    assert!(ta == tb, "synthetic sequences differ");
}

#[test]
fn evaluate_with_k_one_matches_coarse_retrieval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("seq");
    synth(&data);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let index = tmp.path().join("index");
    ok(&[
        "index",
        "--preset",
        "desk",
        "--seed",
        "2",
        "--data",
        &s(&data),
        "--out",
        &s(&index),
    ]);
    let report = tmp.path().join("eval");
    let kv = ok(&[
        "evaluate",
        "--preset",
        "desk",
        "--seed",
        "2",
        "--k",
        "1",
        "--all-queries",
        "--data",
        &s(&data),
        "--index",
        &s(&index),
        "--out",
        &s(&report),
    ]);
    assert!(kv.lines().any(|l| l.starts_with("recall@1 ")));
    let coarse = ok(&[
        "retrieve",
        "--preset",
        "desk",
        "--k",
        "1",
        "--index",
        &s(&index),
    ]);

    let fine: Vec<(String, String)> = std::fs::read_to_string(report.join("matches.txt"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let mut f = l.split_whitespace();
            (f.next().unwrap().to_string(), f.next().unwrap().to_string())
        })
        .collect();
    let top1: Vec<(String, String)> = coarse
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            assert_eq!(f[1], "1");
            (f[0].to_string(), f[2].to_string())
        })
        .collect();
    assert!(!fine.is_empty());
    assert_eq!(fine, top1);
    for name in ["report.txt", "curve.dat", "overlap.txt", "manifest.txt"] {
        assert!(report.join(name).exists(), "{name} missing");
    }
}

#[test]
fn retrieve_then_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("seq");
    synth(&data);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let index = tmp.path().join("index");
    ok(&[
        "index",
        "--preset",
        "desk",
        "--data",
        &s(&data),
        "--out",
        &s(&index),
    ]);
    let cands = tmp.path().join("cands.txt");
    ok(&[
        "retrieve",
        "--preset",
        "desk",
        "--k",
        "5",
        "--index",
        &s(&index),
        "--queries",
        "60,79",
        "--out",
        &s(&cands),
    ]);
    let text = ok(&[
        "verify",
        "--preset",
        "desk",
        "--index",
        &s(&index),
        "--candidates",
        &s(&cands),
    ]);
    let scores: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(scores.len(), 10, "{text}");
    for l in &scores {
        let tau: f64 = l.split_whitespace().nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&tau));
    }
    assert_eq!(text.lines().filter(|l| l.starts_with("# match")).count(), 2);
}

#[test]
fn profile_of_empty_directory_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bevloop(&[
        "profile",
        "--preset",
        "desk",
        "--data",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no scans"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(bevloop(&["evaluate", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        bevloop(&["train", "--data", "x", "--mode", "C"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn missing_data_is_reported() {
    let out = bevloop(&[
        "index",
        "--preset",
        "desk",
        "--data",
        "/nonexistent/seq",
        "--out",
        "/tmp/never",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn gradcheck_passes() {
    let text = ok(&["gradcheck"]);
    assert!(text.lines().count() >= 4);
    assert!(
        text.lines()
            .filter(|l| !l.starts_with('#'))
            .all(|l| l.ends_with("PASS")),
        "{text}"
    );
}
