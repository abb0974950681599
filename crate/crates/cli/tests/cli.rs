use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_rmisel");

const SPEC: &str = r#"
seed = 5
[[mix]]
mode = "clean"
rate = 0.5
[[mix]]
mode = "keyword_echo"
rate = 0.25
[[mix]]
mode = "misalignment"
rate = 0.25
"#;

const STRONG: &str = r#"
model_id = "ngram-strong"
kind = "builtin_ngram"
"#;

const WEAK: &str = r#"
model_id = "ngram-weak"
kind = "builtin_ngram"
ngram = { smoothing = 1.0, cache_weight = 0.1, cache_bigram_weight = 0.1 }
"#;

fn rmisel(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn rmisel")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = rmisel(dir, args);
    assert!(
        out.status.success(),
        "rmisel {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(dir: &Path, n: usize) {
    std::fs::write(dir.join("spec.toml"), SPEC).unwrap();
    std::fs::write(dir.join("strong.toml"), STRONG).unwrap();
    std::fs::write(dir.join("weak.toml"), WEAK).unwrap();
    ok(dir, &["generate-defects", "--spec", "spec.toml", "--n", &n.to_string(), "--out", "corpus.jsonl"]);
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    let p = p.as_ref();
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn run_matches_chained_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d, 120);
    let config = format!(
        r#"
corpus = "corpus.jsonl"
output_dir = "out"
[strong]
{STRONG}
[weak]
{WEAK}
[[selection]]
name = "diff"
strategy = "diff-high"
[[selection]]
name = "top"
strategy = "rmi-top-fraction"
fraction = 0.2
[[selection]]
name = "rand"
strategy = "random"
fraction = 0.1
seed = 7
"#
    );
    std::fs::write(d.join("run.toml"), config).unwrap();
    ok(d, &["run", "--config", "run.toml"]);

    ok(d, &["score", "--corpus", "corpus.jsonl", "--backend", "strong.toml", "--out", "s.jsonl"]);
    ok(d, &["score", "--corpus", "corpus.jsonl", "--backend", "weak.toml", "--out", "w.jsonl"]);
    ok(d, &["rank", "--scores", "s.jsonl", "--partner", "w.jsonl", "--out", "rs.jsonl"]);
    ok(d, &["rank", "--scores", "w.jsonl", "--partner", "s.jsonl", "--out", "rw.jsonl"]);
    ok(d, &["select", "--strategy", "diff-high", "--ranks", "rs.jsonl", "--weak-ranks", "rw.jsonl", "--out", "diff.txt"]);
    ok(d, &["select", "--strategy", "rmi-top-fraction", "--fraction", "0.2", "--ranks", "rs.jsonl", "--weak-ranks", "rw.jsonl", "--out", "top.txt"]);
    ok(d, &["select", "--strategy", "random", "--fraction", "0.1", "--seed", "7", "--ranks", "rs.jsonl", "--out", "rand.txt"]);
    ok(d, &[
        "analyze", "--scores", "s.jsonl", "--weak-scores", "w.jsonl",
        "--selection", "diff=diff.txt", "--selection", "top=top.txt", "--selection", "rand=rand.txt",
        "--out-dir", "chain",
    ]);

    let out = d.join("out");
    let pairs = [
        ("scores.strong.jsonl", "s.jsonl"),
        ("scores.weak.jsonl", "w.jsonl"),
        ("ranks.strong.jsonl", "rs.jsonl"),
        ("ranks.strong.manifest.json", "rs.manifest.json"),
        ("ranks.weak.jsonl", "rw.jsonl"),
        ("ranks.weak.manifest.json", "rw.manifest.json"),
        ("selection.diff.txt", "diff.txt"),
        ("selection.diff.manifest.json", "diff.manifest.json"),
        ("selection.rand.txt", "rand.txt"),
        ("selection.rand.manifest.json", "rand.manifest.json"),
        ("report.json", "chain/report.json"),
        ("rmi_vs_neg_log_ifd.csv", "chain/rmi_vs_neg_log_ifd.csv"),
        ("rmi_vs_ln_ppl_q.csv", "chain/rmi_vs_ln_ppl_q.csv"),
    ];
    for (run_file, chain_file) in pairs {
        assert!(read(out.join(run_file)) == read(d.join(chain_file)), "{run_file} differs from {chain_file}");
    }
    // The run passes pairs only to strategies that use them, so the ids agree
    // but the top-fraction manifest digests fewer inputs.
    assert_eq!(read(out.join("selection.top.txt")), read(d.join("top.txt")));
}

#[test]
fn random_selection_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d, 80);
    ok(d, &["score", "--corpus", "corpus.jsonl", "--backend", "strong.toml", "--out", "s.jsonl"]);
    ok(d, &["rank", "--scores", "s.jsonl", "--out", "r.jsonl"]);
    for out in ["a.txt", "b.txt"] {
        ok(d, &["select", "--strategy", "random", "--fraction", "0.25", "--seed", "7", "--ranks", "r.jsonl", "--out", out]);
    }
    assert_eq!(read(d.join("a.txt")), read(d.join("b.txt")));
    assert_eq!(read(d.join("a.manifest.json")), read(d.join("b.manifest.json")));
    let ids = String::from_utf8(read(d.join("a.txt"))).unwrap();
    assert_eq!(ids.lines().count(), 20);
}

#[test]
fn defaults_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d, 60);
    ok(d, &["score", "--corpus", "corpus.jsonl", "--backend", "strong.toml", "--out", "s.jsonl"]);
    ok(d, &["score", "--corpus", "corpus.jsonl", "--backend", "weak.toml", "--out", "w.jsonl"]);
    ok(d, &["rank", "--scores", "s.jsonl", "--out", "rs.jsonl"]);
    ok(d, &["rank", "--scores", "w.jsonl", "--out", "rw.jsonl"]);
    let rm: serde_json::Value = serde_json::from_slice(&read(d.join("rs.manifest.json"))).unwrap();
    assert_eq!(rm["k"], 10);

    ok(d, &["select", "--strategy", "diff-high", "--ranks", "rs.jsonl", "--weak-ranks", "rw.jsonl", "--out", "sel.txt"]);
    let sm: serde_json::Value = serde_json::from_slice(&read(d.join("sel.manifest.json"))).unwrap();
    assert_eq!(sm["spec"]["tau"], 0.1);
    assert_eq!(sm["spec"]["k"], 10);
    assert_eq!(sm["spec"]["strategy"], "diff-high");
}

#[test]
fn select_inherits_k_from_rank_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d, 60);
    ok(d, &["score", "--corpus", "corpus.jsonl", "--backend", "strong.toml", "--out", "s.jsonl"]);
    ok(d, &["rank", "--scores", "s.jsonl", "--k", "4", "--out", "r.jsonl"]);
    ok(d, &["select", "--strategy", "rmi-top-fraction", "--fraction", "0.25", "--ranks", "r.jsonl", "--out", "sel.txt"]);
    let sm: serde_json::Value = serde_json::from_slice(&read(d.join("sel.manifest.json"))).unwrap();
    assert_eq!(sm["spec"]["k"], 4);
    assert_eq!(sm["counts_per_bin"].as_array().unwrap().len(), 4);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rmisel(tmp.path(), &["rank", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = rmisel(tmp.path(), &["select", "--strategy", "best", "--ranks", "r.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_errors_exit_1_with_json() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = rmisel(d, &["rank", "--scores", "missing.jsonl", "--out", "r.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
    assert!(err["error"]["message"].as_str().unwrap().contains("missing.jsonl"));

    setup(d, 40);
    ok(d, &["score", "--corpus", "corpus.jsonl", "--backend", "strong.toml", "--out", "s.jsonl"]);
    ok(d, &["rank", "--scores", "s.jsonl", "--out", "r.jsonl"]);
    // diff-high without a weak model
    let out = rmisel(d, &["select", "--strategy", "diff-high", "--ranks", "r.jsonl", "--out", "x.txt"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"]["kind"].is_string());
    assert!(!d.join("x.txt").exists());
}

#[test]
fn warm_cache_skips_backend() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d, 30);
    let args = ["score", "--corpus", "corpus.jsonl", "--backend", "strong.toml", "--cache", "c.jsonl", "--out"];
    let first = ok(d, &[&args[..], &["a.jsonl"]].concat());
    let second = ok(d, &[&args[..], &["b.jsonl"]].concat());
    assert!(first.contains("120 backend calls"), "{first}");
    assert!(second.contains("0 backend calls"), "{second}");
    assert_eq!(read(d.join("a.jsonl")), read(d.join("b.jsonl")));
    let compacted = ok(d, &["compact-cache", "--cache", "c.jsonl"]);
    assert!(compacted.contains("30 entries"), "{compacted}");
}
