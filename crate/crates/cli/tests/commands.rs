use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gauss_align::dataio;
use gauss_align::synthgen::score_map;
use gauss_align::synthgen::{generate, VarianceMode};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gauss-align"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &[&str] = &[
    "--batch", "50", "--iters", "64", "--epochs", "3", "--top-k", "200", "--convex-sample", "200",
    "--sinkhorn-max-iter", "200", "--seed", "3",
];

fn gen_small(dir: &Path, mode: &str) {
    let out = run(dir, &["gen", "-n", "200", "-d", "5", "--sigma", "0.01", "--mode", mode, "--seed", "11"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn align_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "align", "--src-mean", "src.mean.vec", "--src-var", "src.var.vec", "--tgt-mean", "tgt.mean.vec", "--tgt-var",
        "tgt.var.vec",
    ];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    args
}

#[test]
fn gen_writes_all_files_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = run(dir.path(), &["gen", "-n", "50", "-d", "4", "--sigma", "0.01", "--mode", "clean", "--seed", "7"]);
        assert_eq!(code(&out), 0);
    }
    for f in ["src.mean.vec", "src.var.vec", "tgt.mean.vec", "tgt.var.vec", "truth.txt", "lexicon.txt"] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert!(!x.is_empty(), "{f}");
        assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let (map, matching) = dataio::load_truth(a.path().join("truth.txt")).unwrap();
    let inst = generate(50, 4, 0.01, VarianceMode::Clean, 7).unwrap();
    assert_eq!(map, inst.true_map);
    assert_eq!(matching, inst.true_matching);
}

#[test]
fn gen_rejects_single_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen", "-n", "1"]);
    assert_eq!(code(&out), 2);
    assert!(!out.stderr.is_empty());
}

#[test]
fn align_writes_map_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), "informative-variance");
    let out = run(dir.path(), &align_args(&["--out", "R.txt"]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let map = dataio::load_map(dir.path().join("R.txt")).unwrap();
    assert_eq!(map.dim(), 5);
    let manifest = fs::read_to_string(dir.path().join("R.txt.manifest")).unwrap();
    assert!(manifest.contains("means_only=false"));
    assert!(manifest.contains("config.initial_batch=50"));
    assert!(manifest.contains("input.tgt_var=tgt.var.vec"));
    assert!(!manifest.contains("wall_time"));
}

#[test]
fn means_only_run_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), "clean");
    let mut args = vec!["align", "--means-only", "--src-mean", "src.mean.vec", "--tgt-mean", "tgt.mean.vec"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out", "R.txt", "--manifest", "run.manifest", "--record-time"]);
    let out = run(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(dir.path().join("run.manifest")).unwrap();
    assert!(manifest.contains("means_only=true"));
    assert!(!manifest.contains("input.src_var"));
    assert!(manifest.contains("wall_time_seconds="));
}

#[test]
fn missing_target_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["align", "--src-mean", "s.vec", "--out", "R.txt"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--tgt-mean"));
}

#[test]
fn variances_required_unless_means_only() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), "clean");
    let out = run(dir.path(), &["align", "--src-mean", "src.mean.vec", "--tgt-mean", "tgt.mean.vec", "--out", "R.txt"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn malformed_embedding_is_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), "clean");
    fs::write(dir.path().join("bad.vec"), "2 5\na 1 2 3 4 5\nb 1 2\n").unwrap();
    let out = run(
        dir.path(),
        &["align", "--means-only", "--src-mean", "bad.vec", "--tgt-mean", "tgt.mean.vec", "--out", "R.txt"],
    );
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.vec:3"));
}

#[test]
fn oversized_batch_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), "clean");
    let out = run(dir.path(), &align_args(&["--batch", "500", "--out", "R.txt"]));
    assert_eq!(code(&out), 2);
}

#[test]
fn replay_from_manifest_reproduces_map() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), "informative-variance");
    assert_eq!(code(&run(dir.path(), &align_args(&["--out", "R.txt"]))), 0);
    let out = run(dir.path(), &["align", "--from-manifest", "R.txt.manifest", "--out", "R2.txt"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(dir.path().join("R.txt")).unwrap(), fs::read(dir.path().join("R2.txt")).unwrap());
    let strip = |s: String| s.lines().filter(|l| !l.starts_with("output.")).collect::<Vec<_>>().join("\n");
    assert_eq!(
        strip(fs::read_to_string(dir.path().join("R.txt.manifest")).unwrap()),
        strip(fs::read_to_string(dir.path().join("R2.txt.manifest")).unwrap())
    );
}

#[test]
fn eval_identity_on_identical_files_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), "clean");
    let eye = (0..5)
        .map(|i| (0..5).map(|j| if i == j { "1" } else { "0" }).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(dir.path().join("I.txt"), eye).unwrap();
    let lex: String = (0..200).map(|i| format!("s{i} s{i}\n")).collect();
    fs::write(dir.path().join("self.txt"), lex).unwrap();
    let out = run(
        dir.path(),
        &["eval", "--map", "I.txt", "--src-mean", "src.mean.vec", "--tgt-mean", "src.mean.vec", "--lexicon", "self.txt"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("p_at_1=1 p_at_5=1 evaluated=200 skipped_oov=0"), "{}", stdout(&out));
}

#[test]
fn eval_with_fully_oov_lexicon_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), "clean");
    fs::write(dir.path().join("lex.txt"), "foo bar\nbaz qux\n").unwrap();
    let out = run(
        dir.path(),
        &["eval", "--map", "truth.txt", "--src-mean", "src.mean.vec", "--tgt-mean", "tgt.mean.vec", "--lexicon", "lex.txt"],
    );
    // truth.txt carries extra index lines, so it is not a square map file.
    assert_eq!(code(&out), 3);
    let truth = fs::read_to_string(dir.path().join("truth.txt")).unwrap();
    let map: String = truth.lines().take(5).map(|l| format!("{l}\n")).collect();
    fs::write(dir.path().join("Q.txt"), map).unwrap();
    let out = run(
        dir.path(),
        &["eval", "--map", "Q.txt", "--src-mean", "src.mean.vec", "--tgt-mean", "tgt.mean.vec", "--lexicon", "lex.txt"],
    );
    assert_eq!(code(&out), 5);
}

#[test]
fn eval_agrees_with_ground_truth_scoring() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), "clean");
    assert_eq!(code(&run(dir.path(), &align_args(&["--out", "R.txt"]))), 0);
    let out = run(
        dir.path(),
        &["eval", "--map", "R.txt", "--src-mean", "src.mean.vec", "--tgt-mean", "tgt.mean.vec", "--lexicon", "lexicon.txt"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let record = stdout(&out);
    let p1: f64 = record
        .split_whitespace()
        .find_map(|t| t.strip_prefix("p_at_1="))
        .expect("record line")
        .parse()
        .unwrap();
    let inst = generate(200, 5, 0.01, VarianceMode::Clean, 11).unwrap();
    let map = dataio::load_map(dir.path().join("R.txt")).unwrap();
    let truth = score_map(&map, &inst).unwrap().match_accuracy;
    assert!((p1 - truth).abs() <= 0.01, "eval {p1} vs truth {truth}");
}

#[test]
fn thread_variable_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gauss-align"))
        .current_dir(dir.path())
        .env("GAUSS_ALIGN_THREADS", "zero")
        .args(["gen", "-n", "10", "-d", "2"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_gauss-align"))
        .current_dir(dir.path())
        .env("GAUSS_ALIGN_THREADS", "2")
        .args(["gen", "-n", "10", "-d", "2"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
}
