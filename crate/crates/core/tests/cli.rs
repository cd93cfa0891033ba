use std::path::Path;
use std::process::{Command, Output};

use nartlab::data::{load_corpus, Vocabulary};
use nartlab::inference::translate;
use nartlab::train::Checkpoint;

const SMALL: &str = "\
[data]
train_size = 200
valid_size = 10
test_size = 20

[teacher]
steps = 20

[student]
steps = 10
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nartlab"))
        .arg("--out")
        .arg(dir)
        .arg("--config")
        .arg(dir.join("lab.toml"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn lab() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("lab.toml"), SMALL).unwrap();
    dir
}

#[test]
fn pipeline_runs_end_to_end_and_is_repeatable() {
    let dir = lab();
    let d = dir.path();
    ok(d, &["gen-data"]);
    let train = std::fs::read(d.join("train.tsv")).unwrap();
    ok(d, &["train-teacher"]);
    let teacher = std::fs::read(d.join("teacher.ckpt")).unwrap();
    ok(d, &["distill"]);
    ok(d, &["train-student", "--ablation", "nll", "--name", "nll.ckpt"]);
    ok(d, &["train-student"]);
    assert!(d.join("student.ckpt.log").exists());
    assert_eq!(std::fs::read_to_string(d.join("teacher.log")).unwrap().lines().count(), 20);

    ok(d, &["gen-data"]);
    ok(d, &["train-teacher"]);
    assert_eq!(std::fs::read(d.join("train.tsv")).unwrap(), train);
    assert_eq!(std::fs::read(d.join("teacher.ckpt")).unwrap(), teacher);

    let report = ok(d, &["evaluate", "--student", "nll.ckpt", "--no-rescore"]);
    assert!(report.starts_with("BLEU\t"), "{report}");
    assert!(d.join("nll.ckpt.test.hyp").exists());

    ok(d, &["diagnose", "--sentences", "2"]);
    assert!(d.join("diagnostics").read_dir().unwrap().count() >= 3);
    let bench = ok(d, &["bench-latency", "--sentences", "5", "--no-rescore"]);
    assert!(bench.contains("student_steps_per_sentence\t1.0000"), "{bench}");
}

#[test]
fn translate_without_rescoring_matches_the_single_candidate_path() {
    let dir = lab();
    let d = dir.path();
    ok(d, &["gen-data"]);
    ok(d, &["train-teacher"]);
    ok(d, &["distill"]);
    ok(d, &["train-student"]);
    let (test, _) = load_corpus(&d.join("test.tsv")).unwrap();
    let input: String = test.pairs.iter().map(|p| p.source.join(" ") + "\n").collect();
    std::fs::write(d.join("src.txt"), &input).unwrap();
    let printed = ok(d, &["translate", "--no-rescore", "--input", d.join("src.txt").to_str().unwrap()]);

    let ck = Checkpoint::load(&d.join("student.ckpt")).unwrap();
    let vocab = Vocabulary::from_tokens(ck.vocab.clone());
    let student = ck.student().unwrap();
    let cfg = nartlab::inference::InferenceConfig::single(ck.length_bias.unwrap());
    let expected: String = test
        .pairs
        .iter()
        .map(|p| {
            let tr = translate(&vocab.encode(&p.source), &student, None, &cfg).unwrap();
            vocab.decode(tr.output()).join(" ") + "\n"
        })
        .collect();
    assert_eq!(printed, expected);

    let rescored = ok(d, &["translate", "--input", d.join("src.txt").to_str().unwrap()]);
    assert_eq!(rescored.lines().count(), test.len());
}

#[test]
fn identical_hypothesis_and_reference_score_100() {
    let dir = lab();
    let d = dir.path();
    std::fs::write(d.join("ref.txt"), "a b c d\nx y z\n").unwrap();
    let out = ok(
        d,
        &["evaluate", "--hypothesis", d.join("ref.txt").to_str().unwrap(), "--reference", d.join("ref.txt").to_str().unwrap()],
    );
    assert!(out.starts_with("BLEU\t100.00\n"), "{out}");
}

#[test]
fn exit_codes() {
    let dir = lab();
    let d = dir.path();
    assert_eq!(run(d, &["bogus"]).status.code(), Some(1));
    assert_eq!(run(d, &[]).status.code(), Some(1));
    assert_eq!(run(d, &["train-student", "--ablation", "hid-only"]).status.code(), Some(1));
    // Missing corpus is a runtime failure.
    assert_eq!(run(d, &["train-teacher"]).status.code(), Some(2));
    std::fs::write(d.join("lab.toml"), "[teacher]\nstepz = 3\n").unwrap();
    let bad = run(d, &["gen-data"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("stepz"));
}

#[test]
fn dumped_config_is_accepted_back() {
    let dir = lab();
    let d = dir.path();
    let dumped = ok(d, &["--dump-config", "--seed", "9"]);
    assert!(dumped.contains("train_size = 200"));
    std::fs::write(d.join("lab.toml"), &dumped).unwrap();
    assert_eq!(ok(d, &["--dump-config"]), dumped);
}
