use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_predictive-asr"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--hidden",
    "8",
    "--epochs",
    "4",
    "--ensemble",
    "2",
    "--seed",
    "3",
];

fn train_and_eval(root: &Path) -> PathBuf {
    let corpus = root.join("corpus.jsonl");
    let out = run(&[
        "gen",
        "--users",
        "12",
        "--days",
        "6",
        "--seed",
        "3",
        "--out",
        s(&corpus),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let models = root.join("models");
    let eval = root.join("eval");
    let mut args = vec!["train", "--corpus", s(&corpus), "--out", s(&models)];
    args.extend_from_slice(SMALL);
    let out = run(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut args = vec![
        "eval",
        "--corpus",
        s(&corpus),
        "--models",
        s(&models),
        "--out",
        s(&eval),
    ];
    args.extend_from_slice(SMALL);
    let out = run(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    eval
}

#[test]
fn end_to_end_matches_golden_csv() {
    let dir = tempfile::tempdir().unwrap();
    let eval = train_and_eval(dir.path());
    for f in [
        "config.json",
        "sweep.csv",
        "oracle.csv",
        "sweep.svg",
        "outcomes.jsonl",
    ] {
        assert!(eval.join(f).exists(), "missing {f}");
    }
    let models = dir.path().join("models");
    for f in [
        "config.json",
        "lm.json",
        "confidence.json",
        "training_summary.json",
    ] {
        assert!(models.join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(eval.join("sweep.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "threshold,attempts,successes,failures,success_rate,failure_rate,mean_gain_success_s,mean_gain_all_s,mean_extra_words,mean_upl_s"
    );
    let inf_row = csv.lines().last().unwrap();
    assert!(
        inf_row.starts_with("inf,0,0,0,0.000000,0.000000,"),
        "{inf_row}"
    );
    if std::env::var_os("PASR_BLESS").is_some() {
        std::fs::copy(eval.join("sweep.csv"), golden("sweep.csv")).unwrap();
        std::fs::copy(eval.join("oracle.csv"), golden("oracle.csv")).unwrap();
    }
    assert_eq!(csv, std::fs::read_to_string(golden("sweep.csv")).unwrap());
    assert_eq!(
        std::fs::read_to_string(eval.join("oracle.csv")).unwrap(),
        std::fs::read_to_string(golden("oracle.csv")).unwrap()
    );

    // The echoed config reproduces the run.
    let again = dir.path().join("again");
    let out = run(&[
        "eval",
        "--config",
        s(&eval.join("config.json")),
        "--models",
        s(&models),
        "--out",
        s(&again),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        csv,
        std::fs::read_to_string(again.join("sweep.csv")).unwrap()
    );

    let plot = dir.path().join("both.svg");
    let out = run(&[
        "sweep-plot",
        "--input",
        s(&eval),
        "--input",
        s(&again),
        "--out",
        s(&plot),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(std::fs::read_to_string(&plot).unwrap().starts_with("<svg"));
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--corpus",
        "/nonexistent/corpus.jsonl",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/corpus.jsonl"));
    let out = run(&["train", "--out", s(dir.path()), "--discount", "1.5"]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "not json\n").unwrap();
    let out = run(&["train", "--corpus", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[
        "gen",
        "--users",
        "0",
        "--out",
        s(&dir.path().join("x.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
