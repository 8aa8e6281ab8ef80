use std::path::Path;
use std::process::{Command, Output};

use confroute::dataset::{load_jsonl, load_predictions};
use confroute::SplitTag;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_confroute"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

/// synth -> split -> base model -> predictions -> annotation -> fine-tune ->
/// predictions -> scores and evaluations, all inside `dir`.
fn pipeline(dir: &Path, seed: &str) {
    run(
        dir,
        &["synth", "--n", "80", "--seed", seed, "--out", "all.jsonl"],
    );
    run(
        dir,
        &[
            "ingest",
            "--input",
            "all.jsonl",
            "--fractions",
            "0.5,0.25,0.25",
            "--out-dir",
            "split",
            "--seed",
            seed,
        ],
    );
    let train = ["train", "--dim", "8", "--epochs", "2", "--seed", seed];
    run(
        dir,
        &[
            &train[..],
            &[
                "--data",
                "split/train.jsonl",
                "--vocab-data",
                "all.jsonl",
                "--out",
                "base.json",
            ],
        ]
        .concat(),
    );
    let predict = [
        "predict",
        "--per-token-latency",
        "0.01",
        "--data",
        "split/val.jsonl",
    ];
    run(
        dir,
        &[
            &predict[..],
            &["--model", "base.json", "--out", "base_val.jsonl"],
        ]
        .concat(),
    );
    run(
        dir,
        &[
            "annotate",
            "--train",
            "split/val.jsonl",
            "--preds",
            "base_val.jsonl",
            "--alpha",
            "1.0",
            "--seed",
            "7",
            "--out",
            "aug.jsonl",
        ],
    );
    run(
        dir,
        &[
            &train[..],
            &[
                "--aug",
                "aug.jsonl",
                "--init",
                "base.json",
                "--out",
                "selfref.json",
            ],
        ]
        .concat(),
    );
    let test = ["predict", "--data", "split/test.jsonl"];
    run(
        dir,
        &[
            &test[..],
            &[
                "--per-token-latency",
                "0.01",
                "--model",
                "selfref.json",
                "--out",
                "local.jsonl",
            ],
        ]
        .concat(),
    );
    run(
        dir,
        &[
            &test[..],
            &[
                "--model",
                "base.json",
                "--model-id",
                "big",
                "--per-token-latency",
                "0.02",
                "--out",
                "remote.jsonl",
            ],
        ]
        .concat(),
    );
    run(
        dir,
        &[
            "score",
            "--preds",
            "local.jsonl",
            "--method",
            "self-ref",
            "--out",
            "scores.jsonl",
        ],
    );
    run(
        dir,
        &[
            "curve",
            "--local",
            "local.jsonl",
            "--remote",
            "remote.jsonl",
            "--scores",
            "scores.jsonl",
            "--steps",
            "20",
            "--out",
            "c.csv",
        ],
    );
    run(
        dir,
        &[
            "eval-route",
            "--local",
            "local.jsonl",
            "--remote",
            "remote.jsonl",
            "--data",
            "split/test.jsonl",
            "--out",
            "route.json",
        ],
    );
    run(
        dir,
        &[
            "rejection-set",
            "--data",
            "split/test.jsonl",
            "--fraction",
            "0.5",
            "--seed",
            seed,
            "--out",
            "rej.jsonl",
        ],
    );
    run(
        dir,
        &[
            "predict",
            "--per-token-latency",
            "0.01",
            "--data",
            "rej.jsonl",
            "--model",
            "selfref.json",
            "--out",
            "rej_preds.jsonl",
        ],
    );
    run(
        dir,
        &[
            "eval-reject",
            "--data",
            "rej.jsonl",
            "--preds",
            "rej_preds.jsonl",
            "--out",
            "roc.csv",
        ],
    );
    run(
        dir,
        &[
            "calibrate",
            "--data",
            "split/test.jsonl",
            "--preds",
            "local.jsonl",
            "--out",
            "cal.json",
        ],
    );
}

const OUTPUTS: [&str; 17] = [
    "all.jsonl",
    "split/train.jsonl",
    "split/val.jsonl",
    "split/test.jsonl",
    "base.json",
    "base_val.jsonl",
    "aug.jsonl",
    "selfref.json",
    "local.jsonl",
    "remote.jsonl",
    "scores.jsonl",
    "c.csv",
    "route.json",
    "rej.jsonl",
    "rej_preds.jsonl",
    "roc.csv",
    "cal.json",
];

#[test]
fn full_pipeline_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d, "11");

    // Annotation count oracle: every correct prediction plus ceil(1.0 * wrong).
    let val = load_jsonl(d.join("split/val.jsonl"), SplitTag::Val).unwrap();
    let preds = load_predictions(d.join("base_val.jsonl")).unwrap();
    let correct = val
        .records
        .iter()
        .filter(|r| {
            let p = preds.iter().find(|p| p.query_id == r.id).unwrap();
            r.ground_truth.is_matched_by(&p.answer)
        })
        .count();
    let wrong = val.len() - correct;
    assert_eq!(lines(&d.join("aug.jsonl")).len(), correct + wrong);
    let cn = lines(&d.join("aug.jsonl"))
        .iter()
        .filter(|l| l.contains("<CN>"))
        .count();
    assert_eq!(cn, correct);

    // 21 thresholds plus the header.
    let csv = lines(&d.join("c.csv"));
    assert_eq!(csv[0], "routing_rate,accuracy,mean_latency_s");
    assert_eq!(csv.len(), 22);
    assert!(csv[1].starts_with("0,"));
    assert!(csv[21].starts_with("1,"));

    let route: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("route.json")).unwrap()).unwrap();
    assert_eq!(route["points"].as_array().unwrap().len(), 21);
    let roc = lines(&d.join("roc.csv"));
    assert_eq!(roc[0], "fpr,tpr");
    assert!(roc.last().unwrap().starts_with("# auc="));
    let cal: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("cal.json")).unwrap()).unwrap();
    assert_eq!(cal["n_bins"], 10);
    assert_eq!(cal["n_samples"], 20);
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "5");
    pipeline(b.path(), "5");
    for f in OUTPUTS {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn usage_errors() {
    let out = bin().arg("launch-rockets").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = bin()
        .args(["synth", "--n", "3", "--out", "x", "--bogus"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Short flags are not accepted.
    let out = bin()
        .args(["synth", "-n", "3", "--out", "x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        r#"{"id":"a","prompt":"p","choices":[{"letter":"A","text":"x"},{"letter":"B","text":"y"}],"ground_truth":"E","subject":null}"#,
    )
    .unwrap();
    let out = bin()
        .args(["ingest", "--input"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let out = bin()
        .args(["annotate", "--train"])
        .arg(&bad)
        .args(["--preds", "none.jsonl", "--out", "o.jsonl"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_lists_schemas() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("predictions {\"query_id\""));
    for sub in [
        "ingest",
        "annotate",
        "train",
        "predict",
        "eval-route",
        "eval-reject",
        "calibrate",
        "curve",
        "serve",
        "mock-serve",
    ] {
        assert!(text.contains(sub), "{sub}");
    }
}

#[test]
fn ingest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(d, &["synth", "--n", "10", "--out", "a.jsonl"]);
    run(d, &["ingest", "--input", "a.jsonl", "--out", "b.jsonl"]);
    assert_eq!(
        std::fs::read(d.join("a.jsonl")).unwrap(),
        std::fs::read(d.join("b.jsonl")).unwrap()
    );
}
