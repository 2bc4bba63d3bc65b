use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
results_dir = "results"

[dataset]
name = "tiny"
kind = "synthetic"

[dataset.synthetic]
subjects = 14
sessions_per_subject = 8
keys_per_session = 11

[split]
n_test = 4
n_validation = 2

[grid]
breadth = [4]
samples_per_subject = [5]
seq_len = [10]
triplets = [64]
g_list = [2, 3, 4]
reruns = 2

[encoder]
batch_size = 16
validation_evaluations = 2
"#;

fn ksnn(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ksnn"))
        .current_dir(dir)
        .env_remove("KSNN_RESULTS_DIR")
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "ksnn {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn flags_override_config_fields() {
    let dir = setup();
    let out = ksnn(
        dir.path(),
        &[
            "show-config",
            "-c",
            "tiny.toml",
            "--breadth",
            "3,5",
            "--reruns",
            "7",
            "--set",
            "encoder.learning_rate=0.01",
            "--set",
            "dataset.name=renamed",
        ],
    );
    let cfg: toml::Table = stdout(&out).parse().unwrap();
    assert_eq!(cfg["grid"]["breadth"].as_array().unwrap().len(), 2);
    assert_eq!(cfg["grid"]["reruns"].as_integer(), Some(7));
    assert_eq!(cfg["encoder"]["learning_rate"].as_float(), Some(0.01));
    assert_eq!(cfg["dataset"]["name"].as_str(), Some("renamed"));
}

#[test]
fn results_dir_precedence() {
    let dir = setup();
    let show = |env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ksnn"));
        cmd.current_dir(dir.path()).env_remove("KSNN_RESULTS_DIR");
        if let Some(e) = env {
            cmd.env("KSNN_RESULTS_DIR", e);
        }
        cmd.args(["show-config", "-c", "tiny.toml"]);
        if let Some(f) = flag {
            cmd.args(["--results-dir", f]);
        }
        let out = cmd.output().unwrap();
        let cfg: toml::Table = String::from_utf8(out.stdout).unwrap().parse().unwrap();
        cfg["results_dir"].as_str().unwrap().to_owned()
    };
    assert!(show(None, None).ends_with("results"));
    assert_eq!(show(Some("/from/env"), None), "/from/env");
    assert_eq!(show(Some("/from/env"), Some("/from/flag")), "/from/flag");
}

#[test]
fn bad_override_is_reported() {
    let dir = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_ksnn"))
        .current_dir(dir.path())
        .args([
            "show-config",
            "-c",
            "tiny.toml",
            "--set",
            "grid.reruns=lots",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("reruns"));
}

#[test]
fn synth_ingest_and_split() {
    let dir = setup();
    ksnn(
        dir.path(),
        &["synth", "-c", "tiny.toml", "--out", "corpus.csv"],
    );
    let generic = [
        "-c",
        "tiny.toml",
        "--dataset-kind",
        "generic",
        "--dataset-path",
        "corpus.csv",
    ];
    let mut args = vec!["ingest", "--out", "canonical.csv", "--report", "ingest.csv"];
    args.extend(generic);
    ksnn(dir.path(), &args);
    // Canonical output reads back to the same bytes.
    assert_eq!(
        std::fs::read(dir.path().join("corpus.csv")).unwrap(),
        std::fs::read(dir.path().join("canonical.csv")).unwrap()
    );
    let mut args = vec!["split"];
    args.extend(generic);
    let split: serde_json::Value = serde_json::from_str(&stdout(&ksnn(dir.path(), &args))).unwrap();
    assert_eq!(split["test_subjects"].as_array().unwrap().len(), 4);
    assert_eq!(split["train_subjects"].as_array().unwrap().len(), 8);
}

#[test]
fn train_evaluate_report_diagnose_replay() {
    let dir = setup();
    let p = dir.path();
    let train = stdout(&ksnn(p, &["train", "-c", "tiny.toml"]));
    assert!(train.lines().count() > 1, "{train}");

    let checkpoints: Vec<_> = std::fs::read_dir(p.join("results/checkpoints"))
        .unwrap()
        .collect();
    assert_eq!(checkpoints.len(), 2);
    let ckpt = checkpoints[0].as_ref().unwrap().path();
    let eval = stdout(&ksnn(
        p,
        &[
            "evaluate",
            "-c",
            "tiny.toml",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--scores",
            "scores.csv",
        ],
    ));
    assert_eq!(eval.lines().count(), 4, "{eval}");
    assert!(p.join("scores.csv").exists());

    let listed = stdout(&ksnn(p, &["report", "-c", "tiny.toml", "--out", "report"]));
    assert!(
        listed.contains("summary.csv") && listed.contains(".svg"),
        "{listed}"
    );

    let diag = stdout(&ksnn(p, &["diagnose", "-c", "tiny.toml"]));
    assert!(diag.starts_with("breadth"), "{diag}");

    // Fails unless every run reproduces its stored record.
    ksnn(p, &["replay", "--manifest", "results/manifest-single.json"]);

    // Training again resumes from the stored records.
    let again = stdout(&ksnn(p, &["train", "-c", "tiny.toml"]));
    assert_eq!(again, train);
}
