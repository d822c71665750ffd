//! End-to-end runs of the `cmil` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmil::report::{emit_report, SECTIONS};
use serde_json::Value;

const SMALL_COHORT: &[&str] = &[
    "cohort.n_slides=50",
    "cohort.patches_min=12",
    "cohort.patches_max=16",
    "cohort.feature_dim=6",
    "cohort.thumbnail_dim=6",
];

const FAST_TRAIN: &[&str] = &[
    "train.epochs=3",
    "train.warm_up_epochs=1",
    "train.batch_size=8",
    "train.k_max=3",
    "train.bias_sample_count=8",
    "train.cluster_fit_steps=10",
];

fn cmil(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmil"))
        .current_dir(dir)
        .env_remove("CMIL_SEED")
        .env_remove("CMIL_JOBS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert_eq!(
        out.status.code(),
        Some(0),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(dir: &Path, args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    cmil(dir, &refs)
}

/// Relative path → contents, for every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn generate(dir: &Path, out: &str) {
    let mut args = with(&["generate", "--seed", "7", "--out", out], SMALL_COHORT);
    args.push("cohort.n_institutions=2".into());
    ok(&run(dir, &args));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "a");
    generate(dir.path(), "b");
    let a = snapshot(&dir.path().join("a"));
    assert!(a.contains_key(Path::new("manifest.json")));
    assert!(a.contains_key(Path::new("effective_config.json")));
    assert_eq!(a, snapshot(&dir.path().join("b")));
}

#[test]
fn config_file_section_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cohort.json"),
        r#"{"n_slides": 9, "patches_min": 5, "patches_max": 6, "feature_dim": 3, "thumbnail_dim": 3}"#,
    )
    .unwrap();
    fs::write(
        dir.path().join("full.json"),
        r#"{"seed": 1, "cohort": {"n_slides": 9}}"#,
    )
    .unwrap();

    ok(&cmil(
        dir.path(),
        &["generate", "--config", "cohort.json", "--out", "bare"],
    ));
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("bare/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["slides"].as_array().unwrap().len(), 9);
    assert_eq!(manifest["feature_dim"], 3);

    let seed_of = |name: &str| -> Value {
        let v: Value = serde_json::from_str(
            &fs::read_to_string(dir.path().join(name).join("effective_config.json")).unwrap(),
        )
        .unwrap();
        v["seed"].clone()
    };
    ok(&cmil(
        dir.path(),
        &["generate", "--config", "full.json", "--out", "file"],
    ));
    assert_eq!(seed_of("file"), 1);
    let env_run = Command::new(env!("CARGO_BIN_EXE_cmil"))
        .current_dir(dir.path())
        .env("CMIL_SEED", "2")
        .args(["generate", "--config", "full.json", "--out", "env"])
        .output()
        .unwrap();
    ok(&env_run);
    assert_eq!(seed_of("env"), 2);
    ok(&cmil(
        dir.path(),
        &["generate", "--config", "full.json", "--out", "kv", "seed=3"],
    ));
    assert_eq!(seed_of("kv"), 3);
    ok(&cmil(
        dir.path(),
        &[
            "generate",
            "--config",
            "full.json",
            "--out",
            "flag",
            "seed=3",
            "--seed",
            "4",
        ],
    ));
    assert_eq!(seed_of("flag"), 4);
    assert_ne!(
        fs::read(dir.path().join("kv/slide_00000.bin")).unwrap(),
        fs::read(dir.path().join("flag/slide_00000.bin")).unwrap()
    );
}

#[test]
fn validation_errors_exit_one_with_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[&[&str]] = &[
        &["generate", "--out", "x", "cohort.bogus=1"],
        &["train", "--out", "x"],
        &["train", "--cohort", "missing", "--out", "x"],
        &["frobnicate"],
        &["generate", "--out", "x", "cohort.causal_fraction=1.5"],
        &["generate", "--out", "x", "noequals"],
    ];
    for args in cases {
        let out = cmil(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", stderr(&out));
        let err = stderr(&out);
        let line = err
            .lines()
            .find(|l| l.starts_with("cmil-error["))
            .expect("prefixed error");
        assert!(line.starts_with("cmil-error[validation]: "), "{line}");
    }
    let out = cmil(dir.path(), &["generate", "--out", "x", "cohort.bogus=1"]);
    let err = stderr(&out);
    for key in ["train.epochs", "cohort.n_slides", "seed", "jobs"] {
        assert!(err.contains(key), "key list lacks {key}: {err}");
    }

    let bad_env = Command::new(env!("CARGO_BIN_EXE_cmil"))
        .current_dir(dir.path())
        .env("CMIL_JOBS", "many")
        .args(["generate", "--out", "x"])
        .output()
        .unwrap();
    assert_eq!(bad_env.status.code(), Some(1));
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("occupied"), "a file").unwrap();
    let out = cmil(dir.path(), &["generate", "--out", "occupied/sub"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("cmil-error[runtime]: "));
}

#[test]
fn train_eval_and_plot_stay_inside_out() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "data");
    let before = snapshot(dir.path());

    ok(&run(
        dir.path(),
        &with(
            &["train", "--cohort", "data", "--out", "runs/train"],
            FAST_TRAIN,
        ),
    ));
    let train_dir = dir.path().join("runs/train");
    for f in [
        "checkpoint.bin",
        "last.bin",
        "history.jsonl",
        "metrics.json",
        "loss.svg",
        "c_index.svg",
        "km.csv",
        "node_probs.json",
        "clusters.json",
        "report.md",
        "effective_config.json",
    ] {
        assert!(train_dir.join(f).is_file(), "missing {f}");
    }
    ok(&cmil(
        dir.path(),
        &[
            "eval",
            "--cohort",
            "data",
            "--checkpoint",
            "runs/train/checkpoint.bin",
            "--out",
            "runs/eval",
        ],
    ));
    let eval: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("runs/eval/eval.json")).unwrap())
            .unwrap();
    assert_eq!(eval["risks"].as_array().unwrap().len(), 50);

    ok(&cmil(
        dir.path(),
        &[
            "plot",
            "--metrics",
            "runs/train/history.jsonl",
            "--km",
            "runs/train/km.csv",
            "--out",
            "runs/plots",
        ],
    ));
    for f in ["loss.svg", "c_index.svg", "km.svg"] {
        let svg = fs::read_to_string(dir.path().join("runs/plots").join(f)).unwrap();
        assert!(
            svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"),
            "{f}"
        );
    }

    let after = snapshot(dir.path());
    for (path, bytes) in &after {
        if !path.starts_with("runs") {
            assert_eq!(before.get(path), Some(bytes), "{} changed", path.display());
        }
    }
    assert_eq!(
        before.len(),
        after.keys().filter(|p| !p.starts_with("runs")).count()
    );
}

#[test]
fn cv_report_has_one_row_per_fold_and_the_mean() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "data");
    let mut args = with(
        &["cv", "--cohort", "data", "--out", "cv", "--jobs", "2"],
        FAST_TRAIN,
    );
    args.push("train.folds=5".into());
    ok(&run(dir.path(), &args));

    let summary: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cv/cv_summary.json")).unwrap())
            .unwrap();
    let per_fold: Vec<f64> = summary["folds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["test_c_index"].as_f64().unwrap())
        .collect();
    assert_eq!(per_fold.len(), 5);
    let mean = per_fold.iter().sum::<f64>() / 5.0;
    assert!((mean - summary["mean_c_index"].as_f64().unwrap()).abs() <= 1e-12);

    let report = fs::read_to_string(dir.path().join("cv/report.md")).unwrap();
    let section: Vec<&str> = report
        .split("## C-index")
        .nth(1)
        .unwrap()
        .split("\n## ")
        .next()
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("| "))
        .skip(1)
        .collect();
    let fold_rows: Vec<&str> = section
        .iter()
        .copied()
        .filter(|l| !l.starts_with("| mean"))
        .collect();
    let mean_rows: Vec<&str> = section
        .iter()
        .copied()
        .filter(|l| l.starts_with("| mean"))
        .collect();
    assert_eq!(fold_rows.len(), 5, "{section:?}");
    assert_eq!(mean_rows.len(), 1);
    let cell = |row: &str| -> f64 {
        let cells: Vec<&str> = row
            .split('|')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .collect();
        cells
            .last()
            .unwrap()
            .split(' ')
            .next()
            .unwrap()
            .parse()
            .unwrap()
    };
    let row_mean = fold_rows.iter().map(|r| cell(r)).sum::<f64>() / 5.0;
    // rows are printed to four decimals
    assert!((row_mean - cell(mean_rows[0])).abs() <= 1e-4);
    assert!((cell(mean_rows[0]) - mean).abs() <= 5e-5);
    for i in 0..5 {
        assert!(dir
            .path()
            .join(format!("cv/fold{i}/history.jsonl"))
            .is_file());
    }
}

#[test]
fn empty_run_dir_lists_every_section_as_missing() {
    let dir = tempfile::tempdir().unwrap();
    let report = emit_report(dir.path());
    assert_eq!(report.missing.len(), SECTIONS.len());
    for s in SECTIONS {
        assert!(report.missing.iter().any(|m| m == s), "{s} not listed");
    }
    assert!(report.markdown.contains("## Missing sections"));
}

#[test]
fn gradcheck_reports_each_module() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmil(dir.path(), &["gradcheck", "--scale", "tiny", "--out", "gc"]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout
        .lines()
        .filter(|l| l.contains("max_rel_error"))
        .collect();
    assert!(lines.len() >= 4, "{stdout}");
    assert!(lines.iter().all(|l| l.ends_with(" ok")));
    assert!(dir.path().join("gc/gradcheck.json").is_file());
}
