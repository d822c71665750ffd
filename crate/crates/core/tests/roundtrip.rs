//! Cohort and checkpoint serialization.

use std::fs;

use cmil::checkpoint::Checkpoint;
use cmil::cohort::{generate_synthetic_cohort, load_cohort, save_cohort, Cohort, CohortConfig};
use cmil::error::Error;
use cmil::trainer::{evaluate, train, Precision, TrainConfig};

fn cohort(n: usize, seed: u64) -> Cohort {
    let cfg = CohortConfig {
        n_slides: n,
        patches_min: 12,
        patches_max: 20,
        feature_dim: 6,
        thumbnail_dim: 5,
        ..CohortConfig::default()
    };
    generate_synthetic_cohort(&cfg, seed).unwrap()
}

fn config(precision: Precision) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        warm_up_epochs: 1,
        batch_size: 8,
        learning_rate: 1e-3,
        k_max: 3,
        bias_sample_count: 8,
        cluster_fit_steps: 10,
        precision,
        ..TrainConfig::default()
    }
}

#[test]
fn cohort_roundtrip_is_exact() {
    let c = cohort(12, 1);
    let dir = tempfile::tempdir().unwrap();
    save_cohort(&c, dir.path()).unwrap();
    let back = load_cohort(dir.path()).unwrap();
    assert_eq!(back, c);
    let labels = fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 13);
}

#[test]
fn truncated_slide_file_is_reported() {
    let c = cohort(4, 2);
    let dir = tempfile::tempdir().unwrap();
    save_cohort(&c, dir.path()).unwrap();
    let path = dir.path().join("slide_00002.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    match load_cohort(dir.path()) {
        Err(Error::Parse { context, message }) => {
            assert_eq!(context, format!("slide {}", c.slides[2].id));
            assert!(message.contains("coordinates"), "{message}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    fs::write(&path, &bytes[..10]).unwrap();
    let err = load_cohort(dir.path()).unwrap_err().to_string();
    assert!(err.contains("feature block truncated"), "{err}");
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_cohort(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn checkpoint_roundtrip_preserves_outputs() {
    let c = cohort(24, 3);
    let outcome = train(&c, None, &config(Precision::F64)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    outcome.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, outcome.checkpoint);
    assert_eq!(
        evaluate(&back, &c).unwrap(),
        evaluate(&outcome.checkpoint, &c).unwrap()
    );
}

#[test]
fn f32_checkpoint_roundtrip_is_exact_after_rounding() {
    let c = cohort(24, 4);
    let outcome = train(&c, None, &config(Precision::F32)).unwrap();
    let ckpt = &outcome.checkpoint;
    for t in ckpt.params.values() {
        assert!(t.data().iter().all(|&x| x == x as f32 as f64));
    }
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.params, ckpt.params);
    assert_eq!(
        back.frozen.as_ref().map(|f| &f.centers),
        ckpt.frozen.as_ref().map(|f| &f.centers)
    );
    assert_eq!(
        back.frozen.as_ref().map(|f| &f.bias),
        ckpt.frozen.as_ref().map(|f| &f.bias)
    );
    assert_eq!(
        evaluate(&back, &c).unwrap().risks,
        evaluate(ckpt, &c).unwrap().risks
    );
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let c = cohort(16, 5);
    let outcome = train(&c, None, &config(Precision::F64)).unwrap();
    let bytes = outcome.checkpoint.to_bytes().unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(Checkpoint::from_bytes(&bad_magic).is_err());

    for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            Checkpoint::from_bytes(&bytes[..cut]).is_err(),
            "cut at {cut}"
        );
    }

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::from_bytes(&trailing).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.bin");
    fs::write(&path, &bytes[..bytes.len() / 3]).unwrap();
    match Checkpoint::load(&path) {
        Err(Error::Parse { context, .. }) => assert!(context.ends_with("broken.bin")),
        other => panic!("expected a parse error, got {other:?}"),
    }
}
