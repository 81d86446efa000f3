use msformer::{compute_metrics, evaluate, generate_patch_labels, poly_lr, predict, synth_dataset, train};
use pyo3::exceptions::{PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn f64_at(d: &Bound<'_, PyDict>, key: &str) -> f64 {
    d.get_item(key).unwrap().unwrap().extract().unwrap()
}

fn u64_at(d: &Bound<'_, PyDict>, key: &str) -> u64 {
    d.get_item(key).unwrap().unwrap().extract().unwrap()
}

#[test]
fn metrics_match_hand_counts() {
    Python::initialize();
    Python::attach(|py| {
        let d = compute_metrics(py, 3, 1, 1, 11).unwrap();
        assert!((f64_at(&d, "kappa") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f64_at(&d, "iou"), 0.6);
        assert_eq!(f64_at(&d, "overall_accuracy"), 0.875);
        assert_eq!(u64_at(&d, "tn"), 11);
        assert!(compute_metrics(py, 0, 0, 0, 0).unwrap_err().is_instance_of::<PyValueError>(py));
    });
}

#[test]
fn patch_labels_and_schedule() {
    Python::initialize();
    Python::attach(|py| {
        let mut mask = vec![vec![0u8; 4]; 4];
        mask[3][0] = 1;
        assert_eq!(generate_patch_labels(mask.clone(), 2, 2).unwrap(), vec![vec![0, 0], vec![1, 0]]);
        assert!(generate_patch_labels(mask, 3, 3).unwrap_err().is_instance_of::<PyValueError>(py));
        assert_eq!(poly_lr(0, 0.0005, 0.9, 100).unwrap(), 0.0005);
        assert_eq!(poly_lr(100, 0.0005, 0.9, 100).unwrap(), 0.0);
        assert!(poly_lr(101, 0.0005, 0.9, 100).is_err());
    });
}

#[test]
fn train_evaluate_predict_round_trip() {
    Python::initialize();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let run = dir.path().join("run");
    let config = r#"
patch_h = 8
patch_w = 8
log_every = 0

[model]
channels = 8
backbone_width = 4
memory_len = 4
blocks = 1

[optim]
batch_size = 2
"#;
    Python::attach(|py| {
        synth_dataset(py, root.clone(), 10, 64, 3).unwrap();
        let ckpt = train(py, root.clone(), run.clone(), Some(config), Some(2), None).unwrap();
        assert!(ckpt.ends_with("final.msf"));
        let report = evaluate(py, ckpt.clone().into(), root.clone(), "test", None).unwrap();
        let total: u64 = ["tp", "fp", "fn", "tn"].iter().map(|k| u64_at(&report, k)).sum();
        assert_eq!(total, 2 * 64 * 64);
        let maps = predict(py, ckpt.into(), root.clone(), "test").unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!((maps[0].1.len(), maps[0].1[0].len()), (64, 64));
        assert!(maps.iter().flat_map(|(_, m)| m.iter().flatten()).all(|v| (0.0..=1.0).contains(v)));
        let missing = evaluate(py, dir.path().join("nope.msf"), root, "test", None).unwrap_err();
        assert!(missing.is_instance_of::<PyFileNotFoundError>(py));
    });
}
