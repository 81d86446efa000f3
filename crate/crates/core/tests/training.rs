use msformer_core::config::TrainConfig;
use msformer_core::data::synth_samples;
use msformer_core::runner::checkpoint::FORMAT_VERSION;
use msformer_core::runner::train::{checkpoint_path, final_checkpoint_path};
use msformer_core::runner::{evaluate, Checkpoint, Trainer};
use msformer_core::Error;

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig { patch_h: 8, patch_w: 8, log_every: 0, ..TrainConfig::default() };
    cfg.model.channels = 16;
    cfg.model.backbone_width = 8;
    cfg.model.memory_len = 8;
    cfg.model.blocks = 2;
    cfg.optim.batch_size = 4;
    cfg.optim.max_iteration = 100;
    cfg
}

#[test]
fn batches_are_a_pure_function_of_seed_and_iteration() {
    let samples = synth_samples(10, 64, 1);
    let t = Trainer::new(small_config(), samples.clone()).unwrap();
    let u = Trainer::new(small_config(), samples.clone()).unwrap();
    for it in [0, 1, 2, 7, 50] {
        assert_eq!(t.batch_indices(it), u.batch_indices(it));
    }
    let mut seen: Vec<usize> = (0..5).flat_map(|it| t.batch_indices(it)).collect();
    let first_epoch = seen[..10].to_vec();
    let mut sorted = first_epoch.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    seen.truncate(20);
    let mut other_seed = small_config();
    other_seed.seed = 1;
    let v = Trainer::new(other_seed, samples).unwrap();
    assert_ne!(
        (0..5).flat_map(|it| v.batch_indices(it)).collect::<Vec<_>>()[..20],
        seen[..]
    );
}

#[test]
fn resumed_run_matches_uninterrupted_run_bitwise() {
    let samples = synth_samples(12, 64, 2);
    let mut straight = Trainer::new(small_config(), samples.clone()).unwrap();
    let logs_straight = straight.run(6, None).unwrap();

    let mut first = Trainer::new(small_config(), samples.clone()).unwrap();
    first.run(3, None).unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    let ckpt = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::resume(small_config(), &ckpt, samples).unwrap();
    assert_eq!(resumed.iteration, 3);
    let logs_resumed = resumed.run(6, None).unwrap();

    assert_eq!(&logs_straight[3..], &logs_resumed[..]);
    assert_eq!(resumed.adam, straight.adam);
    for ((_, a), (_, b)) in resumed.store.iter().zip(straight.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn smoke_run_has_decreasing_moving_average() {
    let samples = synth_samples(16, 64, 3);
    let mut cfg = small_config();
    cfg.data.augment = false;
    let mut t = Trainer::new(cfg, samples).unwrap();
    let logs = t.run(10, None).unwrap();
    assert_eq!(logs.len(), 10);
    let totals: Vec<f64> = logs.iter().map(|l| l.losses.total).collect();
    assert!(totals.iter().all(|v| v.is_finite() && *v > 0.0));
    let avg: Vec<f64> = totals.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    assert!(avg.windows(2).all(|p| p[1] <= p[0]), "moving average {avg:?} from {totals:?}");
    for l in &logs {
        let sp: f64 = l.losses.l_sp.iter().sum();
        assert!((l.losses.total - (sp + l.losses.l_pcl + l.losses.l_upcl)).abs() < 1e-5);
    }
}

#[test]
fn checkpoints_are_written_and_reloadable() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.checkpoint_every = 2;
    let samples = synth_samples(6, 64, 4);
    let mut t = Trainer::new(cfg.clone(), samples.clone()).unwrap();
    t.run(3, Some(dir.path())).unwrap();
    assert!(checkpoint_path(dir.path(), 2).is_file());
    assert!(!checkpoint_path(dir.path(), 3).is_file());
    let last = Checkpoint::<f32>::load(&final_checkpoint_path(dir.path())).unwrap();
    assert_eq!(last.header.iteration, 3);
    assert_eq!(last.header.config, cfg);
    assert_eq!(last.adam, t.adam);
    let resumed = Trainer::resume(cfg.clone(), &last, samples.clone()).unwrap();
    let a = evaluate(&t.model, &t.store, &cfg, &samples, false).unwrap();
    let b = evaluate(&resumed.model, &resumed.store, &cfg, &samples, false).unwrap();
    assert_eq!(a, b);
}

#[test]
fn incompatible_checkpoints_are_refused() {
    let samples = synth_samples(4, 64, 5);
    let t = Trainer::new(small_config(), samples.clone()).unwrap();
    let ckpt = t.checkpoint();
    let mut other = small_config();
    other.model.memory_len = 16;
    other.patch_h = 16;
    let err = Trainer::resume(other, &ckpt, samples).err().expect("must refuse").to_string();
    assert!(err.contains("model.memory_len") && err.contains("patch_h"), "{err}");

    let mut bytes = ckpt.to_bytes().unwrap();
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    match Checkpoint::<f32>::from_bytes(&bytes) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("version")),
        other => panic!("expected version error, got {:?}", other.map(|_| ())),
    }
    let bytes = ckpt.to_bytes().unwrap();
    assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    assert!(matches!(
        Checkpoint::<f32>::load(std::path::Path::new("/nonexistent/x.msf")),
        Err(Error::MissingFile(_))
    ));
}

#[test]
fn ground_truth_as_prediction_scores_perfectly() {
    let samples = synth_samples(8, 64, 6);
    let cfg = small_config();
    let t = Trainer::new(cfg.clone(), samples.clone()).unwrap();
    let r = evaluate(&t.model, &t.store, &cfg, &samples, true).unwrap();
    for v in [r.kappa, r.iou, r.f1, r.recall, r.precision, r.overall_accuracy] {
        assert_eq!(v, 1.0);
    }
    assert!(r.degenerate.is_empty());
}
