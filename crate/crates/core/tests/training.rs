mod common;

use std::collections::BTreeMap;

use cprc::checkpoint::Checkpoint;
use cprc::train::{batches_per_epoch, caption_image, plan_epoch, train, AblationMode, TrainConfig, Trainer};
use cprc::{Error, Graph};

use common::{params_bitwise_eq, quick_config, small_dataset};

#[test]
fn identical_seeds_reproduce_identical_runs() {
    let ds = small_dataset(5);
    let config = quick_config(AblationMode::Full, 11);
    let (m1, r1) = train::<f32>(&ds, &config, None).unwrap();
    let (m2, r2) = train::<f32>(&ds, &config, None).unwrap();
    assert_eq!(r1.without_timing(), r2.without_timing());
    assert!(params_bitwise_eq(&m1, &m2));

    let other = TrainConfig { seed: 12, ..config };
    let (m3, _) = train::<f32>(&ds, &other, None).unwrap();
    assert!(!params_bitwise_eq(&m1, &m3));
}

#[test]
fn training_log_has_a_line_per_batch_and_epoch() {
    let ds = small_dataset(5);
    let config = quick_config(AblationMode::Full, 1);
    let mut log = Vec::new();
    train::<f32>(&ds, &config, Some(&mut log)).unwrap();
    let lines: Vec<serde_json::Value> =
        String::from_utf8(log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let kinds: Vec<&str> = lines.iter().map(|l| l["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["batch", "batch", "batch", "epoch", "batch", "batch", "batch", "epoch"]);
    assert!(lines[0]["l_rc"].is_number() && lines[3]["metrics"]["CIDEr-D"].is_number());
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let ds = small_dataset(6);
    let mut trainer = Trainer::<f32>::new(quick_config(AblationMode::Full, 2), &ds).unwrap();
    trainer.run_epoch(None).unwrap();
    let ck = trainer.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(back.epoch, 1);
    assert_eq!(back.extra, ck.extra);
    assert_eq!(back.optimizer, ck.optimizer);
    assert!(params_bitwise_eq(&back.model, &ck.model));
    for scene in &ds.test {
        let a = caption_image(&ck.model, &scene.image, &ds.vocabulary).unwrap();
        let b = caption_image(&back.model, &scene.image, &ds.vocabulary).unwrap();
        assert_eq!(a, b);
        let probs = |m: &cprc::Model32| {
            let mut g = Graph::new();
            let vars = m.bind(&mut g);
            let r = m.encode(&mut g, &vars, &scene.image).unwrap();
            let e = m.image_embedding(&mut g, r).unwrap();
            let p = m.classify(&mut g, &vars, e).unwrap();
            g.value(p).clone()
        };
        assert!(probs(&ck.model).bitwise_eq(&probs(&back.model)));
    }
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let ds = small_dataset(7);
    let config = TrainConfig { epochs: 3, ..quick_config(AblationMode::Full, 3) };
    let mut straight = Trainer::<f32>::new(config.clone(), &ds).unwrap();
    straight.run(None).unwrap();

    let mut first = Trainer::<f32>::new(config.clone(), &ds).unwrap();
    first.run_epoch(None).unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    drop(first);
    let mut resumed = Trainer::resume(config, &ds, Checkpoint::<f32>::from_bytes(&bytes).unwrap()).unwrap();
    resumed.run(None).unwrap();

    assert_eq!(straight.record().without_timing(), resumed.record().without_timing());
    let (a, b) = (straight.checkpoint(), resumed.checkpoint());
    assert!(params_bitwise_eq(&a.model, &b.model));
    assert_eq!(a.optimizer, b.optimizer);
    assert_eq!(a.epoch, b.epoch);
}

#[test]
fn resume_rejects_a_different_config() {
    let ds = small_dataset(7);
    let config = quick_config(AblationMode::Full, 3);
    let mut t = Trainer::<f32>::new(config.clone(), &ds).unwrap();
    t.run_epoch(None).unwrap();
    let ck = t.checkpoint();
    let changed = TrainConfig { seed: 4, ..config.clone() };
    assert!(matches!(Trainer::resume(changed, &ds, ck.clone()), Err(Error::Config(_))));
    let longer = TrainConfig { epochs: 5, ..config };
    assert!(Trainer::resume(longer, &ds, ck).is_ok());
}

#[test]
fn zero_lambdas_match_supervised_only_bitwise() {
    let ds = small_dataset(8);
    let mut full = quick_config(AblationMode::Full, 4);
    full.loss.lambda1 = 0.0;
    full.loss.lambda2 = 0.0;
    let sup = quick_config(AblationMode::SupervisedOnly, 4);
    let (a, _) = train::<f32>(&ds, &full, None).unwrap();
    let (b, _) = train::<f32>(&ds, &sup, None).unwrap();
    assert!(params_bitwise_eq(&a, &b));

    let (c, _) = train::<f32>(&ds, &quick_config(AblationMode::Full, 4), None).unwrap();
    assert!(!params_bitwise_eq(&a, &c));
}

#[test]
fn unreachable_pseudo_label_threshold_matches_supervised_only() {
    let ds = small_dataset(9);
    let pl = TrainConfig { pl_threshold: 1.0, ..quick_config(AblationMode::PseudoLabel, 5) };
    let sup = quick_config(AblationMode::SupervisedOnly, 5);
    let (a, ra) = train::<f32>(&ds, &pl, None).unwrap();
    let (b, _) = train::<f32>(&ds, &sup, None).unwrap();
    assert!(params_bitwise_eq(&a, &b));
    assert!(ra.epochs.iter().all(|e| e.l_pc == 0.0 && e.l_rc == 0.0));
}

#[test]
fn an_epoch_covers_the_larger_pool_exactly_once() {
    let config = TrainConfig::default();
    let (n_d, n_u) = (20, 180);
    let batches = batches_per_epoch(&config, n_d, n_u);
    assert_eq!(batches, 15);
    for epoch in 1..=3 {
        let plan = plan_epoch(&config, n_d, n_u, epoch).unwrap();
        assert_eq!(plan.len(), batches);
        let mut seen_u = BTreeMap::new();
        let mut seen_d = BTreeMap::new();
        for b in &plan {
            assert_eq!((b.described.len(), b.undescribed.len()), (4, 12));
            for &i in &b.undescribed {
                *seen_u.entry(i).or_insert(0) += 1;
            }
            for &i in &b.described {
                *seen_d.entry(i).or_insert(0) += 1;
            }
        }
        assert!(seen_u.len() == n_u && seen_u.values().all(|&c| c == 1));
        assert!(seen_d.len() == n_d && seen_d.values().all(|&c| c == 3));
    }
    assert_ne!(
        plan_epoch(&config, n_d, n_u, 1).unwrap()[0].undescribed,
        plan_epoch(&config, n_d, n_u, 2).unwrap()[0].undescribed
    );
}

#[test]
fn non_finite_inputs_abort_with_a_named_term() {
    let mut ds = small_dataset(10);
    ds.described[0].image.data[0] = f32::NAN;
    ds.described.truncate(1);
    let err = train::<f32>(&ds, &quick_config(AblationMode::SupervisedOnly, 1), None).unwrap_err();
    assert!(matches!(err, Error::NanLoss { .. }), "{err}");
}

#[test]
fn evaluation_reports_six_metrics_each_epoch() {
    let ds = small_dataset(5);
    let (_, record) = train::<f32>(&ds, &quick_config(AblationMode::SupervisedOnly, 1), None).unwrap();
    assert_eq!(record.epochs.len(), 2);
    for e in &record.epochs {
        let m = serde_json::to_value(e.metrics.unwrap()).unwrap();
        let keys: Vec<&String> = m.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 6);
    }
    assert_eq!(record.schema_version, cprc::train::RECORD_SCHEMA_VERSION);
}
