use std::fs;

use cprc::data::{build_dataset, caption_labels, load_dataset, save_dataset, SceneSpec};
use cprc::Error;

#[test]
fn default_corpus_has_the_expected_split() {
    let ds = build_dataset(&SceneSpec::default(), 2000, 0.01, 200, 0).unwrap();
    assert_eq!((ds.described.len(), ds.undescribed.len(), ds.test.len()), (20, 1980, 200));
    ds.check_disjoint().unwrap();
    ds.validate().unwrap();
    assert_eq!(ds.vocabulary.len(), 16);
    for s in ds.described.iter().chain(&ds.test) {
        assert_eq!(caption_labels(&s.caption, &ds.classes), s.labels);
        let bits: u8 = s.labels.iter().sum();
        assert!((2..=4).contains(&bits), "{:?}", s.caption);
        assert_eq!(s.caption.len(), 7);
    }
}

#[test]
fn generation_is_seeded() {
    let spec = SceneSpec::default();
    let a = build_dataset(&spec, 50, 0.2, 5, 3).unwrap();
    let b = build_dataset(&spec, 50, 0.2, 5, 3).unwrap();
    let c = build_dataset(&spec, 50, 0.2, 5, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn save_and_load_round_trip() {
    let ds = build_dataset(&SceneSpec::default(), 40, 0.25, 6, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_dataset(&ds, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), ds);
    let lines = fs::read_to_string(&path).unwrap().lines().count();
    assert_eq!(lines, 1 + 40 + 6);
}

#[test]
fn corrupt_files_are_rejected_with_a_location() {
    let ds = build_dataset(&SceneSpec::default(), 10, 0.5, 2, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_dataset(&ds, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();

    let truncated: Vec<&str> = text.lines().take(5).collect();
    fs::write(&path, truncated.join("\n")).unwrap();
    assert!(load_dataset(&path).is_err());

    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[3] = "{\"image\": [1.0]}".into();
    fs::write(&path, lines.join("\n")).unwrap();
    match load_dataset(&path) {
        Err(Error::Format { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected a format error, got {other:?}"),
    }

    let bumped = text.replacen("\"schema_version\":1", "\"schema_version\":99", 1);
    fs::write(&path, bumped).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Version { found: 99, .. })));
}

#[test]
fn unlabeled_fraction_keeps_a_prefix() {
    let ds = build_dataset(&SceneSpec::default(), 100, 0.1, 0, 2).unwrap();
    let tenth = ds.with_unlabeled_fraction(0.1).unwrap();
    assert_eq!(tenth.undescribed.len(), 9);
    assert_eq!(tenth.undescribed[..], ds.undescribed[..9]);
    assert_eq!(tenth.described, ds.described);
    assert_eq!(ds.with_unlabeled_fraction(1.0).unwrap(), ds);
}
