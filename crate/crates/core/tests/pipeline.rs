use std::fs;

use selfcheck::bundle::{ModelBundle, SampleItem, SampleSet};
use selfcheck::cam::CropConfig;
use selfcheck::desk;
use selfcheck::detect::{detect_batch, read_reports, save_report, DetectConfig, Thresholds, Verdict};
use selfcheck::eval::{evaluation_reports, summarize, EvalConfig, Metric};
use selfcheck::profiler::{build_profiles, ProfileConfig, ProfileStore};
use selfcheck::Error;

fn setup() -> (ModelBundle, ProfileStore, SampleSet) {
    let bundle = desk::image_model(3).unwrap();
    let calib = desk::sample_set(bundle.modality(), desk::image_samples(25, 30)).unwrap();
    let cfg = ProfileConfig {
        min_samples: 5,
        crop: CropConfig {
            alpha: 0.3,
            min_frac: 0.5,
            weighted_by_class: false,
        },
        ..ProfileConfig::default()
    };
    let store = build_profiles(&bundle, &calib, &cfg).unwrap().store;
    let test = desk::sample_set(bundle.modality(), desk::image_samples(5, 31)).unwrap();
    (bundle, store, test)
}

fn as_adversarial(set: &SampleSet) -> SampleSet {
    let items: Vec<SampleItem> = set
        .items
        .iter()
        .map(|i| SampleItem {
            adversarial: true,
            ..i.clone()
        })
        .collect();
    SampleSet::new(set.modality, items).unwrap()
}

#[test]
fn containers_round_trip() {
    let (bundle, store, test) = setup();
    let dir = tempfile::tempdir().unwrap();
    bundle.save(&dir.path().join("model")).unwrap();
    store.save(&dir.path().join("profiles")).unwrap();
    test.save(&dir.path().join("test")).unwrap();

    let model = ModelBundle::load(&dir.path().join("model")).unwrap();
    assert_eq!(model.content_hash(), bundle.content_hash());
    let loaded = ProfileStore::load(&dir.path().join("profiles")).unwrap();
    assert_eq!(loaded, store);
    loaded.check_model(&model).unwrap();
    let back = SampleSet::load(&dir.path().join("test")).unwrap();
    assert_eq!(back.content_hash(), test.content_hash());
}

#[test]
fn truncated_weights_are_rejected() {
    let (bundle, _, _) = setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model");
    bundle.save(&path).unwrap();
    let blob = fs::read_dir(&path)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "bin"))
        .expect("a weight blob");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(ModelBundle::load(&path), Err(Error::TruncatedBlob { .. })));
}

#[test]
fn profiles_belong_to_their_model() {
    let (_, store, _) = setup();
    let other = desk::image_model(4).unwrap();
    assert!(store.check_model(&other).is_err());
}

#[test]
fn zero_threshold_flags_everything() {
    let (bundle, store, test) = setup();
    let cfg = DetectConfig::for_store(
        &store,
        Thresholds {
            semantic: 0.0,
            activation: 0.0,
        },
    );
    let reports = evaluation_reports(&bundle, &store, &test, &as_adversarial(&test), &cfg).unwrap();
    assert!(reports.iter().all(|r| r.d_activation.is_some_and(|d| d > 0.0)));
    let s = summarize(&reports, &EvalConfig::new(Metric::Semantic)).unwrap();
    assert_eq!(s.detection_rate, 1.0);
    assert_eq!(s.false_positive_rate, 1.0);
}

#[test]
fn infinite_threshold_flags_nothing() {
    let (bundle, store, test) = setup();
    let cfg = DetectConfig::for_store(
        &store,
        Thresholds {
            semantic: f64::INFINITY,
            activation: f64::INFINITY,
        },
    );
    let reports = evaluation_reports(&bundle, &store, &test, &as_adversarial(&test), &cfg).unwrap();
    let s = summarize(&reports, &EvalConfig::new(Metric::Semantic)).unwrap();
    assert_eq!(s.detection_rate, 0.0);
    assert_eq!(s.false_positive_rate, 0.0);
}

#[test]
fn summary_is_recomputable_from_report_lines() {
    let (bundle, store, test) = setup();
    let cfg = DetectConfig::for_store(&store, Thresholds::default());
    let reports = evaluation_reports(&bundle, &store, &test, &as_adversarial(&test), &cfg).unwrap();
    let mut buf = Vec::new();
    for r in &reports {
        save_report(r, &mut buf).unwrap();
    }
    let parsed = read_reports(buf.as_slice()).unwrap();
    for metric in [Metric::Semantic, Metric::Activation] {
        let ecfg = EvalConfig::new(metric);
        assert_eq!(summarize(&parsed, &ecfg).unwrap(), summarize(&reports, &ecfg).unwrap());
    }
}

#[test]
fn evaluation_checks_set_markings() {
    let (bundle, store, test) = setup();
    let cfg = DetectConfig::for_store(&store, Thresholds::default());
    assert!(evaluation_reports(&bundle, &store, &test, &test, &cfg).is_err());
    let adv = as_adversarial(&test);
    assert!(evaluation_reports(&bundle, &store, &adv, &adv, &cfg).is_err());
}

#[test]
fn batch_order_follows_input_order() {
    let (bundle, store, test) = setup();
    let cfg = DetectConfig::for_store(&store, Thresholds::default());
    let reports = detect_batch(&bundle, &test.items, &store, &cfg);
    let ids: Vec<&str> = reports.iter().map(|r| r.id.as_str()).collect();
    let expected: Vec<&str> = test.items.iter().map(|i| i.id.as_str()).collect();
    assert_eq!(ids, expected);
    assert!(reports.iter().all(|r| r.verdict != Verdict::Suspicious));
}
