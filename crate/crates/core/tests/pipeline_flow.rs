use std::fs;
use std::path::Path;

use slipnap_core::fusion::ModalityMask;
use slipnap_core::metrics::quantile;
use slipnap_core::pipeline::{cmd_generate, cmd_score_stream, cmd_train, FeatureSet, ModelBundle, PipelineConfig};
use slipnap_core::simulator::{DatasetManifest, Split};
use slipnap_core::streamsync::{format_frame_ndjson, read_episode, Label};
use slipnap_core::Error;

fn tiny_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default().with_seed(21);
    cfg.simulator.objects.truncate(2);
    cfg.simulator.patterns.truncate(1);
    cfg.simulator.n_per_cell = 3;
    cfg.train.epochs = 3;
    cfg
}

#[test]
fn train_writes_artifacts_and_scores_reload_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let summary = cmd_generate(&cfg, &tmp.path().join("data")).unwrap();
    assert!(summary.counts.iter().all(|&c| c > 0), "{:?}", summary.counts);
    let out = tmp.path().join("model");
    let outcome = cmd_train(&cfg, &summary.manifest_path, ModalityMask::ALL, &out).unwrap();
    for f in ["model.bundle", "train_log.csv", "val_scores.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }

    let bundle = ModelBundle::load(&out.join("model.bundle")).unwrap();
    assert_eq!(bundle, outcome.bundle);
    let q = bundle.config.nap.threshold_quantile;
    assert_eq!(bundle.threshold(), Some(quantile(&outcome.val_scores, q).unwrap()));

    let data = FeatureSet::load(&cfg, &summary.manifest_path).unwrap();
    let val: Vec<_> = data
        .ticks(Split::Val)
        .filter(|(_, t)| t.label == Label::Normal)
        .map(|(_, t)| t)
        .collect();
    let rescored = bundle.score_ticks(&val, ModalityMask::ALL).unwrap();
    assert_eq!(rescored.len(), outcome.val_scores.len());
    for (a, b) in rescored.iter().zip(&outcome.val_scores) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }

    let csv = fs::read_to_string(out.join("val_scores.csv")).unwrap();
    let parsed: Vec<f64> = csv.lines().skip(1).map(|l| l.parse().unwrap()).collect();
    assert_eq!(parsed, outcome.val_scores);
}

fn drop_split(manifest_path: &Path, split: Split) {
    let mut m = DatasetManifest::load(manifest_path).unwrap();
    m.entries.retain(|e| e.split != split);
    m.save(manifest_path).unwrap();
}

#[test]
fn missing_validation_split_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let summary = cmd_generate(&cfg, tmp.path()).unwrap();
    drop_split(&summary.manifest_path, Split::Val);
    let e = cmd_train(&cfg, &summary.manifest_path, ModalityMask::ALL, &tmp.path().join("m")).unwrap_err();
    assert!(matches!(e, Error::EmptyInput(_)), "{e}");
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn corrupt_bundle_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("model.bundle");
    fs::write(&path, b"not a bundle").unwrap();
    assert!(ModelBundle::load(&path).is_err());
    assert!(ModelBundle::load(&tmp.path().join("absent.bundle")).is_err());
}

#[test]
fn stream_scoring_skips_malformed_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let summary = cmd_generate(&cfg, &tmp.path().join("data")).unwrap();
    let outcome = cmd_train(&cfg, &summary.manifest_path, ModalityMask::ALL, &tmp.path().join("m")).unwrap();
    let manifest = DatasetManifest::load(&summary.manifest_path).unwrap();
    let entry = manifest.split(Split::Eval).next().unwrap();
    let root = summary.manifest_path.parent().unwrap();
    let (streams, _) = read_episode(&root.join(&entry.path)).unwrap();

    let mut input = String::from("{ not json\n\n");
    for f in streams.interleaved() {
        input.push_str(&format_frame_ndjson(f));
        input.push('\n');
    }
    input.push_str("garbage\n");
    let mut out = Vec::new();
    let stats = cmd_score_stream(&outcome.bundle, ModalityMask::ALL, input.as_bytes(), &mut out).unwrap();
    assert_eq!(stats.malformed, 2);
    assert!(stats.records > 0);
    assert_eq!(String::from_utf8(out).unwrap().lines().count(), stats.records);
}

#[test]
fn config_toml_round_trip_and_validation() {
    let cfg = tiny_config();
    let text = cfg.to_toml().unwrap();
    assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
    assert_eq!(PipelineConfig::from_toml_str("").unwrap(), PipelineConfig::default());

    let mut bad = PipelineConfig::default();
    bad.sync.grid_hz = 0.0;
    assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
    assert!(PipelineConfig::from_toml_str("seed = \"x\"").is_err());
}
