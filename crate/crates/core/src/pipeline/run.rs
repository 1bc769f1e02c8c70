use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use super::bundle::{ModelBundle, Provenance, BUNDLE_VERSION};
use super::config::PipelineConfig;
use super::features::{input_matrix, EpisodeFeatures, FeatureExtractor, Normalizer, TickFeatures};
use crate::autoencoder::train_matrix;
use crate::error::{Error, Result};
use crate::fusion::ModalityMask;
use crate::metrics::{report, write_report, ComparisonTable, EvalReport};
use crate::nap;
use crate::seed::sha256_hex;
use crate::simulator::{generate_episode, DatasetManifest, EpisodeEntry, Split};
use crate::streamsync::{read_episode, Condition, Label};

/// Maps `f` over `items` on all available cores, preserving order.
pub fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Features of every manifest episode, in manifest order.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub entries: Vec<EpisodeEntry>,
    pub episodes: Vec<EpisodeFeatures>,
    pub manifest_hash: String,
}

impl FeatureSet {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &EpisodeFeatures> {
        self.entries
            .iter()
            .zip(&self.episodes)
            .filter(move |(e, _)| e.split == split)
            .map(|(_, f)| f)
    }

    pub fn ticks(&self, split: Split) -> impl Iterator<Item = (&EpisodeFeatures, &TickFeatures)> {
        self.split(split).flat_map(|ep| ep.ticks.iter().map(move |t| (ep, t)))
    }

    /// Generates every episode in memory from the simulator.
    pub fn simulate(cfg: &PipelineConfig, manifest: &DatasetManifest) -> Result<Self> {
        let extractor = FeatureExtractor::new(cfg)?;
        let sim = cfg.simulator_config();
        let episodes = par_map(&manifest.entries, |entry| {
            let bundle = generate_episode(&sim.scenario(entry)?)?;
            extractor.episode(&bundle.streams, &entry.object)
        })?;
        Ok(FeatureSet {
            entries: manifest.entries.clone(),
            episodes,
            manifest_hash: sha256_hex(manifest.to_text().as_bytes()),
        })
    }

    /// Reads episodes referenced by a manifest file.
    pub fn load(cfg: &PipelineConfig, manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        Self::load_entries(cfg, &manifest, root, None)
    }

    pub fn load_entries(
        cfg: &PipelineConfig,
        manifest: &DatasetManifest,
        root: &Path,
        only: Option<Split>,
    ) -> Result<Self> {
        let extractor = FeatureExtractor::new(cfg)?;
        let entries: Vec<EpisodeEntry> = manifest
            .entries
            .iter()
            .filter(|e| only.is_none_or(|s| e.split == s))
            .cloned()
            .collect();
        let episodes = par_map(&entries, |entry| {
            let (streams, _) = read_episode(&root.join(&entry.path))?;
            extractor.episode(&streams, &entry.object)
        })?;
        Ok(FeatureSet {
            entries,
            episodes,
            manifest_hash: sha256_hex(manifest.to_text().as_bytes()),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    /// Validation scores the threshold was fitted on.
    pub val_scores: Vec<f64>,
}

fn normal_ticks(data: &FeatureSet, split: Split) -> Vec<&TickFeatures> {
    data.ticks(split)
        .filter(|(_, t)| t.label == Label::Normal)
        .map(|(_, t)| t)
        .collect()
}

/// Fits normalization, autoencoder, NAP and threshold on the normal ticks
/// of the train and validation splits.
pub fn train_detector(cfg: &PipelineConfig, data: &FeatureSet, subset: ModalityMask) -> Result<TrainOutcome> {
    let train = normal_ticks(data, Split::Train);
    let val = normal_ticks(data, Split::Val);
    if train.is_empty() {
        return Err(Error::EmptyInput("train split has no normal ticks".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyInput("validation split has no normal ticks".into()));
    }
    let extractor = FeatureExtractor::new(cfg)?;
    let fusion = extractor.fusion().clone();
    let mut normalizer = Normalizer::fit(train.iter().copied())?;
    if cfg.features.balance_modalities {
        normalizer = normalizer.with_balance(train.iter().copied(), &fusion)?;
    }
    let input_dim = fusion.subset_dim(subset);
    let arch = cfg.architecture(input_dim);
    let nap_cfg = cfg.nap.clone();
    let x_train = input_matrix(train.iter().copied(), &normalizer, &fusion, subset, subset)?;
    let x_val = input_matrix(val.iter().copied(), &normalizer, &fusion, subset, subset)?;
    log::info!(
        "training {subset} detector: {} train rows, {} val rows, input {input_dim}",
        x_train.nrows(),
        x_val.nrows()
    );
    let (ae, train_log) = train_matrix(x_train.view(), x_val.view(), &arch, &cfg.train_config())?;
    let d_train = ae.pathway_errors(x_train.view(), nap_cfg.include_input_block)?;
    drop(x_train);
    let mut nap_model = nap::fit(d_train.view(), &nap_cfg)?;
    drop(d_train);
    let d_val = ae.pathway_errors(x_val.view(), nap_cfg.include_input_block)?;
    let val_scores = nap_model.score_batch(d_val.view())?;
    nap_model.set_threshold(nap::fit_threshold(&val_scores, nap_cfg.threshold_quantile)?);
    let bundle = ModelBundle {
        version: BUNDLE_VERSION,
        config: cfg.clone(),
        subset,
        normalizer,
        fusion,
        ae,
        nap: nap_model,
        train_log,
        provenance: Provenance {
            config_hash: cfg.hash()?,
            manifest_hash: data.manifest_hash.clone(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        },
    };
    Ok(TrainOutcome { bundle, val_scores })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTick {
    pub episode_id: String,
    pub condition: Condition,
    pub object: String,
    pub tick_time: f64,
    pub score: f64,
    pub label: Label,
}

pub fn score_split(bundle: &ModelBundle, data: &FeatureSet, split: Split, mask: ModalityMask) -> Result<Vec<ScoredTick>> {
    let pairs: Vec<(&EpisodeFeatures, &TickFeatures)> = data.ticks(split).collect();
    let ticks: Vec<&TickFeatures> = pairs.iter().map(|(_, t)| *t).collect();
    let scores = bundle.score_ticks(&ticks, mask)?;
    Ok(pairs
        .iter()
        .zip(scores)
        .map(|((ep, t), score)| ScoredTick {
            episode_id: ep.episode_id.clone(),
            condition: ep.condition,
            object: ep.object.clone(),
            tick_time: t.tick_time,
            score,
            label: t.label,
        })
        .collect())
}

/// Reports keyed by group name: `all`, `condition-<c>` and `object-<o>`.
pub fn grouped_reports(
    scored: &[ScoredTick],
    threshold: Option<f64>,
    cfg: &PipelineConfig,
) -> Result<BTreeMap<String, EvalReport>> {
    let items = scored.iter().flat_map(|s| {
        [
            ("all".to_string(), s.score, s.label),
            (format!("condition-{}", s.condition), s.score, s.label),
            (format!("object-{}", s.object), s.score, s.label),
        ]
    });
    report(items, threshold, &cfg.metrics)
}

pub fn condition_reports(
    scored: &[ScoredTick],
    threshold: Option<f64>,
    cfg: &PipelineConfig,
) -> Result<BTreeMap<Condition, EvalReport>> {
    report(
        scored.iter().map(|s| (ConditionKey(s.condition), s.score, s.label)),
        threshold,
        &cfg.metrics,
    )
    .map(|m| m.into_iter().map(|(k, v)| (k.0, v)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct ConditionKey(Condition);

impl std::fmt::Display for ConditionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

pub fn write_grouped(out: &Path, reports: &BTreeMap<String, EvalReport>) -> Result<()> {
    for (name, r) in reports {
        write_report(&out.join(name), name, r)?;
    }
    Ok(())
}

/// Table rows plus every per-condition report behind them.
#[derive(Debug, Clone)]
pub struct AblationResult {
    pub table: ComparisonTable,
    pub reports: Vec<(ModalityMask, BTreeMap<Condition, EvalReport>)>,
    pub bundles: Vec<ModelBundle>,
}

/// One detector per modality set (or one masked detector), evaluated per
/// condition on the eval split.
pub fn run_ablation(cfg: &PipelineConfig, data: &FeatureSet, masks: &[ModalityMask]) -> Result<AblationResult> {
    let conditions: Vec<Condition> = Condition::ALL
        .into_iter()
        .filter(|c| data.split(Split::Eval).any(|e| e.condition == *c))
        .collect();
    let mut table = ComparisonTable::new(conditions);
    let mut reports = Vec::new();
    let mut bundles = Vec::new();
    let shared = if cfg.ablation.retrain_per_modality {
        None
    } else {
        Some(train_detector(cfg, data, ModalityMask::ALL)?.bundle)
    };
    for &mask in masks {
        let bundle = match &shared {
            Some(b) => b.clone(),
            None => train_detector(cfg, data, mask)?.bundle,
        };
        let scored = score_split(&bundle, data, Split::Eval, mask)?;
        let per_condition = condition_reports(&scored, bundle.threshold(), cfg)?;
        table.push_row(mask.display_name(), &per_condition);
        reports.push((mask, per_condition));
        if shared.is_none() {
            bundles.push(bundle);
        }
    }
    if let Some(b) = shared {
        bundles.push(b);
    }
    Ok(AblationResult {
        table,
        reports,
        bundles,
    })
}

// ---- command entry points ----

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSummary {
    pub manifest_path: PathBuf,
    pub counts: [usize; 3],
}

pub fn cmd_generate(cfg: &PipelineConfig, out_dir: &Path) -> Result<GenerateSummary> {
    let (manifest, manifest_path) = crate::simulator::write_dataset(&cfg.simulator_config(), out_dir)?;
    Ok(GenerateSummary {
        manifest_path,
        counts: Split::ALL.map(|s| manifest.count(s)),
    })
}

/// Trains a detector and writes `model.bundle`, `train_log.csv` and
/// `val_scores.csv` under `out_dir`.
pub fn cmd_train(
    cfg: &PipelineConfig,
    manifest_path: &Path,
    subset: ModalityMask,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let manifest = DatasetManifest::load(manifest_path)?;
    for split in [Split::Train, Split::Val] {
        if manifest.count(split) == 0 {
            return Err(Error::EmptyInput(format!("manifest has no {split} split")));
        }
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let train_val = DatasetManifest {
        entries: manifest.entries.iter().filter(|e| e.split != Split::Eval).cloned().collect(),
    };
    let mut data = FeatureSet::load_entries(cfg, &train_val, root, None)?;
    data.manifest_hash = sha256_hex(manifest.to_text().as_bytes());
    let outcome = train_detector(cfg, &data, subset)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    outcome.bundle.save(&out_dir.join("model.bundle"))?;
    let log_path = out_dir.join("train_log.csv");
    fs::write(&log_path, outcome.bundle.train_log.to_csv()).map_err(|e| Error::io(&log_path, e))?;
    let mut val = String::from("score\n");
    for s in &outcome.val_scores {
        val.push_str(&format!("{s}\n"));
    }
    let val_path = out_dir.join("val_scores.csv");
    fs::write(&val_path, val).map_err(|e| Error::io(&val_path, e))?;
    Ok(outcome)
}

/// Scores the eval split under each mask and writes per-group reports
/// plus `table.csv` / `table.txt`.
pub fn cmd_eval(
    bundle: &ModelBundle,
    manifest_path: &Path,
    masks: &[ModalityMask],
    out_dir: &Path,
) -> Result<ComparisonTable> {
    let manifest = DatasetManifest::load(manifest_path)?;
    if manifest.count(Split::Eval) == 0 {
        return Err(Error::EmptyInput("manifest has no eval split".into()));
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let data = FeatureSet::load_entries(&bundle.config, &manifest, root, Some(Split::Eval))?;
    evaluate_masks(bundle, &data, masks, out_dir)
}

pub fn evaluate_masks(
    bundle: &ModelBundle,
    data: &FeatureSet,
    masks: &[ModalityMask],
    out_dir: &Path,
) -> Result<ComparisonTable> {
    let conditions: Vec<Condition> = Condition::ALL
        .into_iter()
        .filter(|c| data.split(Split::Eval).any(|e| e.condition == *c))
        .collect();
    let mut table = ComparisonTable::new(conditions);
    for &mask in masks {
        let scored = score_split(bundle, data, Split::Eval, mask)?;
        let reports = grouped_reports(&scored, bundle.threshold(), &bundle.config)?;
        write_grouped(&out_dir.join(mask.to_string()), &reports)?;
        let per_condition = condition_reports(&scored, bundle.threshold(), &bundle.config)?;
        table.push_row(mask.display_name(), &per_condition);
    }
    write_table(out_dir, &table)?;
    Ok(table)
}

pub fn write_table(out_dir: &Path, table: &ComparisonTable) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join("table.csv");
    fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let txt = out_dir.join("table.txt");
    fs::write(&txt, table.to_string()).map_err(|e| Error::io(&txt, e))
}

/// Runs the modality ablation on a manifest and writes the table and
/// per-mask reports.
pub fn cmd_ablate(
    cfg: &PipelineConfig,
    manifest_path: &Path,
    masks: &[ModalityMask],
    out_dir: &Path,
) -> Result<AblationResult> {
    let data = FeatureSet::load(cfg, manifest_path)?;
    let result = run_ablation(cfg, &data, masks)?;
    for (mask, per_condition) in &result.reports {
        for (c, r) in per_condition {
            write_report(&out_dir.join(mask.to_string()).join(c.name()), c.name(), r)?;
        }
    }
    write_table(out_dir, &result.table)?;
    Ok(result)
}
