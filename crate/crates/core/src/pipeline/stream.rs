use std::io::{BufRead, Write};
use std::time::{Duration, Instant};

use ndarray::ArrayView2;
use serde::Serialize;

use super::bundle::ModelBundle;
use super::features::{fused_input, FeatureExtractor};
use crate::error::{Error, Result};
use crate::fusion::ModalityMask;
use crate::streamsync::{parse_frame_ndjson, Label, OwnedTick, SensorFrame, Synchronizer};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamRecord {
    pub tick_time: f64,
    pub score: f64,
    pub predicted: Label,
}

/// Wall time of each scoring stage for one tick.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTiming {
    /// Sync output to autoencoder input: MFCC, embeddings, normalization.
    pub fusion: Duration,
    /// Forward pass and re-encoding.
    pub autoencoder: Duration,
    pub nap: Duration,
}

impl StageTiming {
    pub fn total(&self) -> Duration {
        self.fusion + self.autoencoder + self.nap
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatencySummary {
    pub ticks: usize,
    pub fusion_ms: f64,
    pub autoencoder_ms: f64,
    pub nap_ms: f64,
    pub total_ms: f64,
}

fn median_ms(mut v: Vec<Duration>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort();
    let n = v.len();
    let mid = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    };
    mid.as_secs_f64() * 1e3
}

/// Medians of each stage over all ticks.
pub fn summarize(timings: &[StageTiming]) -> LatencySummary {
    LatencySummary {
        ticks: timings.len(),
        fusion_ms: median_ms(timings.iter().map(|t| t.fusion).collect()),
        autoencoder_ms: median_ms(timings.iter().map(|t| t.autoencoder).collect()),
        nap_ms: median_ms(timings.iter().map(|t| t.nap).collect()),
        total_ms: median_ms(timings.iter().map(|t| t.total()).collect()),
    }
}

impl std::fmt::Display for LatencySummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "median latency over {} ticks: fusion {:.3} ms, autoencoder {:.3} ms, nap {:.3} ms, total {:.3} ms",
            self.ticks, self.fusion_ms, self.autoencoder_ms, self.nap_ms, self.total_ms
        )
    }
}

/// Online scorer: frames in, scored ticks out.
pub struct StreamScorer<'a> {
    bundle: &'a ModelBundle,
    extractor: FeatureExtractor,
    sync: Synchronizer,
    mask: ModalityMask,
    timings: Vec<StageTiming>,
}

impl<'a> StreamScorer<'a> {
    pub fn new(bundle: &'a ModelBundle, mask: ModalityMask) -> Result<Self> {
        let extractor = FeatureExtractor::with_fusion(&bundle.config, bundle.fusion.clone())?;
        let sync = Synchronizer::new(bundle.config.sync.clone())?;
        Ok(StreamScorer {
            bundle,
            extractor,
            sync,
            mask,
            timings: Vec::new(),
        })
    }

    pub fn push(&mut self, frame: SensorFrame) -> Result<Vec<StreamRecord>> {
        let ticks = self.sync.push(frame)?;
        self.score(ticks)
    }

    pub fn finish(&mut self) -> Result<Vec<StreamRecord>> {
        let ticks = self.sync.finish();
        self.score(ticks)
    }

    pub fn timings(&self) -> &[StageTiming] {
        &self.timings
    }

    pub fn dropped_ticks(&self) -> usize {
        self.sync.dropped_ticks()
    }

    fn score(&mut self, ticks: Vec<OwnedTick>) -> Result<Vec<StreamRecord>> {
        let mut out = Vec::with_capacity(ticks.len());
        for tick in ticks {
            let b = self.bundle;
            let t0 = Instant::now();
            let frames = [&tick.frames[0], &tick.frames[1], &tick.frames[2], &tick.frames[3]];
            let features = self.extractor.tick(tick.tick_time, frames, tick.is_stale(), Label::Normal)?;
            let x = fused_input(&features, &b.normalizer, &b.fusion, b.subset, self.mask)?;
            let t1 = Instant::now();
            let view = ArrayView2::from_shape((1, x.len()), &x).expect("contiguous row");
            let d = b.ae.pathway_errors(view, b.nap.include_input_block())?;
            let t2 = Instant::now();
            let score = b.nap.score_batch(d.view())?[0];
            let predicted = b.classify(score)?;
            let t3 = Instant::now();
            self.timings.push(StageTiming {
                fusion: t1 - t0,
                autoencoder: t2 - t1,
                nap: t3 - t2,
            });
            out.push(StreamRecord {
                tick_time: tick.tick_time,
                score,
                predicted,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StreamStats {
    pub records: usize,
    pub malformed: usize,
    pub dropped_ticks: usize,
    pub latency: LatencySummary,
}

/// Reads NDJSON frames, writes one NDJSON record per completed tick.
/// Unparseable lines are logged and skipped.
pub fn cmd_score_stream(
    bundle: &ModelBundle,
    mask: ModalityMask,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<StreamStats> {
    let mut scorer = StreamScorer::new(bundle, mask)?;
    let mut stats = StreamStats::default();
    let mut emit = |records: Vec<StreamRecord>, stats: &mut StreamStats| -> Result<()> {
        for r in records {
            let line = serde_json::to_string(&r).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(output, "{line}").map_err(|e| Error::io("<stdout>", e))?;
            stats.records += 1;
        }
        Ok(())
    };
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let frame = match parse_frame_ndjson(&line) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("line {}: skipped: {e}", n + 1);
                stats.malformed += 1;
                continue;
            }
        };
        match scorer.push(frame) {
            Ok(records) => emit(records, &mut stats)?,
            Err(e @ (Error::NonMonotoneTimestamps { .. } | Error::ShapeMismatch { .. })) => {
                log::warn!("line {}: skipped: {e}", n + 1);
                stats.malformed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    let records = scorer.finish()?;
    emit(records, &mut stats)?;
    stats.dropped_ticks = scorer.dropped_ticks();
    stats.latency = summarize(scorer.timings());
    Ok(stats)
}
