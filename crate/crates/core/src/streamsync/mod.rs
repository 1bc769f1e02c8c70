//! Stream ingestion, alignment to a fixed-rate grid, and min-max scaling.
//!
//! Raw sensors tick at their own rates (10 Hz cameras, 100 Hz force-torque,
//! audio in chunks). [`synchronize`] picks, for every grid tick inside the
//! common time span, the frame of each modality nearest to the tick. A frame
//! farther than `stale_tolerance` grid periods away is considered stale and
//! the previous tick's frame is held instead. [`Synchronizer`] does the same
//! incrementally for live streams and produces identical selections.

mod io;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    format_frame_ndjson, parse_frame_ndjson, read_episode, read_stream_file, write_episode,
    write_stream_file, EpisodeManifest, SampleType, STREAM_MAGIC, STREAM_VERSION,
};

/// Slack for comparisons of float timestamps against grid points.
pub const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "rgb")]
    Rgb,
    #[serde(rename = "depth")]
    Depth,
    #[serde(rename = "audio")]
    Audio,
    #[serde(rename = "ft")]
    ForceTorque,
}

impl Modality {
    /// Fixed order used everywhere modalities are concatenated.
    pub const ALL: [Modality; 4] = [
        Modality::Rgb,
        Modality::Depth,
        Modality::Audio,
        Modality::ForceTorque,
    ];

    pub fn index(self) -> usize {
        match self {
            Modality::Rgb => 0,
            Modality::Depth => 1,
            Modality::Audio => 2,
            Modality::ForceTorque => 3,
        }
    }

    pub fn from_index(index: usize) -> Option<Modality> {
        Modality::ALL.get(index).copied()
    }

    /// Rank of the payload shape descriptor.
    pub fn shape_rank(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Depth => 2,
            Modality::Audio | Modality::ForceTorque => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Audio => "audio",
            Modality::ForceTorque => "ft",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rgb" => Ok(Modality::Rgb),
            "depth" => Ok(Modality::Depth),
            "audio" | "mic" => Ok(Modality::Audio),
            "ft" | "force-torque" | "forcetorque" => Ok(Modality::ForceTorque),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Standing,
    Moving,
    Vad,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Standing, Condition::Moving, Condition::Vad];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Standing => "standing",
            Condition::Moving => "moving",
            Condition::Vad => "vad",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "standing" => Ok(Condition::Standing),
            "moving" => Ok(Condition::Moving),
            "vad" => Ok(Condition::Vad),
            other => Err(Error::Config(format!("unknown condition '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn is_abnormal(self) -> bool {
        self == Label::Abnormal
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }
}

/// One timestamped reading from one sensor.
///
/// Payload layouts: Rgb `H×W×3` (row-major, channel last, 0..255), Depth
/// `H×W` in millimeters, Audio a PCM chunk in `[-1, 1]`, ForceTorque
/// `[Fx, Fy, Fz, Tx, Ty, Tz]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub modality: Modality,
    pub timestamp: f64,
    pub shape: Vec<usize>,
    pub payload: Vec<f64>,
}

impl SensorFrame {
    pub fn new(
        modality: Modality,
        timestamp: f64,
        shape: Vec<usize>,
        payload: Vec<f64>,
    ) -> Result<Self> {
        let frame = SensorFrame {
            modality,
            timestamp,
            shape,
            payload,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.timestamp.is_finite() {
            return Err(Error::NonFinite(format!("{} timestamp", self.modality)));
        }
        if self.shape.len() != self.modality.shape_rank() {
            return Err(Error::Format(format!(
                "{} frame shape {:?} must have rank {}",
                self.modality,
                self.shape,
                self.modality.shape_rank()
            )));
        }
        if self.modality == Modality::Rgb && self.shape[2] != 3 {
            return Err(Error::Format(format!(
                "rgb frame must have 3 channels, got shape {:?}",
                self.shape
            )));
        }
        let expected: usize = self.shape.iter().product();
        if expected != self.payload.len() {
            return Err(Error::Format(format!(
                "{} payload has {} values but shape {:?} needs {}",
                self.modality,
                self.payload.len(),
                self.shape,
                expected
            )));
        }
        Ok(())
    }
}

/// All raw streams of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSet {
    pub episode_id: String,
    pub condition: Condition,
    pub drop_time: Option<f64>,
    streams: [Vec<SensorFrame>; 4],
}

impl StreamSet {
    pub fn new(
        episode_id: impl Into<String>,
        condition: Condition,
        drop_time: Option<f64>,
    ) -> Self {
        StreamSet {
            episode_id: episode_id.into(),
            condition,
            drop_time,
            streams: Default::default(),
        }
    }

    /// Appends a frame to its modality's stream. Ordering is checked by
    /// [`StreamSet::validate`].
    pub fn push(&mut self, frame: SensorFrame) {
        self.streams[frame.modality.index()].push(frame);
    }

    pub fn with_stream(mut self, modality: Modality, frames: Vec<SensorFrame>) -> Self {
        self.streams[modality.index()] = frames;
        self
    }

    pub fn stream(&self, modality: Modality) -> &[SensorFrame] {
        &self.streams[modality.index()]
    }

    /// Frames of every modality merged by timestamp (ties keep modality order).
    pub fn interleaved(&self) -> Vec<&SensorFrame> {
        let mut all: Vec<&SensorFrame> = self.streams.iter().flatten().collect();
        all.sort_by(|a, b| {
            a.timestamp
                .total_cmp(&b.timestamp)
                .then(a.modality.cmp(&b.modality))
        });
        all
    }

    /// `(first, last)` timestamp of one modality.
    pub fn span(&self, modality: Modality) -> Option<(f64, f64)> {
        let s = self.stream(modality);
        Some((s.first()?.timestamp, s.last()?.timestamp))
    }

    pub fn validate(&self) -> Result<()> {
        for modality in Modality::ALL {
            let stream = self.stream(modality);
            if stream.is_empty() {
                return Err(Error::MissingModality(modality));
            }
            check_stream(modality, stream)?;
        }
        if let Some(drop) = self.drop_time {
            let (start, end) = self.common_span().expect("streams checked non-empty");
            if !(drop >= start - TIME_EPS && drop <= end + TIME_EPS) {
                return Err(Error::Format(format!(
                    "drop time {drop} outside covered span [{start}, {end}]"
                )));
            }
        }
        Ok(())
    }

    /// Intersection of all modality time spans.
    pub fn common_span(&self) -> Option<(f64, f64)> {
        let mut start = f64::NEG_INFINITY;
        let mut end = f64::INFINITY;
        for modality in Modality::ALL {
            let (s, e) = self.span(modality)?;
            start = start.max(s);
            end = end.min(e);
        }
        Some((start, end))
    }
}

fn check_stream(modality: Modality, stream: &[SensorFrame]) -> Result<()> {
    for (index, frame) in stream.iter().enumerate() {
        if frame.modality != modality {
            return Err(Error::Format(format!(
                "{} frame found in {} stream",
                frame.modality, modality
            )));
        }
        frame.validate()?;
        if index > 0 {
            let previous = stream[index - 1].timestamp;
            if frame.timestamp <= previous {
                return Err(Error::NonMonotoneTimestamps {
                    modality,
                    index,
                    previous,
                    current: frame.timestamp,
                });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncConfig {
    pub grid_hz: f64,
    /// Maximum distance from a tick to its frame, in grid periods.
    pub stale_tolerance: f64,
    /// Hold the previous tick's frame when the nearest one is stale;
    /// otherwise stale ticks are dropped.
    pub hold_last: bool,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig {
            grid_hz: 10.0,
            stale_tolerance: 0.5,
            hold_last: true,
        }
    }
}

impl SyncConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grid_hz > 0.0 && self.grid_hz.is_finite()) {
            return Err(Error::Config(format!("grid_hz must be > 0, got {}", self.grid_hz)));
        }
        if !(self.stale_tolerance >= 0.0) {
            return Err(Error::Config("stale_tolerance must be >= 0".into()));
        }
        Ok(())
    }

    pub fn tick_time(&self, k: i64) -> f64 {
        k as f64 / self.grid_hz
    }

    fn max_distance(&self) -> f64 {
        self.stale_tolerance / self.grid_hz + TIME_EPS
    }

    fn first_tick(&self, start: f64) -> i64 {
        (start * self.grid_hz - TIME_EPS).ceil() as i64
    }

    fn last_tick(&self, end: f64) -> i64 {
        (end * self.grid_hz + TIME_EPS).floor() as i64
    }
}

/// Index of the frame nearest to `t`; ties (within [`TIME_EPS`]) go to the
/// earlier frame.
pub fn nearest_frame(timestamps: impl Fn(usize) -> f64, len: usize, t: f64) -> Option<(usize, f64)> {
    if len == 0 {
        return None;
    }
    // first index with timestamp >= t
    let (mut lo, mut hi) = (0usize, len);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if timestamps(mid) < t {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    let after = lo;
    match (after.checked_sub(1), after < len) {
        (Some(prev), true) => {
            let d_prev = t - timestamps(prev);
            let d_next = timestamps(after) - t;
            if d_next < d_prev - TIME_EPS {
                Some((after, d_next))
            } else {
                Some((prev, d_prev))
            }
        }
        (Some(prev), false) => Some((prev, t - timestamps(prev))),
        (None, _) => Some((after, timestamps(after) - t)),
    }
}

/// One grid tick with the frame chosen for each modality.
#[derive(Debug, Clone)]
pub struct AlignedTick<'a> {
    pub tick_time: f64,
    pub frames: [&'a SensorFrame; 4],
    /// Modalities whose frame was held over from an earlier tick.
    pub stale: [bool; 4],
}

impl<'a> AlignedTick<'a> {
    pub fn frame(&self, modality: Modality) -> &'a SensorFrame {
        self.frames[modality.index()]
    }

    pub fn is_stale(&self) -> bool {
        self.stale.iter().any(|&s| s)
    }
}

#[derive(Debug, Clone)]
pub struct SyncOutput<'a> {
    pub ticks: Vec<AlignedTick<'a>>,
    /// Grid ticks inside the common span that had no usable frame for some
    /// modality and nothing to hold.
    pub dropped_ticks: usize,
}

impl SyncOutput<'_> {
    pub fn stale_ticks(&self) -> usize {
        self.ticks.iter().filter(|t| t.is_stale()).count()
    }
}

/// Aligns every modality of `streams` onto the `cfg.grid_hz` grid.
pub fn synchronize<'a>(streams: &'a StreamSet, cfg: &SyncConfig) -> Result<SyncOutput<'a>> {
    cfg.validate()?;
    streams.validate()?;
    let (start, end) = streams.common_span().expect("validated non-empty");
    let max_dist = cfg.max_distance();
    let mut held: [Option<usize>; 4] = [None; 4];
    let mut ticks = Vec::new();
    let mut dropped_ticks = 0;

    for k in cfg.first_tick(start)..=cfg.last_tick(end) {
        let t = cfg.tick_time(k);
        let mut chosen = [0usize; 4];
        let mut stale = [false; 4];
        let mut usable = true;
        for modality in Modality::ALL {
            let m = modality.index();
            let stream = streams.stream(modality);
            let (idx, dist) =
                nearest_frame(|i| stream[i].timestamp, stream.len(), t).expect("non-empty");
            if dist <= max_dist {
                chosen[m] = idx;
                held[m] = Some(idx);
            } else if let (true, Some(h)) = (cfg.hold_last, held[m]) {
                chosen[m] = h;
                stale[m] = true;
            } else {
                usable = false;
            }
        }
        if !usable {
            dropped_ticks += 1;
            continue;
        }
        let frames = std::array::from_fn(|m| &streams.streams[m][chosen[m]]);
        ticks.push(AlignedTick {
            tick_time: t,
            frames,
            stale,
        });
    }
    Ok(SyncOutput {
        ticks,
        dropped_ticks,
    })
}

/// A grid tick emitted by [`Synchronizer`], owning its frames.
#[derive(Debug, Clone, PartialEq)]
pub struct OwnedTick {
    pub tick_time: f64,
    pub frames: [SensorFrame; 4],
    pub stale: [bool; 4],
}

impl OwnedTick {
    pub fn frame(&self, modality: Modality) -> &SensorFrame {
        &self.frames[modality.index()]
    }

    pub fn is_stale(&self) -> bool {
        self.stale.iter().any(|&s| s)
    }
}

/// Incremental version of [`synchronize`] for interleaved live frames.
///
/// A tick is emitted as soon as every modality has a frame at or after it,
/// so no later frame could be nearer. Frames must arrive in increasing
/// timestamp order within each modality.
#[derive(Debug)]
pub struct Synchronizer {
    cfg: SyncConfig,
    buffers: [VecDeque<SensorFrame>; 4],
    first_ts: [Option<f64>; 4],
    last_ts: [Option<f64>; 4],
    held: [Option<SensorFrame>; 4],
    next_tick: Option<i64>,
    dropped_ticks: usize,
}

impl Synchronizer {
    pub fn new(cfg: SyncConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Synchronizer {
            cfg,
            buffers: Default::default(),
            first_ts: [None; 4],
            last_ts: [None; 4],
            held: Default::default(),
            next_tick: None,
            dropped_ticks: 0,
        })
    }

    pub fn dropped_ticks(&self) -> usize {
        self.dropped_ticks
    }

    /// Adds one frame and returns every tick that became complete.
    pub fn push(&mut self, frame: SensorFrame) -> Result<Vec<OwnedTick>> {
        frame.validate()?;
        let m = frame.modality.index();
        if let Some(previous) = self.last_ts[m] {
            if frame.timestamp <= previous {
                return Err(Error::NonMonotoneTimestamps {
                    modality: frame.modality,
                    index: 0,
                    previous,
                    current: frame.timestamp,
                });
            }
        }
        self.first_ts[m].get_or_insert(frame.timestamp);
        self.last_ts[m] = Some(frame.timestamp);
        self.buffers[m].push_back(frame);
        Ok(self.drain(false))
    }

    /// Flushes ticks that are inside the common span at end of input.
    pub fn finish(&mut self) -> Vec<OwnedTick> {
        self.drain(true)
    }

    fn drain(&mut self, at_end: bool) -> Vec<OwnedTick> {
        let mut out = Vec::new();
        if self.first_ts.iter().any(Option::is_none) {
            return out;
        }
        let start = self.first_ts.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let k = *self.next_tick.get_or_insert_with(|| self.cfg.first_tick(start));
        let mut k = k;
        loop {
            let t = self.cfg.tick_time(k);
            let ready = self
                .last_ts
                .iter()
                .all(|last| last.is_some_and(|l| l >= t));
            let in_span = self
                .last_ts
                .iter()
                .all(|last| last.is_some_and(|l| self.cfg.last_tick(l) >= k));
            if !(ready || (at_end && in_span)) {
                break;
            }
            if let Some(tick) = self.decide(t) {
                out.push(tick);
            }
            k += 1;
        }
        self.next_tick = Some(k);
        out
    }

    fn decide(&mut self, t: f64) -> Option<OwnedTick> {
        let max_dist = self.cfg.max_distance();
        let mut chosen: [Option<SensorFrame>; 4] = Default::default();
        let mut stale = [false; 4];
        let mut usable = true;
        for m in 0..4 {
            let buf = &mut self.buffers[m];
            let (idx, dist) =
                nearest_frame(|i| buf[i].timestamp, buf.len(), t).expect("non-empty buffer");
            if dist <= max_dist {
                self.held[m] = Some(buf[idx].clone());
                chosen[m] = Some(buf[idx].clone());
            } else if let (true, Some(h)) = (self.cfg.hold_last, &self.held[m]) {
                chosen[m] = Some(h.clone());
                stale[m] = true;
            } else {
                usable = false;
            }
            // Later ticks never pick a frame before the one preceding t.
            let keep_from = (0..buf.len())
                .find(|&i| buf[i].timestamp >= t)
                .unwrap_or(buf.len())
                .saturating_sub(1);
            buf.drain(..keep_from);
        }
        if !usable {
            self.dropped_ticks += 1;
            return None;
        }
        let frames = chosen.map(|f| f.expect("all modalities chosen"));
        Some(OwnedTick {
            tick_time: t,
            frames,
            stale,
        })
    }
}

/// Scales `value` from `[lo, hi]` to `[0, 1]`, clamping out-of-range input.
pub fn minmax_normalize(value: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(lo < hi) {
        return Err(Error::DegenerateRange { lo, hi });
    }
    Ok((value.clamp(lo, hi) - lo) / (hi - lo))
}

/// Label for a tick given the drop time: Normal up to and including the
/// drop, Abnormal within `window` after it, `None` (excluded) beyond.
pub fn tick_label(tick_time: f64, drop_time: Option<f64>, window: f64) -> Option<Label> {
    match drop_time {
        None => Some(Label::Normal),
        Some(drop) if tick_time <= drop + TIME_EPS => Some(Label::Normal),
        Some(drop) if window > 0.0 && tick_time <= drop + window + TIME_EPS => {
            Some(Label::Abnormal)
        }
        Some(_) => None,
    }
}

/// One aligned, normalized grid tick ready for fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncedSample {
    pub tick_time: f64,
    /// `H×W×3`, channel last, in `[0, 1]`.
    pub rgb: Vec<f64>,
    /// `H×W` in `[0, 1]`.
    pub depth: Vec<f64>,
    pub mfcc: Vec<f64>,
    pub ft: Vec<f64>,
    pub label: Label,
}

impl SyncedSample {
    pub fn modality(&self, modality: Modality) -> &[f64] {
        match modality {
            Modality::Rgb => &self.rgb,
            Modality::Depth => &self.depth,
            Modality::Audio => &self.mfcc,
            Modality::ForceTorque => &self.ft,
        }
    }

    pub fn modality_mut(&mut self, modality: Modality) -> &mut Vec<f64> {
        match modality {
            Modality::Rgb => &mut self.rgb,
            Modality::Depth => &mut self.depth,
            Modality::Audio => &mut self.mfcc,
            Modality::ForceTorque => &mut self.ft,
        }
    }
}

/// Applies [`tick_label`] to each sample, dropping ticks past the window.
pub fn label_ticks(
    samples: Vec<SyncedSample>,
    drop_time: Option<f64>,
    window: f64,
) -> Vec<SyncedSample> {
    samples
        .into_iter()
        .filter_map(|mut s| {
            s.label = tick_label(s.tick_time, drop_time, window)?;
            Some(s)
        })
        .collect()
}

/// Per-channel `[lo, hi]` ranges fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRanges {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ChannelRanges {
    /// Column-wise min/max. Constant channels are widened to `[v, v + 1]`
    /// so that scaling stays defined.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut lo: Vec<f64> = Vec::new();
        let mut hi: Vec<f64> = Vec::new();
        for row in rows {
            if lo.is_empty() {
                lo = vec![f64::INFINITY; row.len()];
                hi = vec![f64::NEG_INFINITY; row.len()];
            }
            if row.len() != lo.len() {
                return Err(Error::DimensionMismatch {
                    expected: lo.len(),
                    got: row.len(),
                });
            }
            for (c, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite("range fitting input".into()));
                }
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        if lo.is_empty() {
            return Err(Error::EmptyInput("no rows to fit normalization ranges".into()));
        }
        for (l, h) in lo.iter().zip(hi.iter_mut()) {
            if *h <= *l {
                *h = *l + 1.0;
            }
        }
        Ok(ChannelRanges { lo, hi })
    }

    pub fn apply(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.lo.len() {
            return Err(Error::DimensionMismatch {
                expected: self.lo.len(),
                got: values.len(),
            });
        }
        values
            .iter()
            .enumerate()
            .map(|(c, &v)| minmax_normalize(v, self.lo[c], self.hi[c]))
            .collect()
    }
}
