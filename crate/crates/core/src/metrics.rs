//! Ranking and threshold metrics with Abnormal as the positive class.
//!
//! AUROC is the Mann–Whitney statistic (ties get half credit). AUPRC uses
//! the step convention `Σ (R_k − R_{k−1}) · P_k` over distinct score
//! thresholds taken in decreasing order, with no interpolation.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::streamsync::{Condition, Label};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub histogram_bins: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { histogram_bins: 20 }
    }
}

/// Quantile with linear interpolation between order statistics
/// (position `q · (n − 1)`).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("quantile of an empty sequence".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("quantile {q} outside [0, 1]")));
    }
    check_finite(values)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

fn check_finite(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    Ok(())
}

fn class_counts(scores: &[f64], labels: &[Label]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    check_finite(scores)?;
    let pos = labels.iter().filter(|l| l.is_abnormal()).count();
    Ok((pos, labels.len() - pos))
}

fn require_two_classes(pos: usize, neg: usize) -> Result<()> {
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {pos} abnormal and {neg} normal"
        )));
    }
    Ok(())
}

/// Indices sorted by decreasing score, grouped into runs of equal scores.
fn descending_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

pub fn auroc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    require_two_classes(pos, neg)?;
    // midranks, ascending
    let mut groups = descending_groups(scores);
    groups.reverse();
    let mut rank_sum = 0.0;
    let mut next_rank = 1usize;
    for g in &groups {
        let mid = next_rank as f64 + (g.len() - 1) as f64 / 2.0;
        let n_pos = g.iter().filter(|&&i| labels[i].is_abnormal()).count();
        rank_sum += mid * n_pos as f64;
        next_rank += g.len();
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per distinct
/// threshold.
pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = class_counts(scores, labels)?;
    require_two_classes(pos, neg)?;
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for g in descending_groups(scores) {
        for &i in &g {
            if labels[i].is_abnormal() {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Trapezoidal area under a piecewise-linear curve.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Precision–recall points `(recall, precision)`, one per distinct threshold.
pub fn pr_curve(scores: &[f64], labels: &[Label]) -> Result<Vec<(f64, f64)>> {
    let (pos, _) = class_counts(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("no abnormal samples".into()));
    }
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for g in descending_groups(scores) {
        seen += g.len();
        tp += g.iter().filter(|&&i| labels[i].is_abnormal()).count();
        points.push((tp as f64 / pos as f64, tp as f64 / seen as f64));
    }
    Ok(points)
}

pub fn auprc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let points = pr_curve(scores, labels)?;
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// F1 with `score > threshold` predicted Abnormal.
pub fn f1_at_threshold(scores: &[f64], labels: &[Label], threshold: f64) -> Result<f64> {
    class_counts(scores, labels)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, l) in scores.iter().zip(labels) {
        match (s > threshold, l.is_abnormal()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub normal: Vec<usize>,
    pub abnormal: Vec<usize>,
}

/// Equal-width bins over the full score range; the last bin is closed.
pub fn histogram(scores: &[f64], labels: &[Label], bins: usize) -> Result<Histogram> {
    class_counts(scores, labels)?;
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if scores.is_empty() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut normal = vec![0; bins];
    let mut abnormal = vec![0; bins];
    for (&s, l) in scores.iter().zip(labels) {
        let b = (((s - lo) / width).floor() as usize).min(bins - 1);
        if l.is_abnormal() {
            abnormal[b] += 1;
        } else {
            normal[b] += 1;
        }
    }
    Ok(Histogram {
        edges,
        normal,
        abnormal,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub auprc: f64,
    /// Present when a threshold was supplied.
    pub f1: Option<f64>,
    pub threshold: Option<f64>,
    pub roc_points: Vec<(f64, f64)>,
    pub prc_points: Vec<(f64, f64)>,
    pub histogram: Histogram,
    pub positives: usize,
    pub negatives: usize,
}

pub fn evaluate(
    scores: &[f64],
    labels: &[Label],
    threshold: Option<f64>,
    cfg: &MetricsConfig,
) -> Result<EvalReport> {
    let (positives, negatives) = class_counts(scores, labels)?;
    require_two_classes(positives, negatives)?;
    Ok(EvalReport {
        auroc: auroc(scores, labels)?,
        auprc: auprc(scores, labels)?,
        f1: threshold
            .map(|t| f1_at_threshold(scores, labels, t))
            .transpose()?,
        threshold,
        roc_points: roc_curve(scores, labels)?,
        prc_points: pr_curve(scores, labels)?,
        histogram: histogram(scores, labels, cfg.histogram_bins)?,
        positives,
        negatives,
    })
}

/// Evaluates each group separately. Errors carry the group name.
pub fn report<K: Ord + Clone + fmt::Display>(
    items: impl IntoIterator<Item = (K, f64, Label)>,
    threshold: Option<f64>,
    cfg: &MetricsConfig,
) -> Result<BTreeMap<K, EvalReport>> {
    let mut grouped: BTreeMap<K, (Vec<f64>, Vec<Label>)> = BTreeMap::new();
    for (key, score, label) in items {
        let entry = grouped.entry(key).or_default();
        entry.0.push(score);
        entry.1.push(label);
    }
    grouped
        .into_iter()
        .map(|(key, (scores, labels))| {
            let r = evaluate(&scores, &labels, threshold, cfg).map_err(|e| Error::Group {
                group: key.to_string(),
                source: Box::new(e),
            })?;
            Ok((key, r))
        })
        .collect()
}

fn write_pairs(path: &Path, header: [&str; 2], points: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for (a, b) in points {
        w.write_record([a.to_string(), b.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Reads a two-column curve CSV written by [`write_report`].
pub fn read_curve_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("{}: bad row {rec:?}", path.display())))
        };
        out.push((parse(0)?, parse(1)?));
    }
    Ok(out)
}

impl EvalReport {
    pub fn summary(&self, name: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "group: {name}");
        let _ = writeln!(s, "abnormal: {}", self.positives);
        let _ = writeln!(s, "normal: {}", self.negatives);
        let _ = writeln!(s, "auroc: {:.6}", self.auroc);
        let _ = writeln!(s, "auprc: {:.6}", self.auprc);
        match (self.f1, self.threshold) {
            (Some(f1), Some(t)) => {
                let _ = writeln!(s, "threshold: {t}");
                let _ = writeln!(s, "f1: {f1:.6}");
            }
            _ => {
                let _ = writeln!(s, "f1: n/a");
            }
        }
        s
    }
}

/// Writes `dir/{roc.csv, prc.csv, hist.csv, summary.txt}`.
pub fn write_report(dir: &Path, name: &str, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pairs(&dir.join("roc.csv"), ["fpr", "tpr"], &report.roc_points)?;
    write_pairs(&dir.join("prc.csv"), ["recall", "precision"], &report.prc_points)?;
    let hist_path = dir.join("hist.csv");
    let mut w = csv::Writer::from_path(&hist_path).map_err(|e| csv_err(&hist_path, e))?;
    w.write_record(["bin_lo", "bin_hi", "normal", "abnormal"])
        .map_err(|e| csv_err(&hist_path, e))?;
    let h = &report.histogram;
    for b in 0..h.normal.len() {
        w.write_record([
            h.edges[b].to_string(),
            h.edges[b + 1].to_string(),
            h.normal[b].to_string(),
            h.abnormal[b].to_string(),
        ])
        .map_err(|e| csv_err(&hist_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&hist_path, e))?;
    let summary = dir.join("summary.txt");
    fs::write(&summary, report.summary(name)).map_err(|e| Error::io(&summary, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub auroc: f64,
    pub auprc: f64,
    pub f1: Option<f64>,
}

impl From<&EvalReport> for TableCell {
    fn from(r: &EvalReport) -> Self {
        TableCell {
            auroc: r.auroc,
            auprc: r.auprc,
            f1: r.f1,
        }
    }
}

/// Modality sets as rows, condition × metric as columns.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub conditions: Vec<Condition>,
    pub rows: Vec<(String, Vec<Option<TableCell>>)>,
}

impl ComparisonTable {
    pub fn new(conditions: Vec<Condition>) -> Self {
        ComparisonTable {
            conditions,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, name: impl Into<String>, per_condition: &BTreeMap<Condition, EvalReport>) {
        let cells = self
            .conditions
            .iter()
            .map(|c| per_condition.get(c).map(TableCell::from))
            .collect();
        self.rows.push((name.into(), cells));
    }

    pub fn cell(&self, row: &str, condition: Condition) -> Option<TableCell> {
        let col = self.conditions.iter().position(|&c| c == condition)?;
        self.rows.iter().find(|(n, _)| n == row)?.1[col]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("modality");
        for metric in ["auroc", "auprc", "f1"] {
            for c in &self.conditions {
                let _ = write!(out, ",{metric}_{}", c.name());
            }
        }
        out.push('\n');
        for (name, cells) in &self.rows {
            out.push_str(name);
            for pick in [0, 1, 2] {
                for cell in cells {
                    let v = cell.and_then(|c| match pick {
                        0 => Some(c.auroc),
                        1 => Some(c.auprc),
                        _ => c.f1,
                    });
                    match v {
                        Some(v) => {
                            let _ = write!(out, ",{v}");
                        }
                        None => out.push(','),
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<14}", "")?;
        for metric in ["AUROC", "AUPRC", "F1"] {
            for c in &self.conditions {
                write!(f, " {:>10}", format!("{metric}/{}", short(*c)))?;
            }
        }
        writeln!(f)?;
        for (name, cells) in &self.rows {
            write!(f, "{name:<14}")?;
            for pick in [0, 1, 2] {
                for cell in cells {
                    let v = cell.and_then(|c| match pick {
                        0 => Some(c.auroc),
                        1 => Some(c.auprc),
                        _ => c.f1,
                    });
                    match v {
                        Some(v) => write!(f, " {v:>10.4}")?,
                        None => write!(f, " {:>10}", "-")?,
                    }
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn short(c: Condition) -> &'static str {
    match c {
        Condition::Standing => "Std",
        Condition::Moving => "Mov",
        Condition::Vad => "VAD",
    }
}
