//! Normalized aggregation along pathway (NAP) scoring.
//!
//! Training pathway errors `d(s)` are stacked into `D`, centered by their
//! column mean `μ`, and decomposed `D̄ = U Σ Vᵀ`. A query is scored as
//! `‖(d(x) − μ)ᵀ V Σ⁻¹‖²`. Singular values below `truncation · σ_max` are
//! treated as zero and their directions ignored.
//!
//! With [`Whitening::Direct`] Σ is used as-is, so the projections of the
//! training rows are the columns of `U`: each kept direction has unit sum
//! of squares and the training scores sum to the kept rank.
//! [`Whitening::SampleCovariance`] divides Σ by `sqrt(n − 1)` instead,
//! which makes each direction's sample variance one.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::quantile;
use crate::streamsync::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Whitening {
    Direct,
    SampleCovariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NapConfig {
    /// Relative singular-value cutoff.
    pub truncation: f64,
    pub whitening: Whitening,
    /// Prepend the input-space error `x − x̂` to the pathway errors.
    pub include_input_block: bool,
    /// Quantile of validation scores used as the decision threshold.
    pub threshold_quantile: f64,
}

impl Default for NapConfig {
    fn default() -> Self {
        NapConfig {
            truncation: 1e-6,
            whitening: Whitening::Direct,
            include_input_block: false,
            threshold_quantile: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NapModel {
    mu: Vec<f64>,
    /// Right singular vectors, `width × min(rows, width)`, columns ordered by
    /// decreasing singular value.
    v: Array2<f64>,
    /// Singular values of the centered training matrix, before inversion.
    sigma: Vec<f64>,
    sigma_inv: Vec<f64>,
    kept_rank: usize,
    n_rows: usize,
    whitening: Whitening,
    include_input_block: bool,
    threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub tick_time: f64,
    pub score: f64,
    pub label: Label,
    pub predicted: Option<Label>,
}

/// Fits the whitening model on training pathway errors (one row per sample).
pub fn fit(d_rows: ArrayView2<f64>, cfg: &NapConfig) -> Result<NapModel> {
    let (rows, width) = d_rows.dim();
    if rows < 2 {
        return Err(Error::EmptyInput(format!("NAP fit needs at least 2 rows, got {rows}")));
    }
    if width == 0 {
        return Err(Error::EmptyInput("NAP fit with zero-width rows".into()));
    }
    if d_rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("NAP training matrix".into()));
    }
    if !(cfg.truncation >= 0.0) {
        return Err(Error::Config("nap: truncation must be >= 0".into()));
    }
    let mu = d_rows.mean_axis(Axis(0)).expect("rows >= 2");
    let centered = faer::Mat::<f64>::from_fn(rows, width, |i, j| d_rows[[i, j]] - mu[j]);
    let svd = centered
        .thin_svd()
        .map_err(|e| Error::Format(format!("SVD did not converge: {e:?}")))?;
    let s = svd.S().column_vector();
    let v_mat = svd.V();
    let k = s.nrows();

    // faer returns non-increasing singular values; sort defensively anyway
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let sigma: Vec<f64> = order.iter().map(|&i| s[i]).collect();
    let v = Array2::from_shape_fn((width, k), |(r, c)| v_mat[(r, order[c])]);

    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let cutoff = cfg.truncation * sigma_max;
    let scale = match cfg.whitening {
        Whitening::Direct => 1.0,
        Whitening::SampleCovariance => ((rows - 1) as f64).sqrt(),
    };
    let sigma_inv: Vec<f64> = sigma
        .iter()
        .map(|&sv| if sv > 0.0 && sv >= cutoff { scale / sv } else { 0.0 })
        .collect();
    let kept_rank = sigma_inv.iter().filter(|&&x| x > 0.0).count();
    Ok(NapModel {
        mu: mu.to_vec(),
        v,
        sigma,
        sigma_inv,
        kept_rank,
        n_rows: rows,
        whitening: cfg.whitening,
        include_input_block: cfg.include_input_block,
        threshold: None,
    })
}

impl NapModel {
    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn v(&self) -> ArrayView2<'_, f64> {
        self.v.view()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.sigma
    }

    pub fn sigma_inv(&self) -> &[f64] {
        &self.sigma_inv
    }

    pub fn kept_rank(&self) -> usize {
        self.kept_rank
    }

    pub fn width(&self) -> usize {
        self.mu.len()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn whitening(&self) -> Whitening {
        self.whitening
    }

    pub fn include_input_block(&self) -> bool {
        self.include_input_block
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn set_threshold(&mut self, threshold: f64) {
        self.threshold = Some(threshold);
    }

    /// Whitened projections `(d − μ)ᵀ V Σ⁻¹` onto the kept directions.
    pub fn project_batch(&self, d: ArrayView2<f64>) -> Result<Array2<f64>> {
        if d.ncols() != self.width() {
            return Err(Error::DimensionMismatch {
                expected: self.width(),
                got: d.ncols(),
            });
        }
        let mu = Array1::from(self.mu.clone());
        let centered = &d - &mu;
        let kept = self.v.slice(ndarray::s![.., ..self.kept_rank]);
        let mut p = centered.dot(&kept);
        let inv = Array1::from(self.sigma_inv[..self.kept_rank].to_vec());
        p *= &inv;
        Ok(p)
    }

    pub fn score_batch(&self, d: ArrayView2<f64>) -> Result<Vec<f64>> {
        let p = self.project_batch(d)?;
        Ok(p.rows().into_iter().map(|r| r.dot(&r)).collect())
    }

    pub fn score(&self, d: &[f64]) -> Result<f64> {
        let view = ArrayView2::from_shape((1, d.len()), d).expect("contiguous row");
        Ok(self.score_batch(view)?[0])
    }

    /// Abnormal iff `score > threshold`.
    pub fn classify(&self, score: f64) -> Result<Label> {
        let threshold = self.threshold.ok_or(Error::MissingThreshold)?;
        Ok(if score > threshold {
            Label::Abnormal
        } else {
            Label::Normal
        })
    }
}

/// Threshold at quantile `q` of validation scores (linear interpolation
/// between order statistics).
pub fn fit_threshold(val_scores: &[f64], q: f64) -> Result<f64> {
    quantile(val_scores, q)
}

/// Baseline score: squared input-space reconstruction error `‖x − x̂‖²`.
pub fn reconstruction_score(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: x_hat.len(),
        });
    }
    Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn square() -> Array2<f64> {
        array![[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]]
    }

    #[test]
    fn hand_example_fit_and_score() {
        let model = fit(square().view(), &NapConfig::default()).unwrap();
        assert_eq!(model.mu(), &[1.0, 1.0]);
        for &s in model.singular_values() {
            assert!((s - 2.0).abs() < 1e-12);
        }
        assert_eq!(model.kept_rank(), 2);
        assert!((model.score(&[3.0, 1.0]).unwrap() - 1.0).abs() < 1e-9);
        assert!(model.score(&[1.0, 1.0]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn identical_rows_truncate_everything() {
        let d = array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]];
        let model = fit(d.view(), &NapConfig::default()).unwrap();
        assert_eq!(model.kept_rank(), 0);
        assert_eq!(model.score(&[5.0, 5.0, 5.0]).unwrap(), 0.0);
    }

    #[test]
    fn fit_errors() {
        let one = array![[1.0, 2.0]];
        assert!(matches!(fit(one.view(), &NapConfig::default()), Err(Error::EmptyInput(_))));
        let nan = array![[1.0, f64::NAN], [0.0, 0.0]];
        assert!(matches!(fit(nan.view(), &NapConfig::default()), Err(Error::NonFinite(_))));
        let model = fit(square().view(), &NapConfig::default()).unwrap();
        assert!(matches!(model.score(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn threshold_and_classify() {
        let scores: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!((fit_threshold(&scores, 0.9).unwrap() - 9.1).abs() < 1e-12);
        assert_eq!(fit_threshold(&[4.0; 7], 0.9).unwrap(), 4.0);
        assert_eq!(fit_threshold(&scores, 1.0).unwrap(), 10.0);
        assert!(fit_threshold(&[], 0.9).is_err());

        let mut model = fit(square().view(), &NapConfig::default()).unwrap();
        assert!(matches!(model.classify(1.0), Err(Error::MissingThreshold)));
        model.set_threshold(2.5);
        assert_eq!(model.classify(2.5).unwrap(), Label::Normal);
        assert_eq!(model.classify(2.5 + 1e-12).unwrap(), Label::Abnormal);
        assert_eq!(model.classify(0.0).unwrap(), Label::Normal);
    }

    #[test]
    fn sample_covariance_scales_scores() {
        let direct = fit(square().view(), &NapConfig::default()).unwrap();
        let sample = fit(
            square().view(),
            &NapConfig {
                whitening: Whitening::SampleCovariance,
                ..NapConfig::default()
            },
        )
        .unwrap();
        let q = [3.0, 0.5];
        let ratio = sample.score(&q).unwrap() / direct.score(&q).unwrap();
        assert!((ratio - 3.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_baseline() {
        assert_eq!(reconstruction_score(&[1.0, 2.0], &[0.0, 4.0]).unwrap(), 5.0);
    }
}
