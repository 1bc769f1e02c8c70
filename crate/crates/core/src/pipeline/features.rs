use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::dsp::MfccExtractor;
use crate::error::{Error, Result};
use crate::fusion::{build_fusion, FusionOperator, ModalityMask};
use crate::streamsync::{
    minmax_normalize, synchronize, tick_label, ChannelRanges, Condition, Label, Modality, SensorFrame,
    StreamSet, SyncConfig,
};

/// Per-tick features. Image embeddings are final; MFCC and force-torque
/// values are raw until a [`Normalizer`] is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickFeatures {
    pub tick_time: f64,
    pub label: Label,
    pub stale: bool,
    pub rgb_embed: Vec<f64>,
    pub depth_embed: Vec<f64>,
    pub mfcc: Vec<f64>,
    pub ft: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFeatures {
    pub episode_id: String,
    pub condition: Condition,
    pub object: String,
    pub ticks: Vec<TickFeatures>,
}

/// Sync, MFCC and image embedding for single ticks or whole episodes.
#[derive(Debug)]
pub struct FeatureExtractor {
    fusion: FusionOperator,
    mfcc: MfccExtractor,
    sync: SyncConfig,
    depth_range: [f64; 2],
    window: f64,
}

impl FeatureExtractor {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        Self::with_fusion(cfg, build_fusion(&cfg.fusion_spec())?)
    }

    pub fn with_fusion(cfg: &PipelineConfig, fusion: FusionOperator) -> Result<Self> {
        Ok(FeatureExtractor {
            fusion,
            mfcc: MfccExtractor::new(cfg.mfcc.clone())?,
            sync: cfg.sync.clone(),
            depth_range: cfg.features.depth_range_mm,
            window: cfg.features.abnormal_window,
        })
    }

    pub fn fusion(&self) -> &FusionOperator {
        &self.fusion
    }

    pub fn sync_config(&self) -> &SyncConfig {
        &self.sync
    }

    /// Features for one aligned tick, frames in modality order.
    pub fn tick(&self, tick_time: f64, frames: [&SensorFrame; 4], stale: bool, label: Label) -> Result<TickFeatures> {
        let rgb: Vec<f64> = frames[Modality::Rgb.index()]
            .payload
            .iter()
            .map(|&v| minmax_normalize(v, 0.0, 255.0))
            .collect::<Result<_>>()?;
        let [lo, hi] = self.depth_range;
        let depth: Vec<f64> = frames[Modality::Depth.index()]
            .payload
            .iter()
            .map(|&v| minmax_normalize(v, lo, hi))
            .collect::<Result<_>>()?;
        let mfcc = self
            .mfcc
            .compute(&frames[Modality::Audio.index()].payload, tick_time)?
            .coefficients;
        let ft = frames[Modality::ForceTorque.index()].payload.clone();
        Ok(TickFeatures {
            tick_time,
            label,
            stale,
            rgb_embed: self.fusion.embed(Modality::Rgb, &rgb)?,
            depth_embed: self.fusion.embed(Modality::Depth, &depth)?,
            mfcc,
            ft,
        })
    }

    /// Synchronizes and labels a whole episode. Ticks past the abnormal
    /// window are dropped.
    pub fn episode(&self, streams: &StreamSet, object: &str) -> Result<EpisodeFeatures> {
        let synced = synchronize(streams, &self.sync)?;
        let mut ticks = Vec::with_capacity(synced.ticks.len());
        for t in &synced.ticks {
            let Some(label) = tick_label(t.tick_time, streams.drop_time, self.window) else {
                continue;
            };
            ticks.push(self.tick(t.tick_time, t.frames, t.is_stale(), label)?);
        }
        Ok(EpisodeFeatures {
            episode_id: streams.episode_id.clone(),
            condition: streams.condition,
            object: object.to_string(),
            ticks,
        })
    }
}

/// Per-modality centering and scaling of the fused embeddings. Each block
/// is centered per dimension and divided by its RMS standard deviation, so
/// every modality enters the autoencoder with unit mean variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockBalance {
    /// Per-dimension means, one vector per modality in `Modality::ALL` order.
    pub mean: Vec<Vec<f64>>,
    pub scale: [f64; 4],
}

/// MFCC and force-torque channel ranges fitted on training ticks, plus the
/// optional block balance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mfcc: ChannelRanges,
    pub ft: ChannelRanges,
    pub balance: Option<BlockBalance>,
}

impl Normalizer {
    pub fn fit<'a>(ticks: impl IntoIterator<Item = &'a TickFeatures> + Clone) -> Result<Self> {
        Ok(Normalizer {
            mfcc: ChannelRanges::fit(ticks.clone().into_iter().map(|t| t.mfcc.as_slice()))?,
            ft: ChannelRanges::fit(ticks.into_iter().map(|t| t.ft.as_slice()))?,
            balance: None,
        })
    }

    /// Fits the block balance on the same training ticks.
    pub fn with_balance<'a>(
        mut self,
        ticks: impl IntoIterator<Item = &'a TickFeatures>,
        fusion: &FusionOperator,
    ) -> Result<Self> {
        self.balance = None;
        let mut sum: Vec<Vec<f64>> = Modality::ALL.iter().map(|&m| vec![0.0; fusion.embed_dim(m)]).collect();
        let mut sq = sum.clone();
        let mut n = 0usize;
        for t in ticks {
            for m in Modality::ALL {
                let e = self.embed(t, fusion, m)?;
                for ((s, q), v) in sum[m.index()].iter_mut().zip(sq[m.index()].iter_mut()).zip(e) {
                    *s += v;
                    *q += v * v;
                }
            }
            n += 1;
        }
        if n < 2 {
            return Err(Error::EmptyInput("block balance needs at least 2 ticks".into()));
        }
        let nf = n as f64;
        let mut scale = [1.0; 4];
        let mean: Vec<Vec<f64>> = sum.iter().map(|s| s.iter().map(|v| v / nf).collect()).collect();
        for m in Modality::ALL {
            let i = m.index();
            let var: f64 = sq[i]
                .iter()
                .zip(&mean[i])
                .map(|(q, mu)| (q / nf - mu * mu).max(0.0))
                .sum::<f64>()
                / mean[i].len() as f64;
            if var > 0.0 && var.is_finite() {
                scale[i] = var.sqrt();
            }
        }
        self.balance = Some(BlockBalance { mean, scale });
        Ok(self)
    }

    fn embed(&self, tick: &TickFeatures, fusion: &FusionOperator, m: Modality) -> Result<Vec<f64>> {
        Ok(match m {
            Modality::Rgb => tick.rgb_embed.clone(),
            Modality::Depth => tick.depth_embed.clone(),
            Modality::Audio => fusion.embed(m, &self.mfcc.apply(&tick.mfcc)?)?,
            Modality::ForceTorque => fusion.embed(m, &self.ft.apply(&tick.ft)?)?,
        })
    }
}

/// Autoencoder input for one tick: embeddings of the modalities in
/// `subset`, balanced if the normalizer carries a balance, with those
/// outside `mask` zeroed.
pub fn fused_input(
    tick: &TickFeatures,
    normalizer: &Normalizer,
    fusion: &FusionOperator,
    subset: ModalityMask,
    mask: ModalityMask,
) -> Result<Vec<f64>> {
    if !subset.iter().any(|m| mask.contains(m)) {
        return Err(Error::Config(format!(
            "mask {mask} excludes every modality of the model ({subset})"
        )));
    }
    let mut out = Vec::with_capacity(fusion.subset_dim(subset));
    for m in subset.iter() {
        if !mask.contains(m) {
            out.extend(std::iter::repeat_n(0.0, fusion.embed_dim(m)));
            continue;
        }
        let e = normalizer.embed(tick, fusion, m)?;
        match &normalizer.balance {
            Some(b) => {
                let (mean, scale) = (&b.mean[m.index()], b.scale[m.index()]);
                if mean.len() != e.len() {
                    return Err(Error::ShapeMismatch {
                        modality: m,
                        expected: vec![mean.len()],
                        got: vec![e.len()],
                    });
                }
                out.extend(e.iter().zip(mean).map(|(v, mu)| (v - mu) / scale));
            }
            None => out.extend(e),
        }
    }
    Ok(out)
}

/// Stacks [`fused_input`] rows.
pub fn input_matrix<'a>(
    ticks: impl ExactSizeIterator<Item = &'a TickFeatures>,
    normalizer: &Normalizer,
    fusion: &FusionOperator,
    subset: ModalityMask,
    mask: ModalityMask,
) -> Result<Array2<f64>> {
    let width = fusion.subset_dim(subset);
    let mut x = Array2::zeros((ticks.len(), width));
    for (i, t) in ticks.enumerate() {
        let row = fused_input(t, normalizer, fusion, subset, mask)?;
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
    }
    Ok(x)
}
