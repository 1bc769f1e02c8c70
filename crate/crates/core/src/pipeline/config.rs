use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AeArchitecture, TrainConfig};
use crate::dsp::MfccConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionSpec;
use crate::metrics::MetricsConfig;
use crate::nap::NapConfig;
use crate::seed::{derive_seed, sha256_hex};
use crate::simulator::SimulatorConfig;
use crate::streamsync::SyncConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    pub depth: usize,
    pub bottleneck: usize,
    /// Explicit encoder widths; geometric interpolation when absent.
    pub widths: Option<Vec<usize>>,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            depth: 5,
            bottleneck: 100,
            widths: None,
            leaky_slope: 0.01,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Depth values are scaled from this range, in mm.
    pub depth_range_mm: [f64; 2],
    /// Ticks within this many seconds after the drop are abnormal.
    pub abnormal_window: f64,
    /// Center each fused dimension and scale each modality block to unit
    /// mean variance, using normal training ticks.
    pub balance_modalities: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            depth_range_mm: [0.0, 4000.0],
            abnormal_window: 0.5,
            balance_modalities: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Train one detector per modality set. When false, the multimodal
    /// detector is evaluated with the other modalities zeroed.
    pub retrain_per_modality: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            retrain_per_modality: true,
        }
    }
}

/// Whole-pipeline configuration, stored as TOML.
///
/// Component seeds (`fusion.seed`, `train.init_seed`, `train.shuffle_seed`,
/// `simulator.seed`) are ignored: they are always derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: u64,
    pub sync: SyncConfig,
    pub mfcc: MfccConfig,
    pub fusion: FusionSpec,
    pub autoencoder: AeConfig,
    pub train: TrainConfig,
    pub nap: NapConfig,
    pub metrics: MetricsConfig,
    pub features: FeatureConfig,
    pub ablation: AblationConfig,
    pub simulator: SimulatorConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            version: CONFIG_VERSION,
            seed: 0,
            sync: SyncConfig::default(),
            mfcc: MfccConfig::default(),
            fusion: FusionSpec::default(),
            autoencoder: AeConfig::default(),
            train: TrainConfig::default(),
            nap: NapConfig::default(),
            metrics: MetricsConfig::default(),
            features: FeatureConfig::default(),
            ablation: AblationConfig::default(),
            simulator: SimulatorConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.sync.validate()?;
        self.mfcc.validate()?;
        self.train.validate()?;
        self.simulator.validate()?;
        if self.fusion.n_mfcc != self.mfcc.n_mfcc {
            return Err(Error::Config(format!(
                "fusion.n_mfcc = {} but mfcc.n_mfcc = {}",
                self.fusion.n_mfcc, self.mfcc.n_mfcc
            )));
        }
        let t = &self.simulator.timing;
        if self.fusion.image_height != t.image_height || self.fusion.image_width != t.image_width {
            return Err(Error::Config("fusion image size differs from simulator image size".into()));
        }
        let [lo, hi] = self.features.depth_range_mm;
        if !(lo < hi) {
            return Err(Error::Config("features.depth_range_mm must be increasing".into()));
        }
        if !(self.features.abnormal_window > 0.0) {
            return Err(Error::Config("features.abnormal_window must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.nap.threshold_quantile) {
            return Err(Error::Config("nap.threshold_quantile must be in [0, 1]".into()));
        }
        // fusion output must feed the autoencoder
        crate::fusion::build_fusion(&self.fusion_spec())?;
        self.architecture(self.fusion.output_dim).validate()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn sub_seed(&self, name: &str) -> u64 {
        derive_seed(self.seed, name)
    }

    pub fn fusion_spec(&self) -> FusionSpec {
        FusionSpec {
            seed: self.sub_seed("fusion"),
            ..self.fusion.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            init_seed: self.sub_seed("init"),
            shuffle_seed: self.sub_seed("shuffle"),
            ..self.train.clone()
        }
    }

    pub fn simulator_config(&self) -> SimulatorConfig {
        SimulatorConfig {
            seed: self.sub_seed("simulator"),
            ..self.simulator.clone()
        }
    }

    pub fn architecture(&self, input_dim: usize) -> AeArchitecture {
        let a = &self.autoencoder;
        let mut arch = AeArchitecture::geometric(input_dim, a.bottleneck, a.depth);
        if let Some(w) = &a.widths {
            arch.encoder_widths = w.clone();
        }
        arch.leaky_slope = a.leaky_slope;
        arch.bn_eps = a.bn_eps;
        arch.bn_momentum = a.bn_momentum;
        arch
    }
}
