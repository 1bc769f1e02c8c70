use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::features::{input_matrix, Normalizer, TickFeatures};
use crate::autoencoder::{AeModel, TrainLog};
use crate::error::{Error, Result};
use crate::fusion::{build_fusion, FusionOperator, ModalityMask};
use crate::nap::NapModel;
use crate::streamsync::Label;

pub const BUNDLE_MAGIC: &[u8; 8] = b"SLIPNAP\0";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub manifest_hash: String,
    pub created_unix: u64,
}

/// Everything needed to score new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    pub config: PipelineConfig,
    /// Modalities the autoencoder was trained on.
    pub subset: ModalityMask,
    pub normalizer: Normalizer,
    pub fusion: FusionOperator,
    pub ae: AeModel,
    pub nap: NapModel,
    pub train_log: TrainLog,
    pub provenance: Provenance,
}

impl ModelBundle {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = BUNDLE_MAGIC.to_vec();
        out.extend(BUNDLE_VERSION.to_le_bytes());
        bincode::serialize_into(&mut out, self).map_err(|e| Error::Format(format!("bundle encode: {e}")))?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != BUNDLE_MAGIC {
            return Err(Error::Format("not a model bundle".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != BUNDLE_VERSION {
            return Err(Error::Format(format!(
                "bundle version {version} unsupported (expected {BUNDLE_VERSION})"
            )));
        }
        let bundle: ModelBundle =
            bincode::deserialize(&bytes[12..]).map_err(|e| Error::Format(format!("bundle decode: {e}")))?;
        if bundle.version != version {
            return Err(Error::Format("bundle header and body versions differ".into()));
        }
        // weights must be what the stored spec generates
        if build_fusion(bundle.fusion.spec())? != bundle.fusion {
            return Err(Error::Format("fusion weights do not match their spec".into()));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn threshold(&self) -> Option<f64> {
        self.nap.threshold()
    }

    /// Autoencoder input rows for `ticks` under an evaluation `mask`.
    pub fn input_matrix<'a>(
        &self,
        ticks: impl ExactSizeIterator<Item = &'a TickFeatures>,
        mask: ModalityMask,
    ) -> Result<Array2<f64>> {
        input_matrix(ticks, &self.normalizer, &self.fusion, self.subset, mask)
    }

    /// NAP scores of autoencoder input rows.
    pub fn score_inputs(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let d = self.ae.pathway_errors(x, self.nap.include_input_block())?;
        self.nap.score_batch(d.view())
    }

    pub fn score_ticks(&self, ticks: &[&TickFeatures], mask: ModalityMask) -> Result<Vec<f64>> {
        let mut scores = Vec::with_capacity(ticks.len());
        for chunk in ticks.chunks(1024) {
            let x = self.input_matrix(chunk.iter().copied(), mask)?;
            scores.extend(self.score_inputs(x.view())?);
        }
        Ok(scores)
    }

    pub fn classify(&self, score: f64) -> Result<Label> {
        self.nap.classify(score)
    }
}
