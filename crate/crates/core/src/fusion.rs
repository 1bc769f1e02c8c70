//! Fixed convolutional integration of the four modalities.
//!
//! Each modality runs through its own stack of convolution + average pooling
//! layers with random, never-trained weights, zero bias and no activation.
//! The whole stage is therefore a linear map. Embeddings are concatenated in
//! the fixed order Rgb ‖ Depth ‖ Audio ‖ ForceTorque.
//!
//! Weights are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` by a
//! `ChaCha8Rng` seeded with `FusionSpec::seed`, layer by layer in modality
//! order, each weight tensor in `(out, in, kh, kw)` row-major order.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::streamsync::{Label, Modality, SyncedSample};

/// One convolution followed by non-overlapping average pooling. For the
/// 1-D modalities only the width dimension is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool: usize,
}

impl ConvLayerSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, padding: usize, pool: usize) -> Self {
        ConvLayerSpec {
            out_channels,
            kernel,
            stride,
            padding,
            pool,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    UniformFanIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSpec {
    pub seed: u64,
    pub image_height: usize,
    pub image_width: usize,
    pub n_mfcc: usize,
    pub ft_dim: usize,
    pub rgb: Vec<ConvLayerSpec>,
    pub depth: Vec<ConvLayerSpec>,
    pub audio: Vec<ConvLayerSpec>,
    pub ft: Vec<ConvLayerSpec>,
    pub output_dim: usize,
    pub init: InitScheme,
}

impl Default for FusionSpec {
    fn default() -> Self {
        let image = vec![ConvLayerSpec::new(8, 3, 1, 1, 2), ConvLayerSpec::new(8, 3, 1, 1, 4)];
        FusionSpec {
            seed: 0,
            image_height: 32,
            image_width: 32,
            n_mfcc: 13,
            ft_dim: 6,
            rgb: image.clone(),
            depth: image,
            audio: vec![ConvLayerSpec::new(16, 6, 1, 0, 1)],
            ft: vec![ConvLayerSpec::new(32, 3, 1, 0, 1)],
            output_dim: 512,
            init: InitScheme::UniformFanIn,
        }
    }
}

impl FusionSpec {
    pub fn stack(&self, modality: Modality) -> &[ConvLayerSpec] {
        match modality {
            Modality::Rgb => &self.rgb,
            Modality::Depth => &self.depth,
            Modality::Audio => &self.audio,
            Modality::ForceTorque => &self.ft,
        }
    }

    /// `(channels, height, width)` of the modality input tensor.
    pub fn input_shape(&self, modality: Modality) -> (usize, usize, usize) {
        match modality {
            Modality::Rgb => (3, self.image_height, self.image_width),
            Modality::Depth => (1, self.image_height, self.image_width),
            Modality::Audio => (1, 1, self.n_mfcc),
            Modality::ForceTorque => (1, 1, self.ft_dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConvLayer {
    in_channels: usize,
    out_channels: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    pool_h: usize,
    pool_w: usize,
    /// `out × (in·kh·kw)`
    weight: Array2<f64>,
}

impl ConvLayer {
    fn conv_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad_h - self.kh) / self.stride + 1,
            (w + 2 * self.pad_w - self.kw) / self.stride + 1,
        )
    }

    fn output_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let (ch, cw) = self.conv_dims(h, w);
        (self.out_channels, ch / self.pool_h, cw / self.pool_w)
    }

    /// `input` is `(in, h, w)` row-major; returns `(out, h', w')` row-major.
    fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (ch, cw) = self.conv_dims(h, w);
        let k = self.in_channels * self.kh * self.kw;
        let mut cols = Array2::<f64>::zeros((k, ch * cw));
        for c in 0..self.in_channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..ch {
                        let iy = (oy * self.stride + ky) as isize - self.pad_h as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..cw {
                            let ix = (ox * self.stride + kx) as isize - self.pad_w as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, oy * cw + ox]] =
                                input[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
        let conv = self.weight.dot(&cols);
        avg_pool(conv.view(), ch, cw, self.pool_h, self.pool_w)
    }
}

fn avg_pool(conv: ArrayView2<f64>, h: usize, w: usize, ph: usize, pw: usize) -> Vec<f64> {
    let (oh, ow) = (h / ph, w / pw);
    let norm = 1.0 / (ph * pw) as f64;
    let mut out = Vec::with_capacity(conv.nrows() * oh * ow);
    for row in conv.rows() {
        for py in 0..oh {
            for px in 0..ow {
                let mut s = 0.0;
                for dy in 0..ph {
                    for dx in 0..pw {
                        s += row[(py * ph + dy) * w + px * pw + dx];
                    }
                }
                out.push(s * norm);
            }
        }
    }
    out
}

/// Built, immutable fusion weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOperator {
    spec: FusionSpec,
    stacks: [Vec<ConvLayer>; 4],
    embed_dims: [usize; 4],
}

/// Flattened fusion output for one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedVector {
    pub tick_time: f64,
    pub label: Label,
    pub values: Vec<f64>,
}

pub fn build_fusion(spec: &FusionSpec) -> Result<FusionOperator> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut stacks: [Vec<ConvLayer>; 4] = Default::default();
    let mut embed_dims = [0usize; 4];
    for modality in Modality::ALL {
        let (mut c, mut h, mut w) = spec.input_shape(modality);
        let is_image = matches!(modality, Modality::Rgb | Modality::Depth);
        if c * h * w == 0 {
            return Err(Error::Config(format!("fusion: {modality} input is empty")));
        }
        if spec.stack(modality).is_empty() {
            return Err(Error::Config(format!("fusion: {modality} has no conv layers")));
        }
        for (li, ls) in spec.stack(modality).iter().enumerate() {
            if ls.out_channels == 0 || ls.kernel == 0 || ls.stride == 0 || ls.pool == 0 {
                return Err(Error::Config(format!(
                    "fusion: {modality} layer {li} has a zero-sized parameter"
                )));
            }
            let kh = if is_image { ls.kernel } else { 1 };
            let pad_h = if is_image { ls.padding } else { 0 };
            if h + 2 * pad_h < kh || w + 2 * ls.padding < ls.kernel {
                return Err(Error::Config(format!(
                    "fusion: {modality} layer {li} kernel {} does not fit input {h}x{w}",
                    ls.kernel
                )));
            }
            let fan_in = c * kh * ls.kernel;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new(-bound, bound);
            let weight = Array2::from_shape_simple_fn((ls.out_channels, fan_in), || {
                dist.sample(&mut rng)
            });
            let layer = ConvLayer {
                in_channels: c,
                out_channels: ls.out_channels,
                kh,
                kw: ls.kernel,
                stride: ls.stride,
                pad_h,
                pad_w: ls.padding,
                pool_h: if is_image { ls.pool } else { 1 },
                pool_w: ls.pool,
                weight,
            };
            let (oc, oh, ow) = layer.output_shape(h, w);
            if oh == 0 || ow == 0 {
                return Err(Error::Config(format!(
                    "fusion: {modality} layer {li} pools the input away"
                )));
            }
            (c, h, w) = (oc, oh, ow);
            stacks[modality.index()].push(layer);
        }
        embed_dims[modality.index()] = c * h * w;
    }
    let total: usize = embed_dims.iter().sum();
    if total != spec.output_dim {
        return Err(Error::Config(format!(
            "fusion: output_dim {} but modality embeddings sum to {total} {:?}",
            spec.output_dim, embed_dims
        )));
    }
    Ok(FusionOperator {
        spec: spec.clone(),
        stacks,
        embed_dims,
    })
}

impl FusionOperator {
    pub fn spec(&self) -> &FusionSpec {
        &self.spec
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn embed_dim(&self, modality: Modality) -> usize {
        self.embed_dims[modality.index()]
    }

    /// Sum of embedding widths of the selected modalities.
    pub fn subset_dim(&self, mask: ModalityMask) -> usize {
        mask.iter().map(|m| self.embed_dim(m)).sum()
    }

    /// Weight tensors of one modality, `out × (in·kh·kw)` per layer.
    pub fn weights(&self, modality: Modality) -> Vec<ArrayView2<'_, f64>> {
        self.stacks[modality.index()]
            .iter()
            .map(|l| l.weight.view())
            .collect()
    }

    /// Runs one modality's conv stack. `input` uses the sensor layout:
    /// RGB `H×W×3` channel last, everything else flat.
    pub fn embed(&self, modality: Modality, input: &[f64]) -> Result<Vec<f64>> {
        let (c, h, w) = self.spec.input_shape(modality);
        if input.len() != c * h * w {
            return Err(Error::ShapeMismatch {
                modality,
                expected: vec![c, h, w],
                got: vec![input.len()],
            });
        }
        let mut x: Vec<f64> = if modality == Modality::Rgb {
            // HWC -> CHW
            let mut chw = vec![0.0; input.len()];
            for y in 0..h {
                for xx in 0..w {
                    for ch in 0..3 {
                        chw[(ch * h + y) * w + xx] = input[(y * w + xx) * 3 + ch];
                    }
                }
            }
            chw
        } else {
            input.to_vec()
        };
        let (mut hh, mut ww) = (h, w);
        for layer in &self.stacks[modality.index()] {
            x = layer.forward(&x, hh, ww);
            let (_, oh, ow) = layer.output_shape(hh, ww);
            (hh, ww) = (oh, ow);
        }
        Ok(x)
    }

    /// Full multimodal fusion.
    pub fn fuse(&self, sample: &SyncedSample) -> Result<FusedVector> {
        self.fuse_masked(sample, ModalityMask::ALL)
    }

    /// Fusion with excluded modalities zeroed at the input. The output width
    /// stays `output_dim`; excluded blocks are exactly zero.
    pub fn fuse_masked(&self, sample: &SyncedSample, mask: ModalityMask) -> Result<FusedVector> {
        let mut values = Vec::with_capacity(self.output_dim());
        for modality in Modality::ALL {
            if mask.contains(modality) {
                values.extend(self.embed(modality, sample.modality(modality))?);
            } else {
                values.extend(std::iter::repeat_n(0.0, self.embed_dim(modality)));
            }
        }
        Ok(FusedVector {
            tick_time: sample.tick_time,
            label: sample.label,
            values,
        })
    }

    /// Concatenates only the selected modalities' embeddings.
    pub fn fuse_subset(&self, sample: &SyncedSample, mask: ModalityMask) -> Result<FusedVector> {
        let mut values = Vec::with_capacity(self.subset_dim(mask));
        for modality in mask.iter() {
            values.extend(self.embed(modality, sample.modality(modality))?);
        }
        Ok(FusedVector {
            tick_time: sample.tick_time,
            label: sample.label,
            values,
        })
    }
}

/// A non-empty set of modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask([bool; 4]);

impl ModalityMask {
    pub const ALL: ModalityMask = ModalityMask([true; 4]);

    pub fn only(modality: Modality) -> Self {
        let mut bits = [false; 4];
        bits[modality.index()] = true;
        ModalityMask(bits)
    }

    pub fn from_modalities(modalities: &[Modality]) -> Result<Self> {
        let mut bits = [false; 4];
        for m in modalities {
            bits[m.index()] = true;
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::Config("modality mask excludes every modality".into()));
        }
        Ok(ModalityMask(bits))
    }

    pub fn contains(self, modality: Modality) -> bool {
        self.0[modality.index()]
    }

    pub fn is_all(self) -> bool {
        self == Self::ALL
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |&m| self.contains(m))
    }

    /// Row name used in ablation tables.
    pub fn display_name(self) -> String {
        if self.is_all() {
            return "Multimodal".into();
        }
        self.iter()
            .map(|m| match m {
                Modality::Rgb => "RGB",
                Modality::Depth => "Depth",
                Modality::Audio => "MIC",
                Modality::ForceTorque => "Force-Torque",
            })
            .collect::<Vec<_>>()
            .join("+")
    }

    /// The five rows of the standard ablation: all, ft, rgb, depth, mic.
    pub fn ablation_rows() -> [ModalityMask; 5] {
        [
            ModalityMask::ALL,
            ModalityMask::only(Modality::ForceTorque),
            ModalityMask::only(Modality::Rgb),
            ModalityMask::only(Modality::Depth),
            ModalityMask::only(Modality::Audio),
        ]
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_all() {
            return f.write_str("all");
        }
        let names: Vec<&str> = self
            .iter()
            .map(|m| if m == Modality::Audio { "mic" } else { m.name() })
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for ModalityMask {
    type Err = Error;

    /// `all` or a comma-separated list such as `ft,rgb`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(ModalityMask::ALL);
        }
        let modalities = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Modality>>>()?;
        ModalityMask::from_modalities(&modalities)
    }
}
