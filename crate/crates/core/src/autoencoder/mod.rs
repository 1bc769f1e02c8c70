//! Symmetric fully-connected autoencoder and its pathway activations.
//!
//! Every layer is `Dense → BatchNorm → LeakyReLU` except the final decoder
//! layer, which is a bare `Dense`. The hidden activation of encoder layer
//! `l` is the block output after its activation. [`AeModel::pathway`]
//! encodes `x`, decodes to `x̂`, re-encodes `x̂` with the same encoder and
//! returns both activation stacks and their difference.

mod layers;
mod train;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use layers::{BatchNorm, BatchNormCache, BatchNormGrads, Dense, DenseGrads, LeakyRelu};
pub use train::{train, train_matrix, EpochLog, TrainConfig, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeArchitecture {
    pub input_dim: usize,
    /// Encoder output widths; the last one is the bottleneck.
    pub encoder_widths: Vec<usize>,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl AeArchitecture {
    /// Widths interpolated geometrically from `input_dim` down to
    /// `bottleneck` over `depth` layers.
    pub fn geometric(input_dim: usize, bottleneck: usize, depth: usize) -> Self {
        let ratio = (bottleneck as f64 / input_dim as f64).powf(1.0 / depth.max(1) as f64);
        let mut encoder_widths: Vec<usize> = (1..depth)
            .map(|i| ((input_dim as f64) * ratio.powi(i as i32)).round().max(1.0) as usize)
            .collect();
        encoder_widths.push(bottleneck);
        AeArchitecture {
            input_dim,
            encoder_widths,
            leaky_slope: 0.01,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn bottleneck(&self) -> usize {
        *self.encoder_widths.last().expect("validated")
    }

    /// Mirror of the encoder, ending at `input_dim`.
    pub fn decoder_widths(&self) -> Vec<usize> {
        let mut widths: Vec<usize> = self.encoder_widths.iter().rev().skip(1).copied().collect();
        widths.push(self.input_dim);
        widths
    }

    /// Length of the concatenated hidden activations.
    pub fn pathway_len(&self) -> usize {
        self.encoder_widths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::Config(format!(
                "autoencoder: invalid widths input {} encoder {:?}",
                self.input_dim, self.encoder_widths
            )));
        }
        if !(self.leaky_slope >= 0.0 && self.bn_eps > 0.0 && (0.0..=1.0).contains(&self.bn_momentum)) {
            return Err(Error::Config("autoencoder: bad slope/eps/momentum".into()));
        }
        Ok(())
    }
}

/// One `Dense` with optional batch norm and activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub dense: Dense,
    pub norm: Option<BatchNorm>,
    pub act: Option<LeakyRelu>,
}

impl Block {
    fn forward_eval(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = self.dense.forward(x);
        if let Some(bn) = &self.norm {
            y = bn.forward_eval(y.view());
        }
        if let Some(act) = &self.act {
            y = act.forward(y.view());
        }
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeModel {
    arch: AeArchitecture,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    mode: Mode,
}

/// Reconstruction plus the encoder activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub x_hat: Vec<f64>,
    pub hidden: Vec<Vec<f64>>,
}

/// `h = H(x)`, `h_hat = H(x̂)`, `d = h - h_hat`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathwayTrace {
    pub h: Vec<f64>,
    pub h_hat: Vec<f64>,
    pub d: Vec<f64>,
}

/// Cached intermediates of one block in a training-mode forward pass.
struct BlockCache {
    input: Array2<f64>,
    bn: Option<(Array2<f64>, BatchNormCache)>,
    pre_act: Array2<f64>,
}

/// Gradients for every block, encoder first.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<(DenseGrads, Option<BatchNormGrads>)>,
}

impl Gradients {
    /// Same order as [`AeModel::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (dense, bn) in &self.blocks {
            out.extend(dense.weight.iter());
            out.extend(dense.bias.iter());
            if let Some(bn) = bn {
                out.extend(bn.gamma.iter());
                out.extend(bn.beta.iter());
            }
        }
        out
    }
}

impl AeModel {
    /// Fresh model: `U(-1/sqrt(in), 1/sqrt(in))` weights and biases,
    /// identity batch norms, in Eval mode.
    pub fn new(arch: AeArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |n_in: usize, n_out: usize, hidden: bool| {
            let bound = 1.0 / (n_in as f64).sqrt();
            let dist = Uniform::new(-bound, bound);
            let weight = Array2::from_shape_simple_fn((n_in, n_out), || dist.sample(&mut rng));
            let bias = Array1::from_shape_simple_fn(n_out, || dist.sample(&mut rng));
            Block {
                dense: Dense { weight, bias },
                norm: hidden.then(|| BatchNorm::new(n_out, arch.bn_eps, arch.bn_momentum)),
                act: hidden.then_some(LeakyRelu {
                    slope: arch.leaky_slope,
                }),
            }
        };
        let mut n_in = arch.input_dim;
        let mut encoder = Vec::new();
        for &w in &arch.encoder_widths {
            encoder.push(make(n_in, w, true));
            n_in = w;
        }
        let dec_widths = arch.decoder_widths();
        let mut decoder = Vec::new();
        for (i, &w) in dec_widths.iter().enumerate() {
            decoder.push(make(n_in, w, i + 1 < dec_widths.len()));
            n_in = w;
        }
        Ok(AeModel {
            arch,
            encoder,
            decoder,
            mode: Mode::Eval,
        })
    }

    /// Assembles a model from explicit blocks (fixtures, imports).
    pub fn from_blocks(encoder: Vec<Block>, decoder: Vec<Block>) -> Result<Self> {
        let first = encoder
            .first()
            .ok_or_else(|| Error::Config("autoencoder: empty encoder".into()))?;
        let input_dim = first.dense.in_dim();
        let mut n = input_dim;
        for block in encoder.iter().chain(&decoder) {
            if block.dense.in_dim() != n || block.dense.bias.len() != block.dense.out_dim() {
                return Err(Error::Config("autoencoder: block widths do not chain".into()));
            }
            n = block.dense.out_dim();
        }
        if n != input_dim {
            return Err(Error::Config("autoencoder: decoder must end at input width".into()));
        }
        let slope = encoder
            .iter()
            .find_map(|b| b.act.map(|a| a.slope))
            .unwrap_or(0.01);
        let arch = AeArchitecture {
            input_dim,
            encoder_widths: encoder.iter().map(|b| b.dense.out_dim()).collect(),
            leaky_slope: slope,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        };
        Ok(AeModel {
            arch,
            encoder,
            decoder,
            mode: Mode::Eval,
        })
    }

    pub fn arch(&self) -> &AeArchitecture {
        &self.arch
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn encoder(&self) -> &[Block] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[Block] {
        &self.decoder
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn pathway_len(&self) -> usize {
        self.encoder.iter().map(|b| b.dense.out_dim()).sum()
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if self.mode != Mode::Eval {
            return Err(Error::Config("autoencoder must be in Eval mode for scoring".into()));
        }
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("autoencoder input".into()));
        }
        Ok(())
    }

    /// Encoder activations of a batch, one matrix per encoder layer.
    pub fn encode_batch(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.check_input(x)?;
        Ok(self.encode_unchecked(x))
    }

    fn encode_unchecked(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let input = hidden.last().map_or(x, |h| h.view());
            let out = block.forward_eval(input);
            hidden.push(out);
        }
        hidden
    }

    fn decode_unchecked(&self, z: ArrayView2<f64>) -> Array2<f64> {
        let mut y = z.to_owned();
        for block in &self.decoder {
            y = block.forward_eval(y.view());
        }
        y
    }

    /// `(x̂, hidden activations)` for a batch, Eval mode.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        self.check_input(x)?;
        let hidden = self.encode_unchecked(x);
        let x_hat = self.decode_unchecked(hidden.last().expect("non-empty encoder").view());
        Ok((x_hat, hidden))
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardOutput> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        let (x_hat, hidden) = self.forward_batch(view)?;
        Ok(ForwardOutput {
            x_hat: x_hat.into_raw_vec_and_offset().0,
            hidden: hidden.into_iter().map(|h| h.into_raw_vec_and_offset().0).collect(),
        })
    }

    pub fn reconstruct_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_batch(x)?.0)
    }

    /// Pathway errors `d(x)` for a batch (`rows × pathway_len`); with
    /// `include_input` the block `x - x̂` is prepended.
    pub fn pathway_errors(&self, x: ArrayView2<f64>, include_input: bool) -> Result<Array2<f64>> {
        let (x_hat, h) = self.forward_batch(x)?;
        let h_hat = self.encode_unchecked(x_hat.view());
        let mut blocks: Vec<Array2<f64>> = Vec::with_capacity(h.len() + 1);
        if include_input {
            blocks.push(&x - &x_hat);
        }
        for (a, b) in h.iter().zip(&h_hat) {
            blocks.push(a - b);
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        Ok(ndarray::concatenate(Axis(1), &views).expect("matching rows"))
    }

    pub fn pathway(&self, x: &[f64]) -> Result<PathwayTrace> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        let (x_hat, h) = self.forward_batch(view)?;
        let h_hat = self.encode_unchecked(x_hat.view());
        let h: Vec<f64> = h.iter().flat_map(|m| m.iter().copied()).collect();
        let h_hat: Vec<f64> = h_hat.iter().flat_map(|m| m.iter().copied()).collect();
        let d = h.iter().zip(&h_hat).map(|(a, b)| a - b).collect();
        Ok(PathwayTrace { h, h_hat, d })
    }

    fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.encoder.iter().chain(&self.decoder)
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut())
    }

    /// Trainable parameters in a fixed order: per block (encoder first)
    /// weight, bias, then gamma and beta if normalized.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in self.blocks() {
            out.extend(b.dense.weight.iter());
            out.extend(b.dense.bias.iter());
            if let Some(bn) = &b.norm {
                out.extend(bn.gamma.iter());
                out.extend(bn.beta.iter());
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        let expected = self.flat_params().len();
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        let mut it = params.iter().copied();
        for b in self.blocks_mut() {
            b.dense.weight.iter_mut().for_each(|v| *v = it.next().unwrap());
            b.dense.bias.iter_mut().for_each(|v| *v = it.next().unwrap());
            if let Some(bn) = &mut b.norm {
                bn.gamma.iter_mut().for_each(|v| *v = it.next().unwrap());
                bn.beta.iter_mut().for_each(|v| *v = it.next().unwrap());
            }
        }
        Ok(())
    }

    fn forward_train(&self, x: ArrayView2<f64>) -> (Array2<f64>, Vec<BlockCache>) {
        let mut caches = Vec::with_capacity(self.encoder.len() + self.decoder.len());
        let mut y = x.to_owned();
        for block in self.blocks() {
            let input = y;
            let z = block.dense.forward(input.view());
            let (pre_act, bn) = match &block.norm {
                Some(norm) => {
                    let (a, cache) = norm.forward_train(z.view());
                    (a, Some((z, cache)))
                }
                None => (z, None),
            };
            y = match &block.act {
                Some(act) => act.forward(pre_act.view()),
                None => pre_act.clone(),
            };
            caches.push(BlockCache { input, bn, pre_act });
        }
        (y, caches)
    }

    /// Mean squared reconstruction error of a batch with batch-norm batch
    /// statistics (training semantics), and its gradients. Does not touch
    /// running statistics.
    pub fn loss_and_gradients(&self, x: ArrayView2<f64>) -> (f64, Gradients) {
        let (loss, grads, _) = self.train_step_parts(x);
        (loss, grads)
    }

    fn train_step_parts(&self, x: ArrayView2<f64>) -> (f64, Gradients, Vec<BatchNormCache>) {
        let (x_hat, caches) = self.forward_train(x);
        let diff = &x_hat - &x;
        let count = diff.len() as f64;
        let loss = diff.mapv(|v| v * v).sum() / count;
        let mut dy = diff * (2.0 / count);
        let blocks: Vec<&Block> = self.blocks().collect();
        let mut grads = Vec::with_capacity(blocks.len());
        for (block, cache) in blocks.iter().zip(&caches).rev() {
            if let Some(act) = &block.act {
                dy = act.backward(cache.pre_act.view(), dy.view());
            }
            let bn_grads = match (&block.norm, &cache.bn) {
                (Some(norm), Some((_, bn_cache))) => {
                    let (dz, g) = norm.backward(bn_cache, dy.view());
                    dy = dz;
                    Some(g)
                }
                _ => None,
            };
            let (dx, dense_grads) = block.dense.backward(cache.input.view(), dy.view());
            dy = dx;
            grads.push((dense_grads, bn_grads));
        }
        grads.reverse();
        let bn_caches = caches.into_iter().filter_map(|c| c.bn.map(|(_, bc)| bc)).collect();
        (loss, Gradients { blocks: grads }, bn_caches)
    }

    fn update_running_stats(&mut self, caches: &[BatchNormCache]) {
        let mut it = caches.iter();
        for block in self.blocks_mut() {
            if let Some(bn) = &mut block.norm {
                bn.update_running(it.next().expect("one cache per batch norm"));
            }
        }
    }

    /// Mean squared reconstruction error in Eval mode.
    pub fn eval_mse(&self, x: ArrayView2<f64>) -> Result<f64> {
        let x_hat = self.reconstruct_batch(x)?;
        let diff = &x_hat - &x;
        Ok(diff.mapv(|v| v * v).sum() / diff.len().max(1) as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.flat_params().iter().all(|v| v.is_finite())
            && self.blocks().all(|b| {
                b.norm.as_ref().is_none_or(|bn| {
                    bn.running_mean.iter().all(|v| v.is_finite())
                        && bn.running_var.iter().all(|v| v.is_finite() && *v >= 0.0)
                })
            })
    }
}
