//! Convolutional auto-encoder producing 256-dim slice features.
//!
//! Encoder: five stages of 3×3 'same' convolution + ReLU + 2×2 max-pool
//! (256 → 8 pixels per side), flatten, then a linear bottleneck to the
//! feature size. Decoder: dense expansion + ReLU, reshape, five stages of
//! nearest-neighbour 2× upsampling + 3×3 convolution + ReLU, and a final
//! one-channel convolution with a sigmoid.

use std::collections::BTreeSet;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, DataError, Error, Result};
use crate::layers::{conv2d, dense, maxpool2d, upsample_nearest, Padding};
use crate::losses::{mse, mse_loss};
use crate::optim::{Adam, AdamConfig};
use crate::params::{accumulate, Bound, GradMap, ParamStore};
use crate::rng::{normal_tensor, stream};
use crate::tensor::{Element, Tensor};
use crate::training::EpochRecord;

pub const STAGES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaeConfig {
    /// Side length of the square single-channel input.
    pub input_size: usize,
    /// Output channels of each encoder stage.
    pub channels: Vec<usize>,
    pub code_dim: usize,
    pub kernel: usize,
}

impl Default for CaeConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            channels: vec![16, 32, 64, 128, 256],
            code_dim: 256,
            kernel: 3,
        }
    }
}

impl CaeConfig {
    /// Full validation for the production architecture, which has exactly
    /// five stages.
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != STAGES {
            return Err(Error::Config(format!(
                "auto-encoder needs {STAGES} stages, got {}",
                self.channels.len()
            )));
        }
        self.check_geometry()
    }

    fn check_geometry(&self) -> Result<()> {
        let stages = self.channels.len();
        if stages == 0 || self.channels.contains(&0) || self.code_dim == 0 {
            return Err(Error::Config("auto-encoder widths must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        if self.input_size == 0 || self.input_size % (1 << stages) != 0 {
            return Err(Error::Config(format!(
                "input size {} is not divisible by 2^{stages}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    /// Spatial side length after the last pooling stage.
    pub fn bottleneck_side(&self) -> usize {
        self.input_size >> self.stages()
    }

    pub fn flat_dim(&self) -> usize {
        self.channels[self.stages() - 1] * self.bottleneck_side().pow(2)
    }

    /// `(in, out)` channels of each encoder convolution.
    pub fn encoder_convs(&self) -> Vec<(usize, usize)> {
        let mut ins = vec![1];
        ins.extend_from_slice(&self.channels[..self.stages() - 1]);
        ins.into_iter().zip(self.channels.iter().copied()).collect()
    }

    /// `(in, out)` channels of each decoder stage, mirroring the encoder and
    /// ending at the first encoder width.
    pub fn decoder_convs(&self) -> Vec<(usize, usize)> {
        let rev: Vec<usize> = self.channels.iter().rev().copied().collect();
        (0..self.stages())
            .map(|i| (rev[i], *rev.get(i + 1).unwrap_or(&self.channels[0])))
            .collect()
    }

    /// Closed-form parameter count of the architecture.
    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let conv = |(i, o): (usize, usize)| o * i * k2 + o;
        let enc: usize = self.encoder_convs().into_iter().map(conv).sum();
        let dec: usize = self.decoder_convs().into_iter().map(conv).sum();
        let flat = self.flat_dim();
        let bottleneck = self.code_dim * flat + self.code_dim;
        let expansion = flat * self.code_dim + flat;
        let out = conv((self.channels[0], 1));
        enc + bottleneck + expansion + dec + out
    }
}

fn enc_conv(i: usize) -> String {
    format!("enc.conv{i}")
}
fn dec_conv(i: usize) -> String {
    format!("dec.conv{i}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cae<T: Element = f32> {
    pub config: CaeConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> Cae<T> {
    /// Builds the five-stage auto-encoder with seeded He-normal weights.
    pub fn build(config: CaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Self::init(config, seed)
    }

    /// Builds an auto-encoder with any number of stages. Used to verify
    /// gradients at a scale where finite differences are affordable.
    pub fn build_reduced(config: CaeConfig, seed: u64) -> Result<Self> {
        config.check_geometry()?;
        Self::init(config, seed)
    }

    fn init(config: CaeConfig, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, "cae.init");
        let mut params = ParamStore::new();
        let k = config.kernel;
        let mut conv = |params: &mut ParamStore<T>, name: String, (i, o): (usize, usize), gain: f64| {
            let std = (gain / (i * k * k) as f64).sqrt();
            params.insert(format!("{name}.weight"), normal_tensor(&[o, i, k, k], std, &mut rng), true)?;
            params.insert(format!("{name}.bias"), Tensor::zeros([o]), true)
        };
        for (i, io) in config.encoder_convs().into_iter().enumerate() {
            conv(&mut params, enc_conv(i + 1), io, 2.0)?;
        }
        let flat = config.flat_dim();
        let mut dense_init = |params: &mut ParamStore<T>, name: &str, inp: usize, out: usize, gain: f64| {
            let std = (gain / inp as f64).sqrt();
            params.insert(format!("{name}.weight"), normal_tensor(&[out, inp], std, &mut rng), true)?;
            params.insert(format!("{name}.bias"), Tensor::zeros([out]), true)
        };
        dense_init(&mut params, "enc.fc", flat, config.code_dim, 1.0)?;
        dense_init(&mut params, "dec.fc", config.code_dim, flat, 2.0)?;
        let mut rng = stream(seed, "cae.init.decoder");
        let mut conv = |params: &mut ParamStore<T>, name: String, (i, o): (usize, usize), gain: f64| {
            let std = (gain / (i * k * k) as f64).sqrt();
            params.insert(format!("{name}.weight"), normal_tensor(&[o, i, k, k], std, &mut rng), true)?;
            params.insert(format!("{name}.bias"), Tensor::zeros([o]), true)
        };
        for (i, io) in config.decoder_convs().into_iter().enumerate() {
            conv(&mut params, dec_conv(i + 1), io, 2.0)?;
        }
        conv(&mut params, "dec.out".into(), (config.channels[0], 1), 1.0)?;
        Ok(Self { config, params })
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        if shape != [1, s, s] {
            return Err(dim_err!("auto-encoder expects [1, {s}, {s}], got {shape:?}"));
        }
        Ok(())
    }

    /// Encoder forward pass on a tape.
    pub fn encode_var<'t>(&self, bound: &Bound<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_image(&image.shape())?;
        self.encode_stages(bound, image, 0)
    }

    /// Runs encoder stages `from+1..` and the bottleneck on the activation
    /// left by the first `from` stages.
    fn encode_stages<'t>(&self, bound: &Bound<'t, T>, mut x: Var<'t, T>, from: usize) -> Result<Var<'t, T>> {
        for i in from + 1..=self.config.stages() {
            x = self.encoder_stage(bound, x, i)?;
        }
        let flat = x.reshape([self.config.flat_dim()])?;
        dense(flat, bound.var("enc.fc.weight")?, bound.var("enc.fc.bias")?)
    }

    fn encoder_stage<'t>(&self, bound: &Bound<'t, T>, x: Var<'t, T>, i: usize) -> Result<Var<'t, T>> {
        let name = enc_conv(i);
        let w = bound.var(&format!("{name}.weight"))?;
        let b = bound.var(&format!("{name}.bias"))?;
        maxpool2d(conv2d(x, w, Some(b), 1, Padding::Same)?.relu(), 2)
    }

    /// Activation after the first `stages` encoder stages.
    pub fn encode_prefix(&self, image: &Tensor<T>, stages: usize) -> Result<Tensor<T>> {
        self.check_image(image.shape())?;
        if stages > self.config.stages() {
            return Err(Error::Config(format!("encoder has only {} stages", self.config.stages())));
        }
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let mut x = tape.constant(image.clone());
        for i in 1..=stages {
            x = self.encoder_stage(&bound, x, i)?;
        }
        Ok(x.value())
    }

    /// Finishes encoding an activation produced by [`Cae::encode_prefix`]
    /// with the same `stages`.
    pub fn encode_from_prefix(&self, activation: &Tensor<T>, stages: usize) -> Result<Tensor<T>> {
        let cfg = &self.config;
        if stages > cfg.stages() {
            return Err(Error::Config(format!("encoder has only {} stages", cfg.stages())));
        }
        let side = cfg.input_size >> stages;
        let channels = if stages == 0 { 1 } else { cfg.channels[stages - 1] };
        if activation.shape() != [channels, side, side] {
            return Err(dim_err!(
                "stage-{stages} activation {:?}, expected [{channels}, {side}, {side}]",
                activation.shape()
            ));
        }
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        Ok(self.encode_stages(&bound, tape.constant(activation.clone()), stages)?.value())
    }

    /// Decoder forward pass on a tape; output is `[1, size, size]` in (0, 1).
    pub fn decode_var<'t>(&self, bound: &Bound<'t, T>, code: Var<'t, T>) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        if code.shape() != [cfg.code_dim] {
            return Err(dim_err!("decoder expects a [{}] code, got {:?}", cfg.code_dim, code.shape()));
        }
        let side = cfg.bottleneck_side();
        let deepest = cfg.channels[cfg.stages() - 1];
        let mut x = dense(code, bound.var("dec.fc.weight")?, bound.var("dec.fc.bias")?)?
            .relu()
            .reshape([deepest, side, side])?;
        for i in 1..=cfg.stages() {
            let name = dec_conv(i);
            let w = bound.var(&format!("{name}.weight"))?;
            let b = bound.var(&format!("{name}.bias"))?;
            x = conv2d(upsample_nearest(x, 2)?, w, Some(b), 1, Padding::Same)?.relu();
        }
        let w = bound.var("dec.out.weight")?;
        let b = bound.var("dec.out.bias")?;
        Ok(conv2d(x, w, Some(b), 1, Padding::Same)?.sigmoid())
    }

    /// The feature vector of one preprocessed slice.
    pub fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image.shape())?;
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        Ok(self.encode_var(&bound, tape.constant(image.clone()))?.value())
    }

    pub fn reconstruct(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image.shape())?;
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let code = self.encode_var(&bound, tape.constant(image.clone()))?;
        Ok(self.decode_var(&bound, code)?.value())
    }
}

/// Trainable parameter set for fine-tuning; all other tensors stay frozen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub trainable: BTreeSet<String>,
}

impl FreezePlan {
    /// The bottleneck dense, the decoder expansion dense, the last encoder
    /// convolution and the first decoder convolution (weights and biases).
    pub fn middle(config: &CaeConfig) -> Self {
        let layers = [
            enc_conv(config.stages()),
            "enc.fc".to_string(),
            "dec.fc".to_string(),
            dec_conv(1),
        ];
        Self {
            trainable: layers
                .iter()
                .flat_map(|l| [format!("{l}.weight"), format!("{l}.bias")])
                .collect(),
        }
    }

    pub fn new(names: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            trainable: names.into_iter().map(Into::into).collect(),
        }
    }

    /// Number of leading encoder stages whose tensors the plan leaves
    /// frozen. Their output does not change during fine-tuning.
    pub fn frozen_encoder_stages(&self, config: &CaeConfig) -> usize {
        (1..=config.stages())
            .take_while(|&i| {
                let name = enc_conv(i);
                !self.trainable.contains(&format!("{name}.weight")) && !self.trainable.contains(&format!("{name}.bias"))
            })
            .count()
    }

    fn apply<T: Element>(&self, params: &mut ParamStore<T>) -> Result<()> {
        if let Some(unknown) = self.trainable.iter().find(|n| !params.contains(n)) {
            return Err(Error::Config(format!("freeze plan names unknown tensor {unknown}")));
        }
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            params.set_trainable(&name, self.trainable.contains(&name))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Fraction of the corpus held out for checkpoint selection.
    pub holdout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 1e-4,
            epochs: 200,
            holdout: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-6,
            epochs: 50,
            batch_size: 128,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub cae: Cae<f32>,
    /// Epoch 0 is the untrained network (holdout only).
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_holdout_mse: f64,
}

/// Mean reconstruction MSE over `images`.
pub fn reconstruction_mse(cae: &Cae<f32>, images: &[&Tensor<f32>]) -> Result<f64> {
    if images.is_empty() {
        return Err(DataError::Empty("no images to evaluate".into()).into());
    }
    let mut total = 0.0;
    for img in images {
        total += mse(&cae.reconstruct(img)?, img)?;
    }
    Ok(total / images.len() as f64)
}

/// One pass over `images` in the given order; returns the mean loss seen
/// during the epoch.
fn reconstruction_epoch(
    cae: &mut Cae<f32>,
    adam: &mut Adam,
    images: &[&Tensor<f32>],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in images.chunks(batch_size.max(1)) {
        let mut grads = GradMap::new();
        let scale = 1.0 / batch.len() as f32;
        for img in batch {
            let tape = Tape::new();
            let bound = cae.params.bind(&tape);
            let x = tape.constant((*img).clone());
            let recon = cae.decode_var(&bound, cae.encode_var(&bound, x)?)?;
            let loss = mse_loss(recon, x)?;
            total += loss.value().item()? as f64;
            let g = tape.backward(loss.scale(scale))?;
            accumulate(&mut grads, bound.gradients(&g))?;
        }
        adam.step(&mut cae.params, &grads)?;
    }
    Ok(total / images.len() as f64)
}

fn check_corpus(images: &[Tensor<f32>], cae: &Cae<f32>) -> Result<()> {
    if images.is_empty() {
        return Err(DataError::Empty("auto-encoder corpus is empty".into()).into());
    }
    images.iter().try_for_each(|img| cae.check_image(img.shape()))
}

/// Trains every tensor on reconstruction MSE and returns the checkpoint
/// with the lowest holdout MSE, the untrained network included.
pub fn pretrain(mut cae: Cae<f32>, corpus: &[Tensor<f32>], cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    check_corpus(corpus, &cae)?;
    if !(0.0..1.0).contains(&cfg.holdout) {
        return Err(Error::Config(format!("holdout fraction {} not in [0, 1)", cfg.holdout)));
    }
    cae.params.set_all_trainable(true);

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut stream(seed, "cae.pretrain.split"));
    let n_holdout = ((corpus.len() as f64 * cfg.holdout).round() as usize).min(corpus.len() - 1);
    let (holdout_idx, train_idx) = order.split_at(n_holdout);
    let train: Vec<&Tensor<f32>> = train_idx.iter().map(|&i| &corpus[i]).collect();
    // a corpus too small to split is scored on its training images
    let holdout: Vec<&Tensor<f32>> = if holdout_idx.is_empty() {
        train.clone()
    } else {
        holdout_idx.iter().map(|&i| &corpus[i]).collect()
    };

    let initial = reconstruction_mse(&cae, &holdout)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        mean_loss: reconstruction_mse(&cae, &train)?,
        holdout_metric: Some(initial),
    }];
    let mut best = (0, initial, cae.clone());
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut shuffle = stream(seed, "cae.pretrain.shuffle");
    for epoch in 1..=cfg.epochs {
        let mut epoch_order = train.clone();
        epoch_order.shuffle(&mut shuffle);
        let mean_loss = reconstruction_epoch(&mut cae, &mut adam, &epoch_order, cfg.batch_size)?;
        let holdout_mse = reconstruction_mse(&cae, &holdout)?;
        info!("pretrain epoch {epoch}: train mse {mean_loss:.6}, holdout mse {holdout_mse:.6}");
        history.push(EpochRecord {
            epoch,
            mean_loss,
            holdout_metric: Some(holdout_mse),
        });
        if holdout_mse < best.1 {
            best = (epoch, holdout_mse, cae.clone());
        }
    }
    let (best_epoch, best_holdout_mse, cae) = best;
    Ok(PretrainOutcome {
        cae,
        history,
        best_epoch,
        best_holdout_mse,
    })
}

/// Continues reconstruction training with only `plan`'s tensors trainable.
/// Every other tensor is returned bit-identical.
pub fn finetune(
    mut cae: Cae<f32>,
    slices: &[Tensor<f32>],
    cfg: &FinetuneConfig,
    plan: &FreezePlan,
    seed: u64,
) -> Result<(Cae<f32>, Vec<EpochRecord>)> {
    check_corpus(slices, &cae)?;
    plan.apply(&mut cae.params)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut shuffle = stream(seed, "cae.finetune.shuffle");
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<&Tensor<f32>> = slices.iter().collect();
        order.shuffle(&mut shuffle);
        let mean_loss = reconstruction_epoch(&mut cae, &mut adam, &order, cfg.batch_size)?;
        info!("finetune epoch {epoch}: train mse {mean_loss:.6}");
        history.push(EpochRecord {
            epoch,
            mean_loss,
            holdout_metric: None,
        });
    }
    Ok((cae, history))
}
