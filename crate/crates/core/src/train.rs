//! Joint optimisation of codec weights, quantizer parameters, rate model and
//! selectors under `L = R + λ·D + γ·L_bits`.
//!
//! `R` is the estimated latent rate in bits per pixel and `D` the mean
//! squared error on the 0–255 pixel scale.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Graph, Var};
use crate::data::{sample_batch, Image};
use crate::error::{Error, Result};
use crate::metrics::{avg_bitwidth, psnr_from_mse, Scope};
use crate::model::{ImageEval, Model, ModelConfig, Pass};
use crate::params::ParamRole;
use crate::quant::GradientMode;
use crate::selector::Selection;
use crate::tensor::{Real, Tensor};

/// Factor taking MSE on [0, 1] images to MSE on 0–255 values.
pub const PIXEL_SCALE_SQ: f64 = 255.0 * 255.0;

/// Linear β schedule from the configured β to `to` over `steps` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaRamp {
    pub to: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub mode: GradientMode,
    pub beta_ramp: Option<BetaRamp>,
    pub learn_scale: bool,
    pub learn_zero_point: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0067,
            gamma: 0.001,
            lr: 1e-4,
            batch_size: 8,
            crop_size: 64,
            steps: 20_000,
            seed: 0,
            mode: GradientMode::Dgm { beta: crate::quant::DEFAULT_BETA },
            beta_ramp: None,
            learn_scale: true,
            learn_zero_point: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Param(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Param(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Param(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.steps == 0 || self.batch_size == 0 || self.crop_size == 0 {
            return Err(Error::Param("steps, batch size and crop size must be positive".into()));
        }
        self.mode.validate()?;
        if let Some(r) = self.beta_ramp {
            if !matches!(self.mode, GradientMode::Dgm { .. }) {
                return Err(Error::Param("a beta ramp needs DGM mode".into()));
            }
            if !(r.to > 0.0) || r.steps == 0 {
                return Err(Error::Param("beta ramp needs a positive target and length".into()));
            }
        }
        Ok(())
    }

    /// Gradient mode in effect at `step`.
    pub fn mode_at(&self, step: u64) -> GradientMode {
        match (self.mode, self.beta_ramp) {
            (GradientMode::Dgm { beta }, Some(r)) => {
                let t = (step as f64 / r.steps as f64).min(1.0);
                GradientMode::Dgm { beta: beta + (r.to - beta) * t }
            }
            (m, _) => m,
        }
    }
}

/// Mean over batch and layers of the expected bit-width
/// `Σ_k p[b, l, k]·bits[k]` of probabilities shaped (B, L, M).
pub fn bits_loss<T: Real>(probs: &Tensor<T>, bits: &[u32]) -> Result<f64> {
    let s = probs.shape();
    if s.len() != 3 || s[2] != bits.len() {
        return Err(Error::shape(
            "bits_loss",
            format!("probabilities {s:?} for {} candidates", bits.len()),
        ));
    }
    if s[1] == 0 {
        return Err(Error::Contract("bits_loss needs at least one layer".into()));
    }
    let total: f64 = probs
        .data()
        .chunks(bits.len())
        .map(|row| row.iter().zip(bits).map(|(p, &b)| p.as_f64() * b as f64).sum::<f64>())
        .sum();
    Ok(total / (s[0] * s[1]) as f64)
}

/// `bits_loss` on the tape over one or more (B, L, M) probability tensors.
pub fn bits_loss_var<T: Real>(g: &mut Graph<T>, probs: &[Var], bits: &[u32]) -> Result<Var> {
    if probs.is_empty() {
        return Err(Error::Contract("bits_loss needs at least one layer".into()));
    }
    let all = if probs.len() == 1 {
        probs[0]
    } else {
        g.concat(probs, 1)?
    };
    let s = g.shape(all).to_vec();
    if s.len() != 3 || s[2] != bits.len() {
        return Err(Error::shape(
            "bits_loss",
            format!("probabilities {s:?} for {} candidates", bits.len()),
        ));
    }
    let b = g.constant(Tensor::new(&[bits.len()], bits.iter().map(|&b| T::from_f64(b as f64)).collect())?);
    let weighted = g.mul(all, b)?;
    let sum = g.sum(weighted);
    Ok(g.scale(sum, 1.0 / (s[0] * s[1]) as f64))
}

/// `R + λ·D + γ·L_bits`; non-finite inputs or results are numeric errors.
pub fn total_loss(rate: f64, distortion: f64, bits: f64, lambda: f64, gamma: f64) -> Result<f64> {
    let loss = rate + lambda * distortion + gamma * bits;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "loss is {loss} (R={rate}, D={distortion}, L_bits={bits})"
        )));
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Estimated bits per pixel.
    pub rate: f64,
    /// MSE on the 0–255 scale.
    pub distortion: f64,
    pub psnr: f64,
    /// Expected average bit-width over selected layers; absent without selectors.
    pub bits_loss: Option<f64>,
    pub loss: f64,
    /// Parameter-weighted expected bit-width of the quantized blocks.
    pub avg_bits: f64,
}

/// Mean over the batch of the expected bits of each block of one side.
fn expected_block_bits<T: Real>(g: &Graph<T>, sel: Option<Selection>, bits: &[u32], blocks: usize, fixed: u32) -> Vec<f64> {
    match sel {
        Some(s) => {
            let p = g.value(s.probs);
            let batch = p.shape()[0];
            let m = bits.len();
            (0..blocks)
                .map(|l| {
                    (0..batch)
                        .map(|b| {
                            let row = &p.data()[(b * blocks + l) * m..][..m];
                            row.iter().zip(bits).map(|(q, &k)| q.as_f64() * k as f64).sum::<f64>()
                        })
                        .sum::<f64>()
                        / batch as f64
                })
                .collect()
        }
        None => vec![fixed as f64; blocks],
    }
}

/// Parameter-weighted bit-width of the quantized blocks given per-block bits.
pub fn block_avg_bits<T: Real>(model: &Model<T>, enc: &[f64], dec: &[f64]) -> Result<f64> {
    if !model.config.dynamic {
        return Ok(model.config.fixed_bits as f64);
    }
    avg_bitwidth(&model.bit_profile(enc, dec)?, Scope::DynamicLayers)
}

/// A model with its optimiser, generator and metric trace.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub trace: Vec<StepMetrics>,
}

impl Trainer {
    /// Builds and calibrates a model. The first batch drawn from `images`
    /// initialises the quantizers.
    pub fn new(model: ModelConfig, config: TrainConfig, images: &[Image]) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut m = Model::new(model, &mut rng)?;
        let calib = sample_batch(images, config.batch_size, config.crop_size, &mut rng)?;
        m.calibrate(&calib)?;
        let mut t = Self::assemble(m, config, rng);
        t.apply_trainable();
        Ok(t)
    }

    pub(crate) fn assemble(model: Model<f32>, config: TrainConfig, rng: ChaCha8Rng) -> Self {
        let adam = AdamState::new(config.lr, model.store.iter().map(|p| p.value.len()));
        Self {
            model,
            config,
            adam,
            step: 0,
            rng,
            trace: Vec::new(),
        }
    }

    pub(crate) fn apply_trainable(&mut self) {
        self.model
            .store
            .set_trainable_role(ParamRole::QuantScale, self.config.learn_scale);
        self.model
            .store
            .set_trainable_role(ParamRole::QuantZeroPoint, self.config.learn_zero_point);
    }

    pub fn mode(&self) -> GradientMode {
        self.config.mode_at(self.step)
    }

    pub fn sample(&mut self, images: &[Image]) -> Result<Tensor<f32>> {
        sample_batch(images, self.config.batch_size, self.config.crop_size, &mut self.rng)
    }

    /// Forward pass building the loss; returns (graph, binding, loss var, metrics).
    fn loss_graph(&mut self, batch: &Tensor<f32>) -> Result<(Graph<f32>, crate::params::Binding, Var, StepMetrics)> {
        let mode = self.mode();
        let mut g = Graph::new();
        let b = self.model.store.bind(&mut g, true);
        let out = self.model.forward(&mut g, &b, batch, Pass::train(mode), &mut self.rng)?;
        let cfg = &self.model.config;
        let rate = g.scale(out.bits, 1.0 / out.pixels as f64);
        let mse = g.mse(out.x_hat, out.input)?;
        let dist = g.scale(mse, PIXEL_SCALE_SQ);
        let weighted = g.scale(dist, self.config.lambda);
        let mut loss = g.add(rate, weighted)?;
        let probs: Vec<Var> = [out.enc, out.dec].into_iter().flatten().map(|s| s.probs).collect();
        let lbits = if probs.is_empty() {
            None
        } else {
            let lb = bits_loss_var(&mut g, &probs, &cfg.bits)?;
            let term = g.scale(lb, self.config.gamma);
            loss = g.add(loss, term)?;
            Some(g.value(lb).item()?.as_f64())
        };
        let bl = cfg.blocks_per_side();
        let enc = expected_block_bits(&g, out.enc, &cfg.bits, bl, cfg.fixed_bits);
        let dec = expected_block_bits(&g, out.dec, &cfg.bits, bl, cfg.fixed_bits);
        let mse_v = g.value(mse).item()?.as_f64();
        let metrics = StepMetrics {
            step: self.step,
            rate: g.value(rate).item()?.as_f64(),
            distortion: mse_v * PIXEL_SCALE_SQ,
            psnr: psnr_from_mse(mse_v, 1.0),
            bits_loss: lbits,
            loss: g.value(loss).item()?.as_f64(),
            avg_bits: block_avg_bits(&self.model, &enc, &dec)?,
        };
        Ok((g, b, loss, metrics))
    }

    /// One forward, backward and Adam update on `batch`.
    pub fn train_step(&mut self, batch: &Tensor<f32>) -> Result<StepMetrics> {
        let step = self.step;
        let (mut g, b, loss, metrics) = self.loss_graph(batch)?;
        let as_training = |e: Error| match e {
            Error::Numeric(detail) => Error::Training { step, detail },
            other => other,
        };
        total_loss(
            metrics.rate,
            metrics.distortion,
            metrics.bits_loss.unwrap_or(0.0),
            self.config.lambda,
            self.config.gamma,
        )
        .map_err(as_training)?;
        g.backward(loss)?;
        let grads = b.grads(&g);
        let grad_refs: Vec<Option<&Tensor<f32>>> = grads.iter().map(|g| g.as_ref()).collect();
        let mut params: Vec<&mut Tensor<f32>> = self.model.store.values_mut().collect();
        adam_step(&mut params, &grad_refs, &mut self.adam).map_err(as_training)?;
        self.step += 1;
        self.trace.push(metrics.clone());
        Ok(metrics)
    }

    /// Gradients of one loss evaluation without updating anything, aligned
    /// with the parameter store.
    pub fn gradients(&mut self, batch: &Tensor<f32>) -> Result<Vec<Option<Tensor<f32>>>> {
        let (mut g, b, loss, _) = self.loss_graph(batch)?;
        g.backward(loss)?;
        Ok(b.grads(&g))
    }

    /// Trains until `self.step == until`, sampling a fresh batch each step.
    pub fn fit(&mut self, images: &[Image], until: u64, mut on_step: impl FnMut(&StepMetrics)) -> Result<()> {
        while self.step < until {
            let batch = self.sample(images)?;
            let m = self.train_step(&batch)?;
            on_step(&m);
        }
        Ok(())
    }

    pub fn evaluate(&self, images: &[Image]) -> Result<DatasetEval> {
        evaluate_dataset(&self.model, images, self.mode(), self.config.lambda)
    }
}

/// Eval-mode results over an image set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEval {
    pub images: Vec<ImageEval>,
    pub bpp: f64,
    pub psnr: f64,
    /// Mean of `bpp + λ·D` over images.
    pub rd_loss: f64,
    /// Mean over images of the parameter-weighted bits of quantized blocks.
    pub avg_bits: f64,
    /// Mean over images of the whole-model weighted bit-width.
    pub model_bits: f64,
    /// Per quantized block: how many images selected each bit-width.
    pub histogram: BTreeMap<String, BTreeMap<u32, usize>>,
}

pub fn evaluate_dataset(model: &Model<f32>, images: &[Image], mode: GradientMode, lambda: f64) -> Result<DatasetEval> {
    if images.is_empty() {
        return Err(Error::Data("no images to evaluate".into()));
    }
    let mut evals = Vec::with_capacity(images.len());
    let (mut bpp, mut psnr, mut rd, mut bits, mut whole) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut histogram: BTreeMap<String, BTreeMap<u32, usize>> = BTreeMap::new();
    let names: Vec<String> = model.dq_blocks().map(|b| b.name.clone()).collect();
    for img in images {
        let s = img.shape();
        let batch = Tensor::new(&[1, s[0], s[1], s[2]], img.data().to_vec())?;
        let e = model.evaluate(&batch, mode)?.remove(0);
        let enc: Vec<f64> = e.encoder_bits.iter().map(|&b| b as f64).collect();
        let dec: Vec<f64> = e.decoder_bits.iter().map(|&b| b as f64).collect();
        bits += block_avg_bits(model, &enc, &dec)?;
        whole += avg_bitwidth(&model.bit_profile(&enc, &dec)?, Scope::WholeModel)?;
        for (name, &b) in names.iter().zip(e.encoder_bits.iter().chain(&e.decoder_bits)) {
            *histogram.entry(name.clone()).or_default().entry(b).or_default() += 1;
        }
        bpp += e.bpp;
        psnr += e.psnr;
        rd += e.bpp + lambda * e.mse * PIXEL_SCALE_SQ;
        evals.push(e);
    }
    let n = images.len() as f64;
    Ok(DatasetEval {
        images: evals,
        bpp: bpp / n,
        psnr: psnr / n,
        rd_loss: rd / n,
        avg_bits: bits / n,
        model_bits: whole / n,
        histogram,
    })
}
