//! Dynamic bit-width selection.
//!
//! A [`Selector`] pools the activations of a coder's first module to a fixed
//! 5×5 grid, runs a two-layer MLP and emits one categorical choice over the
//! candidate bit-widths per downstream block. Training samples the choice
//! with hard Gumbel-Softmax (one-hot forward, soft gradients); evaluation
//! takes the argmax.
//!
//! A [`DqBlock`] is a layer carrying one quantizer pair (weights and input)
//! per candidate bit-width. In training every branch runs and the outputs are
//! mixed by the selection weights; at inference only the chosen branch runs.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{register_custom_gradient, CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{BitsSource, Binding, ParamId, ParamRole, ParamStore};
use crate::quant::{calibrate_init, check_bits, fake_quantize, AffineQuantParams, GradientMode, QuantVars};
use crate::tensor::{c, Real, Tensor};

/// Hyperparameters of one selector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    /// Channels of the activation the selector reads.
    pub in_channels: usize,
    /// Number of blocks served (one choice per block).
    pub blocks: usize,
    /// Candidate bit-widths, ascending.
    pub bits: Vec<u32>,
    pub pool: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub tau: f64,
    pub hard: bool,
}

impl SelectorConfig {
    pub fn new(in_channels: usize, blocks: usize, bits: &[u32]) -> Result<Self> {
        let cfg = Self {
            in_channels,
            blocks,
            bits: bits.to_vec(),
            pool: 5,
            hidden: 128,
            dropout: 0.2,
            tau: 1.0,
            hard: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        validate_bit_set(&self.bits)?;
        if self.in_channels == 0 || self.blocks == 0 || self.pool == 0 || self.hidden == 0 {
            return Err(Error::Param("selector dimensions must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Param(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Param(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn candidates(&self) -> usize {
        self.bits.len()
    }
}

/// A candidate set needs at least two distinct, ascending bit-widths ≥ 2.
pub fn validate_bit_set(bits: &[u32]) -> Result<()> {
    if bits.len() < 2 {
        return Err(Error::Param(format!(
            "candidate bit set needs at least two entries, got {bits:?}"
        )));
    }
    for &b in bits {
        check_bits(b)?;
    }
    if bits.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Param(format!(
            "candidate bit set must be strictly ascending, got {bits:?}"
        )));
    }
    Ok(())
}

pub(crate) fn uniform_init<T: Real, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| c(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// One standard Gumbel draw from the open unit interval.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u = ((rng.random::<u64>() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    -(-u.ln()).ln()
}

fn one_hot_st<T: Real>() -> CustomOp<T> {
    register_custom_gradient(
        "one_hot_st",
        |xs: &[&Tensor<T>]| {
            let y = xs[0];
            let m = *y.shape().last().expect("rank >= 1");
            let mut out = vec![T::zero(); y.len()];
            for (row, chunk) in y.data().chunks(m).enumerate() {
                out[row * m + argmax(chunk)] = T::one();
            }
            Ok((Tensor::new(y.shape(), out)?, Vec::new()))
        },
        |g: &Tensor<T>, _: &[Tensor<T>], _: &[&Tensor<T>]| Ok(vec![g.clone()]),
    )
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Gumbel-Softmax over the last axis of `logits`.
///
/// `y = softmax((logits + g)/τ)` with `g` i.i.d. standard Gumbel drawn from
/// `noise` (zero when `None`). In hard mode the forward value is the one-hot
/// argmax of `y` while gradients flow as if `y` itself had been returned.
pub fn gumbel_softmax<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    logits: Var,
    tau: f64,
    hard: bool,
    noise: Option<&mut R>,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Param(format!("temperature must be positive, got {tau}")));
    }
    let shape = g.shape(logits).to_vec();
    let axis = shape.len() - 1;
    let perturbed = match noise {
        Some(rng) => {
            let n = g.value(logits).len();
            let draws: Vec<T> = (0..n).map(|_| c(sample_gumbel(rng))).collect();
            let noise = g.constant(Tensor::new(&shape, draws)?);
            g.add(logits, noise)?
        }
        None => logits,
    };
    let scaled = g.scale(perturbed, 1.0 / tau);
    let y = g.softmax(scaled, axis)?;
    if hard {
        g.apply_custom(&one_hot_st(), &[y])
    } else {
        Ok(y)
    }
}

/// Expected bit-width `Σ_k p_k·b_k` of one probability row.
pub fn effective_bits(probs: &[f64], bits: &[u32]) -> Result<f64> {
    if probs.len() != bits.len() {
        return Err(Error::shape(
            "effective_bits",
            format!("{} probabilities for {} candidates", probs.len(), bits.len()),
        ));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-5 {
        return Err(Error::Contract(format!("probabilities sum to {total}, not 1")));
    }
    Ok(probs.iter().zip(bits).map(|(p, &b)| p * b as f64).sum())
}

/// Output of [`Selector::select`], both shaped (batch, blocks, candidates).
#[derive(Clone, Copy, Debug)]
pub struct Selection {
    /// One-hot choice (straight-through in training, argmax in evaluation).
    pub choice: Var,
    /// Softmax of the selector logits, without Gumbel noise.
    pub probs: Var,
}

#[derive(Debug, Clone)]
pub struct Selector {
    pub config: SelectorConfig,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Selector {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        layer: &str,
        config: SelectorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let fan_in = config.in_channels * config.pool * config.pool;
        let out = config.blocks * config.candidates();
        let b1 = 1.0 / (fan_in as f64).sqrt();
        let b2 = 1.0 / (config.hidden as f64).sqrt();
        let (role, src) = (ParamRole::Selector, BitsSource::Fp32);
        let w1 = store.add(layer, "w1", role, src, uniform_init(&[config.hidden, fan_in], b1, rng));
        let bias1 = store.add(layer, "b1", role, src, uniform_init(&[config.hidden], b1, rng));
        let w2 = store.add(layer, "w2", role, src, uniform_init(&[out, config.hidden], b2, rng));
        let bias2 = store.add(layer, "b2", role, src, uniform_init(&[out], b2, rng));
        Ok(Self {
            config,
            w1,
            b1: bias1,
            w2,
            b2: bias2,
        })
    }

    /// Raw logits, shaped (batch·blocks, candidates).
    fn logits<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        a: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let cfg = &self.config;
        let shape = g.shape(a).to_vec();
        if shape.len() != 4 || shape[1] != cfg.in_channels {
            return Err(Error::shape(
                "select_bits",
                format!("expected (B, {}, H, W) activations, got {shape:?}", cfg.in_channels),
            ));
        }
        let batch = shape[0];
        let pooled = g.adaptive_avg_pool2d(a, cfg.pool, cfg.pool)?;
        let flat = g.reshape(pooled, &[batch, cfg.in_channels * cfg.pool * cfg.pool])?;
        let h = g.linear(flat, b.var(self.w1), b.var(self.b1))?;
        let h = g.dropout(h, cfg.dropout, train, rng)?;
        let out = g.linear(h, b.var(self.w2), b.var(self.b2))?;
        g.reshape(out, &[batch * cfg.blocks, cfg.candidates()])
    }

    /// Per-block bit-width choice for a batch of activations (B, N, H, W).
    pub fn select<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        a: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Selection> {
        let cfg = &self.config;
        let batch = g.shape(a)[0];
        let logits = self.logits(g, b, a, train, rng)?;
        let m = cfg.candidates();
        let probs = g.softmax(logits, 1)?;
        let choice = if train {
            gumbel_softmax(g, logits, cfg.tau, cfg.hard, Some(rng))?
        } else {
            let mut hot = vec![T::zero(); batch * cfg.blocks * m];
            for (row, chunk) in g.value(logits).data().chunks(m).enumerate() {
                hot[row * m + argmax(chunk)] = T::one();
            }
            g.constant(Tensor::new(&[batch * cfg.blocks, m], hot)?)
        };
        let out_shape = [batch, cfg.blocks, m];
        Ok(Selection {
            choice: g.reshape(choice, &out_shape)?,
            probs: g.reshape(probs, &out_shape)?,
        })
    }
}

/// Per-sample candidate indices of `block` from a (B, blocks, M) choice.
pub fn chosen_indices<T: Real>(choice: &Tensor<T>, block: usize) -> Vec<usize> {
    let s = choice.shape();
    let (blocks, m) = (s[1], s[2]);
    (0..s[0])
        .map(|bi| argmax(&choice.data()[(bi * blocks + block) * m..][..m]))
        .collect()
}

// ---------------------------------------------------------------------------
// DQ-Block

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerOp {
    /// Strided convolution.
    Conv { stride: usize, padding: usize },
    /// Nearest upsampling followed by a stride-1 convolution.
    UpConv { factor: usize, padding: usize },
}

/// Parameter handles of one quantizer.
#[derive(Clone, Copy, Debug)]
pub struct QuantizerIds {
    pub scale_raw: ParamId,
    pub zero_point: ParamId,
    pub bits: u32,
    pub axis: usize,
}

impl QuantizerIds {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        layer: &str,
        tag: &str,
        channels: usize,
        bits: u32,
        axis: usize,
    ) -> Result<Self> {
        let init = AffineQuantParams::<T>::from_scale(&vec![1.0; channels], &vec![0.0; channels], bits, axis)?;
        let scale_raw = store.add(
            layer,
            &format!("{tag}.scale"),
            ParamRole::QuantScale,
            BitsSource::Fp32,
            Tensor::new(&[channels], init.scale_raw)?,
        );
        let zero_point = store.add(
            layer,
            &format!("{tag}.zero_point"),
            ParamRole::QuantZeroPoint,
            BitsSource::Fp32,
            Tensor::new(&[channels], init.zero_point)?,
        );
        Ok(Self {
            scale_raw,
            zero_point,
            bits,
            axis,
        })
    }

    pub fn params<T: Real>(&self, store: &ParamStore<T>) -> AffineQuantParams<T> {
        AffineQuantParams {
            scale_raw: store.get(self.scale_raw).data().to_vec(),
            zero_point: store.get(self.zero_point).data().to_vec(),
            bits: self.bits,
            axis: self.axis,
        }
    }

    pub fn set<T: Real>(&self, store: &mut ParamStore<T>, p: &AffineQuantParams<T>) -> Result<()> {
        let n = p.channels();
        store.set(self.scale_raw, Tensor::new(&[n], p.scale_raw.clone())?)?;
        store.set(self.zero_point, Tensor::new(&[n], p.zero_point.clone())?)
    }

    pub fn vars<T: Real>(&self, g: &mut Graph<T>, b: &Binding) -> QuantVars {
        QuantVars {
            scale: g.softplus(b.var(self.scale_raw)),
            zero_point: b.var(self.zero_point),
            bits: self.bits,
            axis: self.axis,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Branch {
    pub bits: u32,
    pub weight_q: QuantizerIds,
    pub input_q: QuantizerIds,
}

/// A convolution whose weights and input are fake-quantized under one of
/// several candidate bit-widths.
#[derive(Debug)]
pub struct DqBlock {
    pub name: String,
    pub op: LayerOp,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub branches: Vec<Branch>,
    executed: AtomicUsize,
}

impl Clone for DqBlock {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            op: self.op,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            weight: self.weight,
            bias: self.bias,
            branches: self.branches.clone(),
            executed: AtomicUsize::new(0),
        }
    }
}

impl DqBlock {
    /// Adds a block's weights and per-bit-width quantizers to `store`.
    /// `source` labels the weights for size accounting.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        op: LayerOp,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bits: &[u32],
        source: BitsSource,
        rng: &mut R,
    ) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Param(format!("block {name} has no bit-width")));
        }
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = store.add(
            name,
            "weight",
            ParamRole::Weight,
            source,
            uniform_init(&[out_channels, in_channels, kernel, kernel], bound, rng),
        );
        let bias = store.add(name, "bias", ParamRole::Bias, source, Tensor::zeros(&[out_channels]));
        let branches = bits
            .iter()
            .map(|&b| {
                Ok(Branch {
                    bits: b,
                    weight_q: QuantizerIds::new(store, name, &format!("w{b}"), out_channels, b, 0)?,
                    input_q: QuantizerIds::new(store, name, &format!("x{b}"), in_channels, b, 1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.to_string(),
            op,
            in_channels,
            out_channels,
            weight,
            bias,
            branches,
            executed: AtomicUsize::new(0),
        })
    }

    pub fn bits(&self) -> Vec<u32> {
        self.branches.iter().map(|b| b.bits).collect()
    }

    /// Count of (sample, branch) evaluations since the last reset.
    pub fn branches_executed(&self) -> usize {
        self.executed.load(Ordering::Relaxed)
    }

    pub fn reset_counter(&self) {
        self.executed.store(0, Ordering::Relaxed);
    }

    fn apply_op<T: Real>(&self, g: &mut Graph<T>, x: Var, w: Var, bias: Var) -> Result<Var> {
        match self.op {
            LayerOp::Conv { stride, padding } => g.conv2d(x, w, Some(bias), stride, padding),
            LayerOp::UpConv { factor, padding } => {
                let up = g.upsample_nearest(x, factor)?;
                g.conv2d(up, w, Some(bias), 1, padding)
            }
        }
    }

    /// Unquantized layer, used for calibration and float baselines.
    pub fn forward_float<T: Real>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        self.apply_op(g, x, b.var(self.weight), b.var(self.bias))
    }

    /// The layer under branch `k` alone.
    pub fn forward_branch<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        x: Var,
        k: usize,
        mode: GradientMode,
    ) -> Result<Var> {
        let branch = self.branches.get(k).ok_or_else(|| {
            Error::Contract(format!("block {} has no branch {k}", self.name))
        })?;
        self.executed.fetch_add(g.shape(x)[0], Ordering::Relaxed);
        let xq = branch.input_q.vars(g, b);
        let wq = branch.weight_q.vars(g, b);
        let xt = fake_quantize(g, x, &xq, mode)?;
        let wt = fake_quantize(g, b.var(self.weight), &wq, mode)?;
        self.apply_op(g, xt, wt, b.var(self.bias))
    }

    /// Probability-weighted fusion `Σ_k w[:, k]·branch_k(x)` with per-sample
    /// weights of shape (B, M).
    pub fn forward_fused<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        x: Var,
        weights: Var,
        mode: GradientMode,
    ) -> Result<Var> {
        let batch = g.shape(x)[0];
        let m = self.branches.len();
        if g.shape(weights) != [batch, m] {
            return Err(Error::Contract(format!(
                "block {} has {m} branches but fusion weights are {:?} for batch {batch}",
                self.name,
                g.shape(weights)
            )));
        }
        let mut acc: Option<Var> = None;
        for k in 0..m {
            let out = self.forward_branch(g, b, x, k, mode)?;
            let wk = g.narrow(weights, 1, k, 1)?;
            let wk = g.reshape(wk, &[batch, 1, 1, 1])?;
            let term = g.mul(out, wk)?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        Ok(acc.expect("at least one branch"))
    }

    /// Inference path: each sample runs only its chosen branch.
    pub fn forward_selected<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        x: Var,
        choices: &[usize],
        mode: GradientMode,
    ) -> Result<Var> {
        let batch = g.shape(x)[0];
        if choices.len() != batch {
            return Err(Error::Contract(format!(
                "{} choices for a batch of {batch}",
                choices.len()
            )));
        }
        if batch == 1 {
            return self.forward_branch(g, b, x, choices[0], mode);
        }
        let outs = choices
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let xi = g.narrow(x, 0, i, 1)?;
                self.forward_branch(g, b, xi, k, mode)
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat(&outs, 0)
    }

    /// Min/max initialisation of every branch from a sample input and the
    /// current weights.
    pub fn calibrate<T: Real>(&self, store: &mut ParamStore<T>, input: &Tensor<T>) -> Result<()> {
        for br in &self.branches {
            let xp = calibrate_init(input, br.bits, 1)?;
            br.input_q.set(store, &xp)?;
            let wp = calibrate_init(&store.get(self.weight).clone(), br.bits, 0)?;
            br.weight_q.set(store, &wp)?;
        }
        Ok(())
    }
}
