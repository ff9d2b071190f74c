//! A small convolutional image codec carrying the quantization stack.
//!
//! The encoder is `stages` stride-2 convolutions, the decoder mirrors it with
//! nearest upsampling followed by stride-1 convolutions. On each side the
//! first module is fake-quantized at a fixed 8 bits and its activations feed
//! that side's [`Selector`]; the remaining modules are [`DqBlock`]s. The
//! latent is rounded (straight-through in training) and its rate is
//! estimated under a factorized Gaussian with per-channel mean and scale.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::{self, BitProfile, LayerBits};
use crate::params::{BitsSource, Binding, ParamId, ParamRole, ParamStore};
use crate::quant::{check_bits, inverse_softplus, softplus, GradientMode};
use crate::selector::{chosen_indices, validate_bit_set, DqBlock, LayerOp, Selection, Selector, SelectorConfig};
use crate::tensor::{c, Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;
/// Bit-width of the first module on each side.
pub const FIRST_MODULE_BITS: u32 = 8;
/// Floor applied to a latent symbol's probability before taking its log.
pub const MIN_PROBABILITY: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of every hidden stage.
    pub channels: usize,
    pub latent_channels: usize,
    /// Downsampling stages per side (each halves the resolution).
    pub stages: usize,
    pub kernel: usize,
    /// Candidate bit-widths for selector-driven blocks.
    pub bits: Vec<u32>,
    /// With `false` there are no selectors and every block after the first
    /// runs at `fixed_bits`.
    pub dynamic: bool,
    pub fixed_bits: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            latent_channels: 32,
            stages: 3,
            kernel: 3,
            bits: vec![4, 6, 8],
            dynamic: true,
            fixed_bits: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.latent_channels == 0 {
            return Err(Error::Param("channel widths must be positive".into()));
        }
        if self.stages < 2 {
            return Err(Error::Param(format!(
                "need at least 2 stages per side (one fixed, one quantized block), got {}",
                self.stages
            )));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Param(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.dynamic {
            validate_bit_set(&self.bits)?;
        } else {
            check_bits(self.fixed_bits)?;
        }
        Ok(())
    }

    /// Quantized blocks per side served by a selector.
    pub fn blocks_per_side(&self) -> usize {
        self.stages - 1
    }

    /// Spatial extents must be multiples of this; inputs are padded to it.
    pub fn granularity(&self) -> usize {
        1 << self.stages
    }

    fn block_bits(&self) -> Vec<u32> {
        if self.dynamic {
            self.bits.clone()
        } else {
            vec![self.fixed_bits]
        }
    }

    fn block_source(&self) -> BitsSource {
        if self.dynamic {
            BitsSource::Dynamic
        } else {
            BitsSource::Fixed(self.fixed_bits)
        }
    }
}

/// One side of the codec.
#[derive(Clone, Debug)]
pub struct Coder {
    pub first: DqBlock,
    pub blocks: Vec<DqBlock>,
    pub selector: Option<Selector>,
}

impl Coder {
    pub fn all_blocks(&self) -> impl Iterator<Item = &DqBlock> {
        std::iter::once(&self.first).chain(&self.blocks)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RateModel {
    pub mean: ParamId,
    /// Raw parameter; σ = softplus(raw).
    pub scale_raw: ParamId,
}

/// How a forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pass {
    pub train: bool,
    pub mode: GradientMode,
}

impl Pass {
    pub fn eval(mode: GradientMode) -> Self {
        Self { train: false, mode }
    }

    pub fn train(mode: GradientMode) -> Self {
        Self { train: true, mode }
    }
}

/// Rounded latent of a batch plus the unpadded image extents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    /// Integer-valued, shape (B, C_y, h, w).
    pub y_hat: Tensor<T>,
    pub height: usize,
    pub width: usize,
}

/// Tape handles of a full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    pub y_hat: Var,
    /// Reconstruction cropped to the input extents and clipped to [0, 1].
    pub x_hat: Var,
    pub input: Var,
    /// Scalar: total estimated latent bits of the batch.
    pub bits: Var,
    pub enc: Option<Selection>,
    pub dec: Option<Selection>,
    /// Unpadded pixels in the batch, B·H·W.
    pub pixels: usize,
}

/// Per-image evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    /// Selected bits per quantized block, encoder then decoder order.
    pub encoder_bits: Vec<u32>,
    pub decoder_bits: Vec<u32>,
}

/// One parameter tensor in the size accounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InventoryEntry {
    pub layer: String,
    pub name: String,
    pub role: ParamRole,
    pub params: usize,
    pub source: BitsSource,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Coder,
    pub decoder: Coder,
    pub rate: RateModel,
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let n = config.stages;
        let (ch, cy, k) = (config.channels, config.latent_channels, config.kernel);
        let pad = k / 2;
        let bits = config.block_bits();
        let src = config.block_source();
        let fixed = [FIRST_MODULE_BITS];
        let fixed_src = BitsSource::Fixed(FIRST_MODULE_BITS);

        let conv = LayerOp::Conv { stride: 2, padding: pad };
        let first = DqBlock::new(&mut store, "enc0", conv, 3, ch, k, &fixed, fixed_src, rng)?;
        let mut blocks = Vec::new();
        for i in 1..n {
            let out = if i == n - 1 { cy } else { ch };
            blocks.push(DqBlock::new(&mut store, &format!("enc{i}"), conv, ch, out, k, &bits, src, rng)?);
        }
        let selector = config
            .dynamic
            .then(|| {
                let cfg = SelectorConfig::new(ch, config.blocks_per_side(), &config.bits)?;
                Selector::new(&mut store, "enc.selector", cfg, rng)
            })
            .transpose()?;
        let encoder = Coder { first, blocks, selector };

        let up = LayerOp::UpConv { factor: 2, padding: pad };
        let first = DqBlock::new(&mut store, "dec0", up, cy, ch, k, &fixed, fixed_src, rng)?;
        let mut blocks = Vec::new();
        for i in 1..n {
            let out = if i == n - 1 { 3 } else { ch };
            blocks.push(DqBlock::new(&mut store, &format!("dec{i}"), up, ch, out, k, &bits, src, rng)?);
        }
        // start the reconstruction mid-range so the output clip is inactive
        let last = blocks.last().expect("stages >= 2").bias;
        store.set(last, Tensor::full(&[3], c(0.5)))?;
        let selector = config
            .dynamic
            .then(|| {
                let cfg = SelectorConfig::new(ch, config.blocks_per_side(), &config.bits)?;
                Selector::new(&mut store, "dec.selector", cfg, rng)
            })
            .transpose()?;
        let decoder = Coder { first, blocks, selector };

        let mean = store.add("rate", "mean", ParamRole::Entropy, BitsSource::Fp32, Tensor::zeros(&[cy]));
        let scale_raw = store.add(
            "rate",
            "scale",
            ParamRole::Entropy,
            BitsSource::Fp32,
            Tensor::full(&[cy], c(inverse_softplus(1.0))),
        );
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            rate: RateModel { mean, scale_raw },
        })
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<(usize, usize, usize)> {
        match *images.shape() {
            [b, 3, h, w] => Ok((b, h, w)),
            _ => Err(Error::shape(
                "model",
                format!("expected images shaped (B, 3, H, W), got {:?}", images.shape()),
            )),
        }
    }

    /// Runs one side. `x` is the side's input; returns the last block's output.
    fn run_coder<R: Rng + ?Sized>(
        &self,
        coder: &Coder,
        g: &mut Graph<T>,
        b: &Binding,
        x: Var,
        pass: Pass,
        rng: &mut R,
    ) -> Result<(Var, Option<Selection>)> {
        let h = coder.first.forward_branch(g, b, x, 0, pass.mode)?;
        let mut h = g.leaky_relu(h, LEAKY_SLOPE);
        let selection = match &coder.selector {
            Some(sel) => Some(sel.select(g, b, h, pass.train, rng)?),
            None => None,
        };
        let last = coder.blocks.len() - 1;
        for (l, blk) in coder.blocks.iter().enumerate() {
            h = match selection {
                Some(s) if pass.train => {
                    let batch = g.shape(h)[0];
                    let w = g.narrow(s.choice, 1, l, 1)?;
                    let w = g.reshape(w, &[batch, blk.branches.len()])?;
                    blk.forward_fused(g, b, h, w, pass.mode)?
                }
                Some(s) => {
                    let choices = chosen_indices(g.value(s.choice), l);
                    blk.forward_selected(g, b, h, &choices, pass.mode)?
                }
                None => blk.forward_branch(g, b, h, 0, pass.mode)?,
            };
            if l != last {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok((h, selection))
    }

    fn latent_bits(&self, g: &mut Graph<T>, b: &Binding, y_hat: Var) -> Result<Var> {
        let sigma = g.softplus(b.var(self.rate.scale_raw));
        let mean = b.var(self.rate.mean);
        gaussian_bits(g, y_hat, mean, sigma)
    }

    /// Full encode → rate → decode pass on a batch (B, 3, H, W) in [0, 1].
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        images: &Tensor<T>,
        pass: Pass,
        rng: &mut R,
    ) -> Result<ForwardOut> {
        let (batch, h, w) = self.check_images(images)?;
        let input = g.constant(images.clone());
        let padded = g.constant(pad_to_multiple(images, self.config.granularity()));
        let (y, enc) = self.run_coder(&self.encoder, g, b, padded, pass, rng)?;
        let y_hat = g.round_ste(y)?;
        let bits = self.latent_bits(g, b, y_hat)?;
        let (out, dec) = self.run_coder(&self.decoder, g, b, y_hat, pass, rng)?;
        let out = crop(g, out, h, w)?;
        let x_hat = g.clip(out, 0.0, 1.0);
        Ok(ForwardOut {
            y_hat,
            x_hat,
            input,
            bits,
            enc,
            dec,
            pixels: batch * h * w,
        })
    }

    /// Selected bits per sample and block from a selection (argmax rows).
    fn selected_bits(&self, g: &Graph<T>, sel: Option<Selection>, batch: usize) -> Vec<Vec<u32>> {
        let bl = self.config.blocks_per_side();
        match sel {
            Some(s) => {
                let per_block: Vec<Vec<usize>> =
                    (0..bl).map(|l| chosen_indices(g.value(s.choice), l)).collect();
                (0..batch)
                    .map(|i| (0..bl).map(|l| self.config.bits[per_block[l][i]]).collect())
                    .collect()
            }
            None => vec![vec![self.config.fixed_bits; bl]; batch],
        }
    }

    /// Encodes a batch; also returns the per-sample encoder block bits.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        images: &Tensor<T>,
        pass: Pass,
        rng: &mut R,
    ) -> Result<(LatentCode<T>, Vec<Vec<u32>>)> {
        let (batch, h, w) = self.check_images(images)?;
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let x = g.constant(pad_to_multiple(images, self.config.granularity()));
        let (y, sel) = self.run_coder(&self.encoder, &mut g, &b, x, pass, rng)?;
        let y_hat = g.round_ste(y)?;
        let bits = self.selected_bits(&g, sel, batch);
        let code = LatentCode {
            y_hat: g.value(y_hat).clone(),
            height: h,
            width: w,
        };
        Ok((code, bits))
    }

    /// Reconstructs a batch in [0, 1]; also returns the per-sample decoder
    /// block bits.
    pub fn decode<R: Rng + ?Sized>(
        &self,
        code: &LatentCode<T>,
        pass: Pass,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Vec<Vec<u32>>)> {
        let s = code.y_hat.shape();
        let gran = self.config.granularity();
        if s.len() != 4
            || s[1] != self.config.latent_channels
            || s[2] * gran < code.height
            || s[3] * gran < code.width
        {
            return Err(Error::shape(
                "decode",
                format!("latent {s:?} does not fit a {}x{} image", code.height, code.width),
            ));
        }
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let y = g.constant(code.y_hat.clone());
        let (out, sel) = self.run_coder(&self.decoder, &mut g, &b, y, pass, rng)?;
        let out = crop(&mut g, out, code.height, code.width)?;
        let x_hat = g.clip(out, 0.0, 1.0);
        let bits = self.selected_bits(&g, sel, s[0]);
        Ok((g.value(x_hat).clone(), bits))
    }

    pub fn rate_params(&self) -> (Vec<f64>, Vec<f64>) {
        let mean = self.store.get(self.rate.mean).to_f64_vec();
        let sigma = self
            .store
            .get(self.rate.scale_raw)
            .data()
            .iter()
            .map(|v| softplus(v.as_f64()))
            .collect();
        (mean, sigma)
    }

    /// Eval-mode bpp, PSNR and block bits for each image of a batch.
    pub fn evaluate(&self, images: &Tensor<T>, mode: GradientMode) -> Result<Vec<ImageEval>> {
        let (batch, h, w) = self.check_images(images)?;
        // eval passes draw nothing, the generator only satisfies the signature
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = Pass::eval(mode);
        let mut out = Vec::with_capacity(batch);
        let (mean, sigma) = self.rate_params();
        let per = 3 * h * w;
        for i in 0..batch {
            let img = Tensor::new(&[1, 3, h, w], images.data()[i * per..(i + 1) * per].to_vec())?;
            let (code, enc_bits) = self.encode(&img, pass, &mut rng)?;
            let bpp = estimate_rate(&code, &mean, &sigma)?;
            let (rec, dec_bits) = self.decode(&code, pass, &mut rng)?;
            let mse = metrics::mse(&img, &rec)?;
            out.push(ImageEval {
                bpp,
                mse,
                psnr: metrics::psnr_from_mse(mse, 1.0),
                encoder_bits: enc_bits.into_iter().next().unwrap_or_default(),
                decoder_bits: dec_bits.into_iter().next().unwrap_or_default(),
            });
        }
        Ok(out)
    }

    /// Min/max initialisation of every quantizer from an unquantized pass
    /// over `images`.
    pub fn calibrate(&mut self, images: &Tensor<T>) -> Result<()> {
        self.check_images(images)?;
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let mut inputs: Vec<Tensor<T>> = Vec::new();
        let mut x = g.constant(pad_to_multiple(images, self.config.granularity()));
        for coder in [&self.encoder, &self.decoder] {
            let blocks: Vec<&DqBlock> = coder.all_blocks().collect();
            for (i, blk) in blocks.iter().enumerate() {
                inputs.push(g.value(x).clone());
                x = blk.forward_float(&mut g, &b, x)?;
                if i + 1 != blocks.len() {
                    x = g.leaky_relu(x, LEAKY_SLOPE);
                }
            }
            // the decoder sees the rounded latent
            x = g.round_ste(x)?;
        }
        let blocks: Vec<DqBlock> = self.encoder.all_blocks().chain(self.decoder.all_blocks()).cloned().collect();
        for (blk, input) in blocks.iter().zip(&inputs) {
            blk.calibrate(&mut self.store, input)?;
        }
        Ok(())
    }

    pub fn dq_blocks(&self) -> impl Iterator<Item = &DqBlock> {
        self.encoder.blocks.iter().chain(&self.decoder.blocks)
    }

    /// Every parameter tensor exactly once, in store order.
    pub fn bit_inventory(&self) -> Vec<InventoryEntry> {
        self.store
            .iter()
            .map(|p| InventoryEntry {
                layer: p.info.layer.clone(),
                name: p.info.name.clone(),
                role: p.info.role,
                params: p.value.len(),
                source: p.info.source,
            })
            .collect()
    }

    /// Size profile of the headline parameters (quantizer and selector
    /// side information excluded). `encoder_bits`/`decoder_bits` give the
    /// (possibly expected, hence real) bits of each dynamic block.
    pub fn bit_profile(&self, encoder_bits: &[f64], decoder_bits: &[f64]) -> Result<BitProfile> {
        let bl = self.config.blocks_per_side();
        if encoder_bits.len() != bl || decoder_bits.len() != bl {
            return Err(Error::Contract(format!(
                "expected {bl} bits per side, got {} and {}",
                encoder_bits.len(),
                decoder_bits.len()
            )));
        }
        let dynamic: HashMap<&str, f64> = self
            .encoder
            .blocks
            .iter()
            .zip(encoder_bits)
            .chain(self.decoder.blocks.iter().zip(decoder_bits))
            .map(|(blk, &b)| (blk.name.as_str(), b))
            .collect();
        let mut layers = Vec::new();
        for e in self.bit_inventory() {
            if e.role.is_overhead() {
                continue;
            }
            let (bits, is_dyn) = match e.source {
                BitsSource::Fixed(b) => (b as f64, false),
                BitsSource::Fp32 => (32.0, false),
                BitsSource::Dynamic => match dynamic.get(e.layer.as_str()) {
                    Some(&b) => (b, true),
                    None => {
                        return Err(Error::Contract(format!("no bits for dynamic layer {}", e.layer)))
                    }
                },
            };
            layers.push(LayerBits {
                layer: e.name,
                params: e.params,
                bits,
                dynamic: is_dyn,
            });
        }
        Ok(BitProfile { layers })
    }

    /// Parameters counted in the headline model size.
    pub fn headline_params(&self) -> usize {
        self.store
            .iter()
            .filter(|p| !p.info.role.is_overhead())
            .map(|p| p.value.len())
            .sum()
    }

    /// Bytes of FP32 side information: quantizer (s, z) and selector MLPs.
    pub fn overhead_bytes(&self) -> usize {
        self.store
            .iter()
            .filter(|p| p.info.role.is_overhead())
            .map(|p| p.value.len() * 4)
            .sum()
    }
}

/// Edge-replicates a (B, C, H, W) batch so H and W become multiples of `m`.
pub fn pad_to_multiple<T: Real>(images: &Tensor<T>, m: usize) -> Tensor<T> {
    let s = images.shape();
    let (b, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return images.clone();
    }
    let src = images.data();
    let mut out = Vec::with_capacity(b * ch * ph * pw);
    for plane in 0..b * ch {
        for y in 0..ph {
            let row = &src[plane * h * w + y.min(h - 1) * w..][..w];
            out.extend((0..pw).map(|x| row[x.min(w - 1)]));
        }
    }
    Tensor::new(&[b, ch, ph, pw], out).expect("padded extents")
}

fn crop<T: Real>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x = if s[2] != h { g.narrow(x, 2, 0, h)? } else { x };
    if s[3] != w {
        g.narrow(x, 3, 0, w)
    } else {
        Ok(x)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Probability of the unit bin around `y` under N(μ, σ²), evaluated in
/// whichever tail keeps the subtraction well conditioned.
fn bin_probability(y: f64, mu: f64, sigma: f64) -> (f64, f64, f64) {
    let a = (y + 0.5 - mu) / sigma;
    let b = (y - 0.5 - mu) / sigma;
    let p = if y > mu {
        normal_cdf(-b) - normal_cdf(-a)
    } else {
        normal_cdf(a) - normal_cdf(b)
    };
    (p, a, b)
}

/// Bits of one latent symbol: −log2(max(P(bin), 1e-9)).
pub fn symbol_bits(y: f64, mu: f64, sigma: f64) -> f64 {
    -bin_probability(y, mu, sigma).0.max(MIN_PROBABILITY).log2()
}

/// Estimated bits per pixel of a latent code under per-channel N(μ, σ²).
pub fn estimate_rate<T: Real>(code: &LatentCode<T>, mean: &[f64], sigma: &[f64]) -> Result<f64> {
    let s = code.y_hat.shape();
    if s.len() != 4 || s[1] != mean.len() || s[1] != sigma.len() {
        return Err(Error::shape(
            "estimate_rate",
            format!("latent {s:?} with {} means and {} scales", mean.len(), sigma.len()),
        ));
    }
    if sigma.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Param("rate model scales must be positive".into()));
    }
    let plane = s[2] * s[3];
    let total: f64 = code
        .y_hat
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = (i / plane) % s[1];
            symbol_bits(v.as_f64(), mean[ch], sigma[ch])
        })
        .sum();
    Ok(total / (s[0] * code.height * code.width) as f64)
}

struct GaussianBits;

impl<T: Real> Backward<T> for GaussianBits {
    fn name(&self) -> &'static str {
        "gaussian_bits"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (y, mu, sigma) = (inputs[0], inputs[1], inputs[2]);
        let up = grad.item()?.as_f64();
        let s = y.shape();
        let (channels, plane) = (s[1], s[2] * s[3]);
        let mut gy = vec![T::zero(); y.len()];
        let mut gmu = vec![0.0f64; channels];
        let mut gsig = vec![0.0f64; channels];
        let ln2 = std::f64::consts::LN_2;
        for (i, v) in y.data().iter().enumerate() {
            let ch = (i / plane) % channels;
            let (m, sg) = (mu.data()[ch].as_f64(), sigma.data()[ch].as_f64());
            let (p, a, b) = bin_probability(v.as_f64(), m, sg);
            if p < MIN_PROBABILITY {
                continue;
            }
            let dbits_dp = -up / (p * ln2);
            let (pa, pb) = (normal_pdf(a), normal_pdf(b));
            let dp_dy = (pa - pb) / sg;
            gy[i] = c(dbits_dp * dp_dy);
            gmu[ch] -= dbits_dp * dp_dy;
            gsig[ch] -= dbits_dp * (a * pa - b * pb) / sg;
        }
        Ok(vec![
            Some(Tensor::new(s, gy)?),
            Some(Tensor::new(mu.shape(), gmu.into_iter().map(c).collect())?),
            Some(Tensor::new(sigma.shape(), gsig.into_iter().map(c).collect())?),
        ])
    }
}

/// Total bits of `y_hat` (B, C, h, w) under per-channel N(mean, sigma²),
/// as a scalar tape node.
pub fn gaussian_bits<T: Real>(g: &mut Graph<T>, y_hat: Var, mean: Var, sigma: Var) -> Result<Var> {
    let s = g.shape(y_hat).to_vec();
    if s.len() != 4 || g.value(mean).len() != s[1] || g.value(sigma).len() != s[1] {
        return Err(Error::shape(
            "gaussian_bits",
            format!("latent {s:?} with mean {:?} and scale {:?}", g.shape(mean), g.shape(sigma)),
        ));
    }
    let plane = s[2] * s[3];
    let (yv, mv, sv) = (g.value(y_hat), g.value(mean), g.value(sigma));
    let total: f64 = yv
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = (i / plane) % s[1];
            symbol_bits(v.as_f64(), mv.data()[ch].as_f64(), sv.data()[ch].as_f64())
        })
        .sum();
    Ok(g.push(Tensor::scalar(c(total)), &[y_hat, mean, sigma], Box::new(GaussianBits)))
}
