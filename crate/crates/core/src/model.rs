//! Encoder, quantizer, decoder and rate model trained as one network.
//!
//! The trunk maps preprocessed features to `e ∈ [0, 1]^d` (sigmoid output),
//! which feeds two heads:
//! `h_e` (sigmoid) gives the `d × A` bit probabilities, `h_a` (softplus) the
//! nonnegative allocation slopes. The decoder sees the masked code, the
//! sensitive one-hot (unless the side channel is disabled) and `β`. The
//! objective per sample is `½‖x - x̂‖² + β · code_nll(z | β)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{expect_magic, len_u32, read_f32, read_u32, write_f32, write_u32};
use crate::data::{Preprocessing, TabularDataset};
use crate::entropy_model::{EntropyParams, RateOptions};
use crate::error::{Error, Result};
use crate::nn::{Adam, Linear, Mlp, MlpCache, Params};
use crate::quantizer::{self, allocation, bit_weight, sigmoid, BitAllocation, BitCode};
use crate::rng::{substream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One model for all fairness levels, `β` drawn during training.
    #[default]
    Sofair,
    /// One model per fixed `β`.
    Msfair,
    /// Single-shot without the sensitive side channel in the decoder.
    SofairNos,
}

impl Mode {
    pub fn uses_side_channel(self) -> bool {
        !matches!(self, Mode::SofairNos)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sofair" => Ok(Mode::Sofair),
            "msfair" => Ok(Mode::Msfair),
            "sofair_nos" | "sofair-nos" => Ok(Mode::SofairNos),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        }
    }
}

/// Whether one `β` is drawn per sample or shared across a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaSampling {
    #[default]
    PerSample,
    PerBatch,
}

/// Forward treatment of the bit probabilities and mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Hard bits and hard mask forward, identity / soft-mask gradients back.
    #[default]
    StraightThrough,
    /// Probabilities and soft mask forward; exact gradients. For checks.
    Identity,
}

/// How the `d × A` bit matrix is produced from `e`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BitHead {
    /// Bits are the `A`-bit binary expansion of each `e_j`; the backward
    /// pass treats `z_j` as `e_j` (identity through the rounding).
    #[default]
    Expansion,
    /// A linear layer with sigmoid output gives one probability per bit.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaDistribution {
    pub low: f64,
    pub high: f64,
}

impl Default for BetaDistribution {
    fn default() -> Self {
        Self { low: 0.0, high: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub fixed_beta: Option<f64>,
    pub latent_dim: usize,
    pub max_bits: usize,
    pub components: usize,
    pub bit_head: BitHead,
    /// Steps over which the rate weight ramps linearly from 0 to 1.
    #[serde(default)]
    pub rate_warmup: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub beta_distribution: BetaDistribution,
    pub beta_sampling: BetaSampling,
    pub rounding: Rounding,
    pub rate: RateOptions,
    pub seed: u64,
    /// Output maps of the two encoder heads (learned bit head only for the
    /// first); informational.
    pub bit_head_map: String,
    pub allocation_head_map: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Sofair,
            fixed_beta: None,
            latent_dim: 8,
            max_bits: 8,
            components: 5,
            bit_head: BitHead::Expansion,
            rate_warmup: 0,
            encoder_hidden: vec![128, 128],
            decoder_hidden: vec![128, 128],
            learning_rate: 3e-5,
            iterations: 27_000,
            batch_size: 64,
            beta_distribution: BetaDistribution::default(),
            beta_sampling: BetaSampling::PerSample,
            rounding: Rounding::StraightThrough,
            rate: RateOptions::default(),
            seed: 0,
            bit_head_map: "sigmoid".into(),
            allocation_head_map: "softplus".into(),
        }
    }
}

impl ModelConfig {
    /// Small profile for laptops and CI: 5K iterations at a larger step size.
    pub fn desk() -> Self {
        Self { learning_rate: 1e-3, iterations: 5_000, rate_warmup: 1_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.max_bits == 0 || self.components == 0 {
            return Err(Error::InvalidArgument("latent_dim, max_bits and components must be ≥ 1".into()));
        }
        if self.max_bits > 52 {
            return Err(Error::InvalidArgument(format!("max_bits = {} exceeds 52", self.max_bits)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.learning_rate)));
        }
        let BetaDistribution { low, high } = self.beta_distribution;
        if !(0.0 <= low && low <= high && high <= 1.0) {
            return Err(Error::OutOfRange(format!("beta distribution [{low}, {high}] not inside [0, 1]")));
        }
        match (self.mode, self.fixed_beta) {
            (Mode::Msfair, None) => Err(Error::InvalidArgument("msfair mode requires fixed_beta".into())),
            (Mode::Msfair, Some(b)) if !(0.0..=1.0).contains(&b) => {
                Err(Error::OutOfRange(format!("fixed_beta = {b} is outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::OutOfRange(format!("beta = {beta} is outside [0, 1]")));
    }
    Ok(())
}

/// Encoder head outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `n × (d·A)` bit probabilities, row-major per sample as `[j][l]`.
    pub bit_probs: Array2<f64>,
    /// `n × d` nonnegative allocation slopes.
    pub h_a: Array2<f64>,
    max_bits: usize,
}

impl EncoderOutput {
    /// Bit probabilities of sample `i` as a `d × A` view.
    pub fn bit_logits(&self, i: usize) -> ArrayView2<'_, f64> {
        let d = self.h_a.ncols();
        self.bit_probs.row(i).into_shape_with_order((d, self.max_bits)).expect("contiguous row")
    }

    pub fn len(&self) -> usize {
        self.h_a.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything a batch forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Code values fed to the decoder, `n × d`.
    pub z: Array2<f64>,
    /// Continuous allocations, `n × d`.
    pub alloc: Array2<f64>,
    pub x_hat: Array2<f64>,
    /// Per-sample `½‖x - x̂‖²`.
    pub recon_nll: Vec<f64>,
    /// Per-sample code NLL in nats.
    pub rate: Vec<f64>,
    pub betas: Vec<f64>,
}

impl ForwardOutput {
    pub fn mean_recon(&self) -> f64 {
        self.recon_nll.iter().sum::<f64>() / self.recon_nll.len() as f64
    }

    pub fn mean_rate(&self) -> f64 {
        self.rate.iter().sum::<f64>() / self.rate.len() as f64
    }

    /// Mean of `β_i · rate_i`.
    pub fn mean_weighted_rate(&self) -> f64 {
        self.rate.iter().zip(&self.betas).map(|(r, b)| b * r).sum::<f64>() / self.rate.len() as f64
    }

    /// Training objective: mean reconstruction NLL plus mean `β`-weighted rate.
    pub fn loss(&self) -> f64 {
        self.mean_recon() + self.mean_weighted_rate()
    }
}

struct Pass {
    trunk_cache: MlpCache,
    t: Array2<f64>,
    probs: Array2<f64>,
    la: Array2<f64>,
    h: Array2<f64>,
    bits: Array2<f64>,
    mask: Array2<f64>,
    soft_mask: Array2<f64>,
    dec_cache: MlpCache,
    out: ForwardOutput,
}

/// Trainable weights plus their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub sensitive_dim: usize,
    pub trunk: Mlp,
    /// Present only for [`BitHead::Learned`].
    pub h_e: Option<Linear>,
    pub h_a: Linear,
    pub decoder: Mlp,
    pub entropy: EntropyParams,
}

impl Model {
    /// Randomly initialized model; weights are rounded to `f32` so a
    /// checkpoint reproduces them exactly.
    pub fn new(config: ModelConfig, input_dim: usize, sensitive_dim: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || sensitive_dim == 0 {
            return Err(Error::InvalidArgument("input and sensitive widths must be ≥ 1".into()));
        }
        let mut rng = substream(config.seed, "init");
        let (d, a) = (config.latent_dim, config.max_bits);
        let mut sizes = vec![input_dim];
        sizes.extend(&config.encoder_hidden);
        sizes.push(d);
        let trunk = Mlp::init(&sizes, &mut rng);
        let h_e = match config.bit_head {
            BitHead::Learned => Some(Linear::init(d, d * a, &mut rng)),
            BitHead::Expansion => None,
        };
        let h_a = Linear::init(d, d, &mut rng);
        let side = if config.mode.uses_side_channel() { sensitive_dim } else { 0 };
        let mut sizes = vec![d + side + 1];
        sizes.extend(&config.decoder_hidden);
        sizes.push(input_dim);
        let decoder = Mlp::init(&sizes, &mut rng);
        let entropy = EntropyParams::init(d, config.components, config.rate, &mut rng)?;
        let mut model = Self { config, input_dim, sensitive_dim, trunk, h_e, h_a, decoder, entropy };
        model.round_to_f32();
        Ok(model)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            input_dim: self.input_dim,
            sensitive_dim: self.sensitive_dim,
            trunk: self.trunk.zeros_like(),
            h_e: self.h_e.as_ref().map(Linear::zeros_like),
            h_a: self.h_a.zeros_like(),
            decoder: self.decoder.zeros_like(),
            entropy: self.entropy.zeros_like(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn max_bits(&self) -> usize {
        self.config.max_bits
    }

    /// Named tensors with shapes, in serialization order.
    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.trunk.layers.iter().enumerate() {
            push_linear(&mut out, format!("trunk.{i}"), l);
        }
        if let Some(h_e) = &self.h_e {
            push_linear(&mut out, "h_e".into(), h_e);
        }
        push_linear(&mut out, "h_a".into(), &self.h_a);
        for (i, l) in self.decoder.layers.iter().enumerate() {
            push_linear(&mut out, format!("decoder.{i}"), l);
        }
        let (d, k) = (self.entropy.dim, self.entropy.components);
        for (name, v) in self.entropy.tensors() {
            let shape = if name.starts_with("w_") { vec![d, k, d] } else { vec![d, k] };
            out.push((format!("entropy.{name}"), shape, v.as_slice()));
        }
        out
    }

    /// Mutable slices in the order of [`Model::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.trunk.params_mut();
        if let Some(h_e) = &mut self.h_e {
            out.extend(h_e.params_mut());
        }
        out.extend(self.h_a.params_mut());
        out.extend(self.decoder.params_mut());
        out.extend(self.entropy.tensors_mut().into_iter().map(|(_, v)| v.as_mut_slice()));
        out
    }

    fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }

    /// SHA-256 over tensor names, shapes and `f32` little-endian values.
    pub fn weight_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, shape, data) in self.tensors() {
            h.update(name.as_bytes());
            for s in shape {
                h.update((s as u64).to_le_bytes());
            }
            for &v in data {
                h.update((v as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_x(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch(format!("input has {} columns, model expects {}", x.ncols(), self.input_dim)));
        }
        if x.nrows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite input".into()));
        }
        Ok(())
    }

    fn check_s(&self, s: ArrayView2<'_, f64>, n: usize) -> Result<()> {
        if s.dim() != (n, self.sensitive_dim) {
            return Err(Error::DimensionMismatch(format!(
                "sensitive block {:?}, expected ({n}, {})",
                s.dim(),
                self.sensitive_dim
            )));
        }
        for (i, row) in s.outer_iter().enumerate() {
            if row.iter().any(|&v| v != 0.0 && v != 1.0) || row.sum() != 1.0 {
                return Err(Error::InvalidArgument(format!("sensitive row {i} is not one-hot")));
            }
        }
        Ok(())
    }

    fn bit_probs(&self, e: &Array2<f64>) -> Array2<f64> {
        match &self.h_e {
            Some(h_e) => h_e.forward(e.view()).mapv(sigmoid),
            None => {
                let nb = self.max_bits();
                let mut out = Array2::zeros((e.nrows(), e.ncols() * nb));
                for ((i, j), &v) in e.indexed_iter() {
                    let bits = quantizer::binary_expand(v.min(1.0 - f64::EPSILON), nb).expect("e in [0, 1)");
                    for (l, b) in bits.into_iter().enumerate() {
                        out[[i, j * nb + l]] = f64::from(b);
                    }
                }
                out
            }
        }
    }

    /// Bit probabilities and allocation slopes.
    pub fn encode(&self, x: ArrayView2<'_, f64>) -> Result<EncoderOutput> {
        self.check_x(x)?;
        let t = self.trunk.forward(x).mapv(sigmoid);
        Ok(EncoderOutput {
            bit_probs: self.bit_probs(&t),
            h_a: self.h_a.forward(t.view()).mapv(softplus),
            max_bits: self.max_bits(),
        })
    }

    /// Hard codes of every row at one fairness level.
    pub fn codes(&self, x: ArrayView2<'_, f64>, beta: f64) -> Result<Vec<BitCode>> {
        check_beta(beta)?;
        let enc = self.encode(x)?;
        (0..enc.len())
            .map(|i| {
                let alloc = quantizer::bit_allocation(enc.h_a.row(i).as_slice().expect("contiguous"), beta, self.max_bits())?;
                quantizer::quantize(enc.bit_logits(i), &alloc)
            })
            .collect()
    }

    /// Per-row allocation at `beta`.
    pub fn allocations(&self, x: ArrayView2<'_, f64>, beta: f64) -> Result<Vec<BitAllocation>> {
        check_beta(beta)?;
        let enc = self.encode(x)?;
        enc.h_a
            .outer_iter()
            .map(|h| quantizer::bit_allocation(h.as_slice().expect("contiguous"), beta, self.max_bits()))
            .collect()
    }

    /// Code values `z` at `beta`, `n × d`.
    pub fn latent(&self, x: ArrayView2<'_, f64>, beta: f64) -> Result<Array2<f64>> {
        let codes = self.codes(x, beta)?;
        let d = self.latent_dim();
        Ok(Array2::from_shape_fn((codes.len(), d), |(i, j)| codes[i].values()[j]))
    }

    fn decoder_input(&self, z: ArrayView2<'_, f64>, s: ArrayView2<'_, f64>, betas: &[f64]) -> Array2<f64> {
        let b = Array2::from_shape_fn((z.nrows(), 1), |(i, _)| betas[i]);
        if self.config.mode.uses_side_channel() {
            concatenate(Axis(1), &[z, s, b.view()]).expect("row counts agree")
        } else {
            concatenate(Axis(1), &[z, b.view()]).expect("row counts agree")
        }
    }

    /// Decodes given code values; `s` is ignored without a side channel.
    pub fn decode(&self, z: ArrayView2<'_, f64>, s: ArrayView2<'_, f64>, beta: f64) -> Result<Array2<f64>> {
        check_beta(beta)?;
        if z.ncols() != self.latent_dim() {
            return Err(Error::DimensionMismatch(format!("code has {} columns, model has d={}", z.ncols(), self.latent_dim())));
        }
        self.check_s(s, z.nrows())?;
        let betas = vec![beta; z.nrows()];
        Ok(self.decoder.forward(self.decoder_input(z, s, &betas).view()))
    }

    fn pass(&self, x: ArrayView2<'_, f64>, s: ArrayView2<'_, f64>, betas: &[f64]) -> Result<Pass> {
        self.check_x(x)?;
        let n = x.nrows();
        self.check_s(s, n)?;
        if betas.len() != n {
            return Err(Error::DimensionMismatch(format!("{} betas for {n} rows", betas.len())));
        }
        betas.iter().try_for_each(|&b| check_beta(b))?;
        let (d, nb) = (self.latent_dim(), self.max_bits());
        let (t, trunk_cache) = self.trunk.forward_cached(x);
        let t = t.mapv(sigmoid);
        let probs = self.bit_probs(&t);
        let la = self.h_a.forward(t.view());
        let h = la.mapv(softplus);
        let alloc = Array2::from_shape_fn((n, d), |(i, j)| allocation(h[[i, j]], betas[i], nb));
        let soft_mask = Array2::from_shape_fn((n, d * nb), |(i, c)| sigmoid(alloc[[i, c / nb]] - (c % nb + 1) as f64));
        let (bits, mask) = match self.config.rounding {
            Rounding::StraightThrough => (
                probs.mapv(|p| f64::from(u8::from(p >= 0.5))),
                Array2::from_shape_fn((n, d * nb), |(i, c)| f64::from(u8::from(alloc[[i, c / nb]] >= (c % nb + 1) as f64))),
            ),
            Rounding::Identity => (probs.clone(), soft_mask.clone()),
        };
        let mut z = Array2::zeros((n, d));
        for i in 0..n {
            for c in 0..d * nb {
                z[[i, c / nb]] += mask[[i, c]] * bits[[i, c]] * bit_weight(c % nb + 1);
            }
        }
        let mut rate = Vec::with_capacity(n);
        for i in 0..n {
            let zi = z.row(i).to_vec();
            let ai = alloc.row(i).to_vec();
            rate.push(self.entropy.code_nll(&zi, &ai, betas[i])?);
        }
        let dec_in = self.decoder_input(z.view(), s, betas);
        let (x_hat, dec_cache) = self.decoder.forward_cached(dec_in.view());
        let recon_nll = (0..n)
            .map(|i| 0.5 * x.row(i).iter().zip(x_hat.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect();
        Ok(Pass {
            trunk_cache,
            t,
            probs,
            la,
            h,
            bits,
            mask,
            soft_mask,
            dec_cache,
            out: ForwardOutput { z, alloc, x_hat, recon_nll, rate, betas: betas.to_vec() },
        })
    }

    /// Batch forward pass with one `β` per row.
    pub fn forward(&self, x: ArrayView2<'_, f64>, s: ArrayView2<'_, f64>, betas: &[f64]) -> Result<ForwardOutput> {
        Ok(self.pass(x, s, betas)?.out)
    }

    /// Reconstruction and its mean squared error in preprocessed space.
    pub fn reconstruct(&self, x: ArrayView2<'_, f64>, s: ArrayView2<'_, f64>, beta: f64) -> Result<(Array2<f64>, f64)> {
        let out = self.forward(x, s, &vec![beta; x.nrows()])?;
        let mse = mse(x, out.x_hat.view());
        Ok((out.x_hat, mse))
    }

    /// Loss of the batch and its gradient with respect to every weight.
    pub fn loss_and_grad(&self, x: ArrayView2<'_, f64>, s: ArrayView2<'_, f64>, betas: &[f64]) -> Result<(ForwardOutput, Model)> {
        self.loss_and_grad_weighted(x, s, betas, 1.0)
    }

    /// As [`Model::loss_and_grad`] with the rate term multiplied by `rate_weight`.
    pub fn loss_and_grad_weighted(
        &self,
        x: ArrayView2<'_, f64>,
        s: ArrayView2<'_, f64>,
        betas: &[f64],
        rate_weight: f64,
    ) -> Result<(ForwardOutput, Model)> {
        let pass = self.pass(x, s, betas)?;
        let n = x.nrows();
        let inv_n = 1.0 / n as f64;
        let (d, nb) = (self.latent_dim(), self.max_bits());
        let mut grad = self.zeros_like();

        let dxhat = (&pass.out.x_hat - &x) * inv_n;
        let ddec = self.decoder.backward(&pass.dec_cache, dxhat, &mut grad.decoder);
        let mut dz = ddec.slice(s![.., ..d]).to_owned();
        let mut da = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            let up = betas[i] * inv_n * rate_weight;
            if up == 0.0 {
                continue;
            }
            let zi = pass.out.z.row(i).to_vec();
            let ai = pass.out.alloc.row(i).to_vec();
            let (_, g) = self.entropy.nll_backward(&zi, &ai, betas[i], up, &mut grad.entropy)?;
            for j in 0..d {
                dz[[i, j]] += up * g.z[j];
                da[[i, j]] += up * g.alloc[j];
            }
        }
        let mut dlogit = Array2::<f64>::zeros((n, d * nb));
        for i in 0..n {
            for c in 0..d * nb {
                let j = c / nb;
                let w = bit_weight(c % nb + 1);
                let p = pass.probs[[i, c]];
                dlogit[[i, c]] = dz[[i, j]] * pass.mask[[i, c]] * w * p * (1.0 - p);
                let sm = pass.soft_mask[[i, c]];
                da[[i, j]] += dz[[i, j]] * pass.bits[[i, c]] * w * sm * (1.0 - sm);
            }
        }
        let mut dla = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                let (dadh, _) = quantizer::allocation_grad(pass.h[[i, j]], betas[i], nb);
                dla[[i, j]] = da[[i, j]] * dadh * sigmoid(pass.la[[i, j]]);
            }
        }
        let mut dt = self.h_a.backward(pass.t.view(), dla.view(), &mut grad.h_a);
        match (&self.h_e, grad.h_e.as_mut()) {
            (Some(h_e), Some(g)) => dt += &h_e.backward(pass.t.view(), dlogit.view(), g),
            _ => dt += &dz,
        }
        let dt = dt * pass.t.mapv(|e| e * (1.0 - e));
        self.trunk.backward(&pass.trunk_cache, dt, &mut grad.trunk);
        Ok((pass.out, grad))
    }
}

type NamedTensor<'a> = (String, Vec<usize>, &'a [f64]);

fn push_linear<'a>(out: &mut Vec<NamedTensor<'a>>, prefix: String, l: &'a Linear) {
    let p = l.params();
    out.push((format!("{prefix}.weight"), vec![l.fan_in(), l.fan_out()], p[0]));
    out.push((format!("{prefix}.bias"), vec![l.fan_out()], p[1]));
}

/// Mean squared error per element.
pub fn mse(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// One logged optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub recon_nll: f64,
    pub rate: f64,
    pub weighted_rate: f64,
    pub mean_beta: f64,
}

/// A trained model with the data description it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub stats: Preprocessing,
    pub feature_names: Vec<String>,
    pub sensitive_names: Vec<String>,
    pub trace: Vec<StepRecord>,
}

fn draw_betas(config: &ModelConfig, n: usize, rng: &mut Rng) -> Vec<f64> {
    if let (Mode::Msfair, Some(b)) = (config.mode, config.fixed_beta) {
        return vec![b; n];
    }
    let BetaDistribution { low, high } = config.beta_distribution;
    let mut draw = || if high > low { rng.random_range(low..=high) } else { low };
    match config.beta_sampling {
        BetaSampling::PerSample => (0..n).map(|_| draw()).collect(),
        BetaSampling::PerBatch => vec![draw(); n],
    }
}

/// Trains a model on `dataset` with Adam.
pub fn train(dataset: &TabularDataset, config: &ModelConfig) -> Result<ModelCheckpoint> {
    let mut model = Model::new(config.clone(), dataset.p(), dataset.d_s())?;
    let mut batch_rng = substream(config.seed, "batch");
    let mut beta_rng = substream(config.seed, "beta");
    let mut adam = Adam::new(config.learning_rate);
    let n = dataset.n();
    if n == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    let mut trace = Vec::with_capacity(config.iterations);
    for step in 0..config.iterations {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| batch_rng.random_range(0..n)).collect();
        let x = dataset.features.select(Axis(0), &idx);
        let s = dataset.sensitive.select(Axis(0), &idx);
        let betas = draw_betas(config, idx.len(), &mut beta_rng);
        let rate_weight = if step < config.rate_warmup { step as f64 / config.rate_warmup as f64 } else { 1.0 };
        let (out, grad) = model.loss_and_grad_weighted(x.view(), s.view(), &betas, rate_weight)?;
        let loss = out.loss();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        trace.push(StepRecord {
            step,
            loss,
            recon_nll: out.mean_recon(),
            rate: out.mean_rate(),
            weighted_rate: out.mean_weighted_rate(),
            mean_beta: betas.iter().sum::<f64>() / betas.len() as f64,
        });
        let mut grad = grad;
        let grads: Vec<Vec<f64>> = grad.tensors_mut().into_iter().map(|g| g.to_vec()).collect();
        adam.step(model.tensors_mut(), grads.iter().map(Vec::as_slice).collect());
        if step % 1000 == 0 {
            log::debug!("step {step}: loss {loss:.5}");
        }
    }
    model.round_to_f32();
    Ok(ModelCheckpoint {
        model,
        stats: dataset.stats.clone(),
        feature_names: dataset.feature_names.clone(),
        sensitive_names: dataset.sensitive_names.clone(),
        trace,
    })
}

const CKPT_MAGIC: &[u8; 5] = b"SFCK1";
const MAX_HEADER: usize = 1 << 30;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    input_dim: usize,
    sensitive_dim: usize,
    stats: Preprocessing,
    feature_names: Vec<String>,
    sensitive_names: Vec<String>,
    trace: Vec<StepRecord>,
    tensors: Vec<TensorEntry>,
}

impl ModelCheckpoint {
    /// Writes the container.
    ///
    /// Layout: magic `SFCK1`; `u32` little-endian header length; UTF-8 JSON
    /// header (config, widths, preprocessing, feature names, sensitive names,
    /// loss trace, tensor index of names and shapes); then every tensor in
    /// index order as little-endian `f32`, row-major.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let tensors = self.model.tensors();
        let header = CheckpointHeader {
            config: self.model.config.clone(),
            input_dim: self.model.input_dim,
            sensitive_dim: self.model.sensitive_dim,
            stats: self.stats.clone(),
            feature_names: self.feature_names.clone(),
            sensitive_names: self.sensitive_names.clone(),
            trace: self.trace.clone(),
            tensors: tensors.iter().map(|(name, shape, _)| TensorEntry { name: name.clone(), shape: shape.clone() }).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CKPT_MAGIC)?;
        write_u32(w, len_u32(json.len())?)?;
        w.write_all(&json)?;
        for (_, _, data) in tensors {
            data.iter().try_for_each(|&v| write_f32(w, v as f32))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        expect_magic(r, CKPT_MAGIC)?;
        let len = read_u32(r, "header length")? as usize;
        if len > MAX_HEADER {
            return Err(Error::Corrupt(format!("header length {len} is implausible")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)
            .map_err(|e| Error::Corrupt(format!("truncated header: {e}")))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| Error::Corrupt(format!("bad header: {e}")))?;
        let mut model = Model::new(header.config, header.input_dim, header.sensitive_dim)
            .map_err(|e| Error::Corrupt(format!("invalid stored config: {e}")))?;
        let expected: Vec<(String, Vec<usize>)> =
            model.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        let stored: Vec<(String, Vec<usize>)> = header.tensors.into_iter().map(|t| (t.name, t.shape)).collect();
        if expected != stored {
            return Err(Error::Corrupt("tensor index does not match the stored configuration".into()));
        }
        for (t, (name, _)) in model.tensors_mut().into_iter().zip(&expected) {
            for v in t.iter_mut() {
                *v = f64::from(read_f32(r, name)?);
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Corrupt("trailing bytes after tensors".into()));
        }
        Ok(Self {
            model,
            stats: header.stats,
            feature_names: header.feature_names,
            sensitive_names: header.sensitive_names,
            trace: header.trace,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    /// SHA-256 of the serialized container.
    pub fn file_hash(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(hex::encode(Sha256::digest(&buf)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_biased, SynthSpec};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            latent_dim: 2,
            max_bits: 3,
            components: 2,
            encoder_hidden: vec![6],
            decoder_hidden: vec![6],
            iterations: 30,
            batch_size: 16,
            learning_rate: 1e-2,
            seed: 11,
            ..ModelConfig::default()
        }
    }

    fn batch(n: usize, p: usize, ds: usize, seed: u64) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
        let mut rng = substream(seed, "batch-test");
        let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.5..1.5));
        let s = Array2::from_shape_fn((n, ds), |(i, k)| f64::from(u8::from(i % ds == k)));
        let b = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        (x, s, b)
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { mode: Mode::Msfair, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { mode: Mode::Msfair, fixed_beta: Some(1.2), ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { latent_dim: 0, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig::desk().validate().is_ok());
        assert_eq!("sofair_nos".parse::<Mode>().unwrap(), Mode::SofairNos);
    }

    #[test]
    fn encode_ranges_and_full_mask_at_zero() {
        let m = Model::new(ModelConfig::default(), 5, 2).unwrap();
        let (x, s, _) = batch(200, 5, 2, 1);
        let enc = m.encode(x.view()).unwrap();
        assert!(enc.bit_probs.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(enc.h_a.iter().all(|&h| h >= 0.0));
        assert_eq!(m.encode(x.view()).unwrap(), enc);
        for c in m.codes(x.view(), 0.0).unwrap() {
            assert!(c.active_counts().iter().all(|&k| k == 8));
        }
        assert!(m.encode(Array2::zeros((3, 4)).view()).is_err());
        let mut bad = s.clone();
        bad[[0, 1]] = 1.0;
        assert!(m.forward(x.view(), bad.view(), &vec![0.5; 200]).is_err());
    }

    #[test]
    fn loss_recomposes() {
        let m = Model::new(ModelConfig::default(), 4, 3).unwrap();
        let (x, s, b) = batch(32, 4, 3, 2);
        let out = m.forward(x.view(), s.view(), &b).unwrap();
        let n = 32.0;
        let recon = out.recon_nll.iter().sum::<f64>() / n;
        let weighted = out.rate.iter().zip(&b).map(|(r, b)| b * r).sum::<f64>() / n;
        assert_eq!(out.loss(), recon + weighted);
        for (i, r) in out.recon_nll.iter().enumerate() {
            let direct: f64 = 0.5 * x.row(i).iter().zip(out.x_hat.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            assert_eq!(*r, direct);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = ModelConfig { rounding: Rounding::Identity, bit_head: BitHead::Learned, ..tiny_config() };
        let m = Model::new(cfg, 3, 2).unwrap();
        let (x, s, b) = batch(8, 3, 2, 3);
        let (_, grad) = m.loss_and_grad(x.view(), s.view(), &b).unwrap();
        let eps = 1e-6;
        let analytic: Vec<Vec<f64>> = grad.tensors().into_iter().map(|(_, _, g)| g.to_vec()).collect();
        let n_tensors = analytic.len();
        let mut worst: f64 = 0.0;
        for ti in 0..n_tensors {
            for k in 0..analytic[ti].len() {
                let mut plus = m.clone();
                plus.tensors_mut()[ti][k] += eps;
                let mut minus = m.clone();
                minus.tensors_mut()[ti][k] -= eps;
                let lp = plus.forward(x.view(), s.view(), &b).unwrap().loss();
                let lm = minus.forward(x.view(), s.view(), &b).unwrap().loss();
                let fd = (lp - lm) / (2.0 * eps);
                let g = analytic[ti][k];
                let err = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
        assert!(worst <= 1e-3, "worst relative gradient error {worst}");
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let ds = synth_biased(&SynthSpec::new(300, 4, 2, 0.5, 1)).unwrap();
        let cfg = ModelConfig { mode: Mode::Msfair, fixed_beta: Some(0.0), iterations: 200, ..tiny_config() };
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.model.weight_hash(), b.model.weight_hash());
        let untrained = Model::new(cfg.clone(), 4, 2).unwrap();
        let zeros = vec![0.0; ds.n()];
        let before = untrained.forward(ds.features.view(), ds.sensitive.view(), &zeros).unwrap().mean_recon();
        let after = a.model.forward(ds.features.view(), ds.sensitive.view(), &zeros).unwrap().mean_recon();
        assert!(after <= before, "{after} > {before}");
        assert!(a.trace.iter().all(|r| r.loss == r.recon_nll + r.weighted_rate));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let ds = synth_biased(&SynthSpec::new(100, 4, 2, 0.5, 2)).unwrap();
        let ck = train(&ds, &tiny_config()).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = ModelCheckpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let betas = vec![0.3; ds.n()];
        let a = ck.model.forward(ds.features.view(), ds.sensitive.view(), &betas).unwrap();
        let b = back.model.forward(ds.features.view(), ds.sensitive.view(), &betas).unwrap();
        assert_eq!(a.x_hat, b.x_hat);
        assert_eq!(a.rate, b.rate);
        assert!(matches!(ModelCheckpoint::read_from(&mut &buf[..buf.len() - 3]), Err(Error::Corrupt(_))));
        let mut flipped = buf.clone();
        flipped[0] = b'X';
        assert!(matches!(ModelCheckpoint::read_from(&mut flipped.as_slice()), Err(Error::Corrupt(_))));
    }

    #[test]
    fn no_side_channel_ignores_s() {
        let m = Model::new(ModelConfig { mode: Mode::SofairNos, ..tiny_config() }, 3, 2).unwrap();
        let (x, s, b) = batch(6, 3, 2, 4);
        let flipped = s.mapv(|v| 1.0 - v);
        let a = m.forward(x.view(), s.view(), &b).unwrap();
        let c = m.forward(x.view(), flipped.view(), &b).unwrap();
        assert_eq!(a.x_hat, c.x_hat);
        assert_eq!(m.decoder.input_dim(), 2 + 1);
    }
}
