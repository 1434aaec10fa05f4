//! β-conditioned autoregressive mixture-of-logistics rate model.
//!
//! For each latent dimension `j` the model places a mixture of `K` logistic
//! distributions whose locations and log-scales depend affinely on the
//! visible context `Γ_j ⊙ z` (only dimensions before `j`), and whose every
//! coefficient is itself an affine function of `β`. The rate of a code is
//! the negative log mass the mixture assigns to a bin of half-width
//! `2^{-a_j}` around each `z_j`:
//!
//! ```text
//! -Σ_j log Σ_k π_{j,k} [σ((z_j + μ_{j,k}) / γ_{j,k} + 2^{-a_j}) - σ((z_j + μ_{j,k}) / γ_{j,k} - 2^{-a_j})]
//! ```
//!
//! The sigmoid difference is evaluated in log space as
//! `log σ(A) + log σ(-B) + log(1 - e^{-(A-B)})`, which is exact and does not
//! cancel in the tails.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::sigmoid;
use crate::rng::Rng;

/// Smallest per-component mass before taking the log.
pub const MASS_FLOOR: f64 = 1e-12;

/// How the bin half-width enters the sigmoid arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BinPlacement {
    /// `σ((z + μ)/γ ± w)`.
    #[default]
    Literal,
    /// `σ((z + μ ± w)/γ)`.
    InScale,
}

/// Bin half-width as a function of the allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BinWidth {
    /// `w = 2^{-a}`.
    #[default]
    Literal,
    /// `w = 2^{-a} / 2`.
    HalfStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RateOptions {
    pub placement: BinPlacement,
    pub width: BinWidth,
}

impl RateOptions {
    fn half_width(&self, a: f64) -> f64 {
        let w = (-a).exp2();
        match self.width {
            BinWidth::Literal => w,
            BinWidth::HalfStep => 0.5 * w,
        }
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Trainable parameters of the rate model.
///
/// Every field is stored as `slope * β + intercept`; `w_*` tensors are laid
/// out `[j][k][j']` and only entries with `j' < j` are ever read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyParams {
    pub dim: usize,
    pub components: usize,
    pub options: RateOptions,
    pub mu0_slope: Vec<f64>,
    pub mu0_bias: Vec<f64>,
    pub log_gamma0_slope: Vec<f64>,
    pub log_gamma0_bias: Vec<f64>,
    pub w_mu_slope: Vec<f64>,
    pub w_mu_bias: Vec<f64>,
    pub w_gamma_slope: Vec<f64>,
    pub w_gamma_bias: Vec<f64>,
    pub logit_slope: Vec<f64>,
    pub logit_bias: Vec<f64>,
}

/// Mixture parameters of every dimension for one `(z, β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    pub mu: Vec<f64>,
    pub log_gamma: Vec<f64>,
    pub pi: Vec<f64>,
    components: usize,
}

impl Conditional {
    pub fn mu(&self, j: usize, k: usize) -> f64 {
        self.mu[j * self.components + k]
    }

    pub fn gamma(&self, j: usize, k: usize) -> f64 {
        self.log_gamma[j * self.components + k].exp()
    }

    pub fn pi(&self, j: usize, k: usize) -> f64 {
        self.pi[j * self.components + k]
    }
}

/// Gradients of the summed code NLL with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrad {
    pub z: Vec<f64>,
    pub alloc: Vec<f64>,
    pub beta: f64,
}

impl EntropyParams {
    /// All-zero parameters (also used as a gradient accumulator).
    pub fn zeros(dim: usize, components: usize, options: RateOptions) -> Self {
        let dk = dim * components;
        let dkd = dk * dim;
        Self {
            dim,
            components,
            options,
            mu0_slope: vec![0.0; dk],
            mu0_bias: vec![0.0; dk],
            log_gamma0_slope: vec![0.0; dk],
            log_gamma0_bias: vec![0.0; dk],
            w_mu_slope: vec![0.0; dkd],
            w_mu_bias: vec![0.0; dkd],
            w_gamma_slope: vec![0.0; dkd],
            w_gamma_bias: vec![0.0; dkd],
            logit_slope: vec![0.0; dk],
            logit_bias: vec![0.0; dk],
        }
    }

    /// Locations spread over the code range, moderate scales, uniform
    /// mixture weights and no context.
    pub fn init(dim: usize, components: usize, options: RateOptions, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || components == 0 {
            return Err(Error::InvalidArgument("entropy model needs d ≥ 1 and K ≥ 1".into()));
        }
        let mut p = Self::zeros(dim, components, options);
        for j in 0..dim {
            for k in 0..components {
                let i = j * components + k;
                p.mu0_bias[i] = -(k as f64 + 0.5) / components as f64 + rng.random_range(-0.05..0.05);
                p.log_gamma0_bias[i] = (0.1f64).ln() + rng.random_range(-0.1..0.1);
                p.logit_bias[i] = rng.random_range(-0.01..0.01);
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim, self.components, self.options)
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> [(&'static str, &Vec<f64>); 10] {
        [
            ("mu0_slope", &self.mu0_slope),
            ("mu0_bias", &self.mu0_bias),
            ("log_gamma0_slope", &self.log_gamma0_slope),
            ("log_gamma0_bias", &self.log_gamma0_bias),
            ("w_mu_slope", &self.w_mu_slope),
            ("w_mu_bias", &self.w_mu_bias),
            ("w_gamma_slope", &self.w_gamma_slope),
            ("w_gamma_bias", &self.w_gamma_bias),
            ("logit_slope", &self.logit_slope),
            ("logit_bias", &self.logit_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 10] {
        [
            ("mu0_slope", &mut self.mu0_slope),
            ("mu0_bias", &mut self.mu0_bias),
            ("log_gamma0_slope", &mut self.log_gamma0_slope),
            ("log_gamma0_bias", &mut self.log_gamma0_bias),
            ("w_mu_slope", &mut self.w_mu_slope),
            ("w_mu_bias", &mut self.w_mu_bias),
            ("w_gamma_slope", &mut self.w_gamma_slope),
            ("w_gamma_bias", &mut self.w_gamma_bias),
            ("logit_slope", &mut self.logit_slope),
            ("logit_bias", &mut self.logit_bias),
        ]
    }

    fn check_inputs(&self, z: &[f64], alloc: Option<&[f64]>, beta: f64) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch(format!("z has {} entries, model has d={}", z.len(), self.dim)));
        }
        if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite code value {bad}")));
        }
        if let Some(a) = alloc {
            if a.len() != self.dim {
                return Err(Error::DimensionMismatch(format!("allocation has {} entries, model has d={}", a.len(), self.dim)));
            }
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::OutOfRange(format!("beta = {beta} is outside [0, 1]")));
        }
        Ok(())
    }

    /// `(μ, log γ, π)` for every `(j, k)` given the code and `β`.
    pub fn conditional_params(&self, z: &[f64], beta: f64) -> Result<Conditional> {
        self.check_inputs(z, None, beta)?;
        Ok(self.conditional_unchecked(z, beta))
    }

    fn conditional_unchecked(&self, z: &[f64], beta: f64) -> Conditional {
        let (d, kk) = (self.dim, self.components);
        let mut mu = vec![0.0; d * kk];
        let mut log_gamma = vec![0.0; d * kk];
        let mut pi = vec![0.0; d * kk];
        for j in 0..d {
            for k in 0..kk {
                let i = j * kk + k;
                let base = i * d;
                let mut m = self.mu0_slope[i] * beta + self.mu0_bias[i];
                let mut g = self.log_gamma0_slope[i] * beta + self.log_gamma0_bias[i];
                for (jp, &zv) in z.iter().enumerate().take(j) {
                    m += (self.w_mu_slope[base + jp] * beta + self.w_mu_bias[base + jp]) * zv;
                    g += (self.w_gamma_slope[base + jp] * beta + self.w_gamma_bias[base + jp]) * zv;
                }
                mu[i] = m;
                log_gamma[i] = g;
                pi[i] = self.logit_slope[i] * beta + self.logit_bias[i];
            }
            let row = &mut pi[j * kk..(j + 1) * kk];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter_mut().map(|v| {
                *v = (*v - max).exp();
                *v
            }).sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
        Conditional { mu, log_gamma, pi, components: kk }
    }

    /// Negative log mass of each dimension's bin.
    pub fn per_dim_nll(&self, z: &[f64], alloc: &[f64], beta: f64) -> Result<Vec<f64>> {
        self.check_inputs(z, Some(alloc), beta)?;
        let cond = self.conditional_unchecked(z, beta);
        Ok((0..self.dim).map(|j| self.dim_terms(&cond, z[j], alloc[j], j).0).collect())
    }

    /// Per-sample code negative log-likelihood in nats.
    pub fn code_nll(&self, z: &[f64], alloc: &[f64], beta: f64) -> Result<f64> {
        Ok(self.per_dim_nll(z, alloc, beta)?.iter().sum())
    }

    /// Mean code NLL over a batch; `betas` holds one value per row.
    pub fn batch_rate(&self, codes: &[Vec<f64>], allocs: &[Vec<f64>], betas: &[f64]) -> Result<f64> {
        if codes.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if codes.len() != allocs.len() || codes.len() != betas.len() {
            return Err(Error::DimensionMismatch("batch_rate inputs differ in length".into()));
        }
        let mut total = 0.0;
        for ((z, a), &b) in codes.iter().zip(allocs).zip(betas) {
            total += self.code_nll(z, a, b)?;
        }
        Ok(total / codes.len() as f64)
    }

    /// Returns `(nll_j, per-component log mass and derivative pieces)`.
    fn dim_terms(&self, cond: &Conditional, zj: f64, aj: f64, j: usize) -> (f64, Vec<ComponentTerms>) {
        let kk = self.components;
        let w = self.options.half_width(aj);
        let mut comps = Vec::with_capacity(kk);
        for k in 0..kk {
            let i = j * kk + k;
            let gamma = cond.log_gamma[i].exp();
            let y = zj + cond.mu[i];
            let (hi, lo) = match self.options.placement {
                BinPlacement::Literal => (y / gamma + w, y / gamma - w),
                BinPlacement::InScale => ((y + w) / gamma, (y - w) / gamma),
            };
            let gap = hi - lo;
            let raw = log_sigmoid(hi) + log_sigmoid(-lo) + (-(-gap).exp_m1()).ln();
            let floored = raw < MASS_FLOOR.ln();
            comps.push(ComponentTerms {
                log_mass: if floored { MASS_FLOOR.ln() } else { raw },
                floored,
                gamma,
                y,
                w,
                hi,
                lo,
                gap,
                responsibility: 0.0,
            });
        }
        let scores: Vec<f64> = (0..kk).map(|k| cond.pi[j * kk + k].ln() + comps[k].log_mass).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        for (c, s) in comps.iter_mut().zip(&scores) {
            c.responsibility = (s - lse).exp();
        }
        (-lse, comps)
    }

    /// Code NLL of one sample together with all gradients.
    ///
    /// Parameter gradients scaled by `upstream` are added into `grads`;
    /// input gradients are returned unscaled.
    pub fn nll_backward(
        &self,
        z: &[f64],
        alloc: &[f64],
        beta: f64,
        upstream: f64,
        grads: &mut EntropyParams,
    ) -> Result<(f64, InputGrad)> {
        self.check_inputs(z, Some(alloc), beta)?;
        let (d, kk) = (self.dim, self.components);
        let cond = self.conditional_unchecked(z, beta);
        let mut total = 0.0;
        let mut gz = vec![0.0; d];
        let mut ga = vec![0.0; d];
        let mut gbeta = 0.0;
        for j in 0..d {
            let (nll, comps) = self.dim_terms(&cond, z[j], alloc[j], j);
            total += nll;
            for (k, c) in comps.iter().enumerate() {
                let i = j * kk + k;
                let pi = cond.pi[i];
                // ∂nll/∂logit_k = π_k - r_k
                let g_logit = pi - c.responsibility;
                grads.logit_bias[i] += upstream * g_logit;
                grads.logit_slope[i] += upstream * g_logit * beta;
                gbeta += g_logit * self.logit_slope[i];
                if c.floored {
                    continue;
                }
                // ∂nll/∂log mass_k = -r_k
                let g_lm = -c.responsibility;
                let inv = 1.0 / c.gap.exp_m1();
                let d_hi = sigmoid(-c.hi) + inv;
                let d_lo = -sigmoid(c.lo) - inv;
                let (dy, dlg, dw) = match self.options.placement {
                    BinPlacement::Literal => (
                        (d_hi + d_lo) / c.gamma,
                        -(d_hi + d_lo) * c.y / c.gamma,
                        d_hi - d_lo,
                    ),
                    BinPlacement::InScale => (
                        (d_hi + d_lo) / c.gamma,
                        -(d_hi * c.hi + d_lo * c.lo),
                        (d_hi - d_lo) / c.gamma,
                    ),
                };
                let g_y = g_lm * dy;
                let g_lg = g_lm * dlg;
                // w = c 2^{-a}  ⇒  ∂w/∂a = -ln 2 · w
                ga[j] += g_lm * dw * (-std::f64::consts::LN_2 * c.w);
                gz[j] += g_y;

                grads.mu0_bias[i] += upstream * g_y;
                grads.mu0_slope[i] += upstream * g_y * beta;
                grads.log_gamma0_bias[i] += upstream * g_lg;
                grads.log_gamma0_slope[i] += upstream * g_lg * beta;
                gbeta += g_y * self.mu0_slope[i] + g_lg * self.log_gamma0_slope[i];
                let base = i * d;
                for jp in 0..j {
                    let wm = self.w_mu_slope[base + jp] * beta + self.w_mu_bias[base + jp];
                    let wg = self.w_gamma_slope[base + jp] * beta + self.w_gamma_bias[base + jp];
                    gz[jp] += g_y * wm + g_lg * wg;
                    grads.w_mu_bias[base + jp] += upstream * g_y * z[jp];
                    grads.w_mu_slope[base + jp] += upstream * g_y * z[jp] * beta;
                    grads.w_gamma_bias[base + jp] += upstream * g_lg * z[jp];
                    grads.w_gamma_slope[base + jp] += upstream * g_lg * z[jp] * beta;
                    gbeta += (g_y * self.w_mu_slope[base + jp] + g_lg * self.w_gamma_slope[base + jp]) * z[jp];
                }
            }
        }
        Ok((total, InputGrad { z: gz, alloc: ga, beta: gbeta }))
    }
}

#[derive(Debug, Clone, Copy)]
struct ComponentTerms {
    log_mass: f64,
    floored: bool,
    gamma: f64,
    y: f64,
    w: f64,
    hi: f64,
    lo: f64,
    gap: f64,
    responsibility: f64,
}
