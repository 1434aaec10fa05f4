//! Dense layers, ReLU perceptrons, Adam and a softmax classifier.
//!
//! Weights are `in × out` so a batch `x` (rows are samples) maps to
//! `x · W + b`. Gradient containers reuse the parameter types.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Anything holding trainable `f64` tensors in a stable order.
pub trait Params {
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform in `±1/√fan_in` for weights and biases.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound)),
            bias: Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out) }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.fan_in(), self.fan_out())
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl Params for Linear {
    fn params(&self) -> Vec<&[f64]> {
        vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Fully connected network with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Inputs of every layer from one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`.
    pub fn init(sizes: &[usize], rng: &mut Rng) -> Self {
        Self { layers: sizes.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(Linear::zeros_like).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Linear::fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::fan_out)
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward(h.view());
            if i + 1 < self.layers.len() {
                out.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(h);
            h = out;
        }
        (h, MlpCache { inputs })
    }

    /// Accumulates gradients into `grad`; returns `∂L/∂x`.
    pub fn backward(&self, cache: &MlpCache, dy: Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = dy;
        for i in (0..self.layers.len()).rev() {
            let input = &cache.inputs[i];
            let mut dx = self.layers[i].backward(input.view(), d.view(), &mut grad.layers[i]);
            if i > 0 {
                // input of layer i is the ReLU output of layer i-1
                dx.zip_mut_with(input, |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            d = dx;
        }
        d
    }
}

impl Params for Mlp {
    fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(Params::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(Params::params_mut).collect()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient tensor count");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Log-softmax of each row.
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Per-column affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ColumnScaler {
    pub fn fit(x: ArrayView2<'_, f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean: Vec<f64> = x.mean_axis(Axis(0)).map_or_else(|| vec![0.0; x.ncols()], |m| m.to_vec());
        let scale = x
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(c, &m)| {
                let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                if var > 1e-16 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.outer_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.scale[j];
            }
        }
        out
    }
}

/// Training schedule for [`Classifier`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub layers: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Share of the training rows held back for early stopping; 0 disables it.
    #[serde(default)]
    pub validation_fraction: f64,
    /// Steps between validation checks.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_eval_every() -> usize {
    25
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { hidden: 256, layers: 2, lr: 1e-3, steps: 400, batch_size: 128, validation_fraction: 0.2, eval_every: 25 }
    }
}

/// Softmax MLP classifier with built-in input standardization.
#[derive(Debug, Clone)]
pub struct Classifier {
    scaler: ColumnScaler,
    net: Mlp,
}

impl Classifier {
    pub fn train(
        x: ArrayView2<'_, f64>,
        labels: &[usize],
        n_classes: usize,
        config: &ClassifierConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let n = x.nrows();
        if n == 0 || labels.len() != n {
            return Err(Error::DimensionMismatch(format!("{n} rows vs {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::OutOfRange(format!("label {bad} ≥ {n_classes} classes")));
        }
        if !(0.0..1.0).contains(&config.validation_fraction) {
            return Err(Error::OutOfRange(format!("validation fraction {} outside [0, 1)", config.validation_fraction)));
        }
        let mut rows: Vec<usize> = (0..n).collect();
        let n_val = (n as f64 * config.validation_fraction).round() as usize;
        let n_val = if n_val == 0 || n_val >= n { 0 } else { n_val };
        if n_val > 0 {
            rows.shuffle(rng);
        }
        let (val_rows, fit_rows) = rows.split_at(n_val);
        let scaler = ColumnScaler::fit(x);
        let xs = scaler.apply(x);
        let x_val = xs.select(Axis(0), val_rows);
        let y_val: Vec<usize> = val_rows.iter().map(|&i| labels[i]).collect();
        let val_ce = |net: &Mlp| {
            let lp = log_softmax(&net.forward(x_val.view()));
            -y_val.iter().enumerate().map(|(i, &l)| lp[[i, l]]).sum::<f64>() / y_val.len() as f64
        };
        let mut sizes = vec![x.ncols()];
        sizes.extend(std::iter::repeat_n(config.hidden, config.layers));
        sizes.push(n_classes);
        let mut net = Mlp::init(&sizes, rng);
        let mut opt = Adam::new(config.lr);
        let mut order = fit_rows.to_vec();
        let m = order.len();
        let bs = config.batch_size.min(m).max(1);
        let mut cursor = m;
        let mut best: Option<(f64, Mlp)> = None;
        for step in 0..config.steps {
            if cursor + bs > m {
                order.shuffle(rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + bs];
            cursor += bs;
            let xb = xs.select(Axis(0), idx);
            let (logits, cache) = net.forward_cached(xb.view());
            let mut d = log_softmax(&logits).mapv(f64::exp);
            for (r, &i) in idx.iter().enumerate() {
                d[[r, labels[i]]] -= 1.0;
            }
            d /= bs as f64;
            let mut grad = net.zeros_like();
            net.backward(&cache, d, &mut grad);
            opt.step(net.params_mut(), grad.params());
            if n_val > 0 && ((step + 1) % config.eval_every.max(1) == 0 || step + 1 == config.steps) {
                let ce = val_ce(&net);
                if best.as_ref().is_none_or(|(b, _)| ce < *b) {
                    best = Some((ce, net.clone()));
                }
            }
        }
        if let Some((_, b)) = best {
            net = b;
        }
        Ok(Self { scaler, net })
    }

    pub fn log_proba(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        log_softmax(&self.net.forward(self.scaler.apply(x).view()))
    }

    /// Mean `-log q(label | x)` in nats.
    pub fn cross_entropy(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
        let lp = self.log_proba(x);
        -labels.iter().enumerate().map(|(i, &l)| lp[[i, l]]).sum::<f64>() / labels.len().max(1) as f64
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<usize> {
        self.log_proba(x)
            .outer_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }

    pub fn accuracy(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
        let pred = self.predict(x);
        pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = substream(1, "mlp");
        let mut net = Mlp::init(&[3, 5, 4, 2], &mut rng);
        let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let loss = |net: &Mlp| net.forward(x.view()).mapv(|v| v * v).sum() * 0.5;
        let (out, cache) = net.forward_cached(x.view());
        let mut grad = net.zeros_like();
        net.backward(&cache, out, &mut grad);
        let analytic: Vec<f64> = grad.params().into_iter().flatten().copied().collect();
        let mut k = 0;
        let h = 1e-6;
        for t in 0..net.params().len() {
            for i in 0..net.params()[t].len() {
                let orig = net.params()[t][i];
                net.params_mut()[t][i] = orig + h;
                let up = loss(&net);
                net.params_mut()[t][i] = orig - h;
                let down = loss(&net);
                net.params_mut()[t][i] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - analytic[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", analytic[k]);
                k += 1;
            }
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(vec![p.as_mut_slice()], vec![g.as_slice()]);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn classifier_learns_separable_labels() {
        let mut rng = substream(2, "clf");
        let x = Array2::from_shape_fn((400, 2), |_| rng.random_range(-1.0..1.0));
        let y: Vec<usize> = x.outer_iter().map(|r| usize::from(r[0] + r[1] > 0.0)).collect();
        let cfg = ClassifierConfig { hidden: 32, steps: 300, ..Default::default() };
        let clf = Classifier::train(x.view(), &y, 2, &cfg, &mut rng).unwrap();
        assert!(clf.accuracy(x.view(), &y) > 0.95);
        assert!(clf.cross_entropy(x.view(), &y) < 0.3);
        assert!(Classifier::train(x.view(), &y[..10], 2, &cfg, &mut rng).is_err());
    }
}
