//! Adversarial audits, unfairness-distortion curves and bit-level metrics.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::model::{mse, Model};
use crate::nn::{Classifier, ClassifierConfig};
use crate::quantizer::refinement_delta;
use crate::rng::{indexed_substream, substream};

/// How the auditors' held-out cross-entropies are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    #[default]
    Mean,
    Min,
}

impl std::str::FromStr for Aggregate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregate::Mean),
            "min" => Ok(Aggregate::Min),
            _ => Err(Error::InvalidArgument(format!("unknown aggregate {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditProtocol {
    pub auditors: usize,
    pub classifier: ClassifierConfig,
    /// Share of rows held out for the cross-entropy estimate.
    pub test_fraction: f64,
    pub aggregate: Aggregate,
    pub seed: u64,
}

impl Default for AuditProtocol {
    fn default() -> Self {
        Self {
            auditors: 5,
            classifier: ClassifierConfig::default(),
            test_fraction: 0.3,
            aggregate: Aggregate::Mean,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// Held-out cross-entropy of each auditor, nats.
    pub cross_entropies: Vec<f64>,
    pub mean_ce: f64,
    /// Cross-entropy used in the bound (mean or min per protocol).
    pub aggregate_ce: f64,
    /// Plug-in marginal entropy of `S` on the held-out rows.
    pub h_s: f64,
    pub mi_lower: f64,
    /// Mean held-out accuracy of the auditors.
    pub accuracy: f64,
    /// Set when `S` has a single class and the bound is trivially zero.
    pub degenerate: bool,
}

fn plugin_entropy(labels: &[usize], n_classes: usize) -> f64 {
    let mut counts = vec![0usize; n_classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    let n = labels.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn holdout_split(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test fraction {test_fraction} must be in (0, 1)")));
    }
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::InvalidArgument(format!("{n} rows are too few for a held-out split")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "audit-split"));
    let test = idx.split_off(n - n_test);
    Ok((idx, test))
}

/// `Î(Z, S) = H(S) - CE`, where `CE` aggregates the held-out cross-entropy
/// of independently seeded MLP classifiers predicting `S` from `Z`.
pub fn audit_mi(z: ArrayView2<'_, f64>, s: &[usize], n_groups: usize, protocol: &AuditProtocol) -> Result<AuditReport> {
    if z.nrows() != s.len() {
        return Err(Error::DimensionMismatch(format!("{} code rows vs {} labels", z.nrows(), s.len())));
    }
    if protocol.auditors == 0 {
        return Err(Error::InvalidArgument("at least one auditor is required".into()));
    }
    let (train, test) = holdout_split(s.len(), protocol.test_fraction, protocol.seed)?;
    let s_train: Vec<usize> = train.iter().map(|&i| s[i]).collect();
    let s_test: Vec<usize> = test.iter().map(|&i| s[i]).collect();
    let h_s = plugin_entropy(&s_test, n_groups);
    let distinct = {
        let mut seen = vec![false; n_groups];
        s.iter().for_each(|&g| seen[g] = true);
        seen.iter().filter(|&&b| b).count()
    };
    if distinct < 2 {
        return Ok(AuditReport {
            cross_entropies: vec![0.0; protocol.auditors],
            mean_ce: 0.0,
            aggregate_ce: 0.0,
            h_s: 0.0,
            mi_lower: 0.0,
            accuracy: 1.0,
            degenerate: true,
        });
    }
    let z_train = z.select(Axis(0), &train);
    let z_test = z.select(Axis(0), &test);
    let mut ces = Vec::with_capacity(protocol.auditors);
    let mut acc = 0.0;
    for k in 0..protocol.auditors {
        let mut rng = indexed_substream(protocol.seed, "auditor", k as u64);
        let clf = Classifier::train(z_train.view(), &s_train, n_groups, &protocol.classifier, &mut rng)?;
        ces.push(clf.cross_entropy(z_test.view(), &s_test));
        acc += clf.accuracy(z_test.view(), &s_test);
    }
    let mean_ce = ces.iter().sum::<f64>() / ces.len() as f64;
    let aggregate_ce = match protocol.aggregate {
        Aggregate::Mean => mean_ce,
        Aggregate::Min => ces.iter().cloned().fold(f64::INFINITY, f64::min),
    };
    Ok(AuditReport {
        cross_entropies: ces,
        mean_ce,
        aggregate_ce,
        h_s,
        mi_lower: h_s - aggregate_ce,
        accuracy: acc / protocol.auditors as f64,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub beta: f64,
    pub distortion: f64,
    pub mi_lower: f64,
    pub mean_bits: f64,
}

/// Curve of one model over a `β` grid.
pub fn trace_curve(model: &Model, test: &TabularDataset, betas: &[f64], protocol: &AuditProtocol) -> Result<Vec<CurvePoint>> {
    if betas.len() < 2 {
        return Err(Error::InvalidArgument("a curve needs at least two betas".into()));
    }
    let pairs: Vec<(&Model, f64)> = betas.iter().map(|&b| (model, b)).collect();
    trace_points(&pairs, test, protocol)
}

/// One point per `(model, β)` pair; used for curves of separately trained
/// fixed-`β` models as well.
pub fn trace_points(pairs: &[(&Model, f64)], test: &TabularDataset, protocol: &AuditProtocol) -> Result<Vec<CurvePoint>> {
    let s = test.sensitive_index();
    pairs
        .iter()
        .map(|&(model, beta)| {
            let codes = model.codes(test.features.view(), beta)?;
            let d = model.latent_dim();
            let z = Array2::from_shape_fn((codes.len(), d), |(i, j)| codes[i].values()[j]);
            let x_hat = model.decode(z.view(), test.sensitive.view(), beta)?;
            let mean_bits = codes.iter().map(|c| c.active_counts().iter().sum::<usize>()).sum::<usize>() as f64
                / codes.len() as f64;
            let audit = audit_mi(z.view(), &s, test.d_s(), protocol)?;
            Ok(CurvePoint { beta, distortion: mse(test.features.view(), x_hat.view()), mi_lower: audit.mi_lower, mean_bits })
        })
        .collect()
}

/// The non-dominated subset sorted by distortion.
///
/// A point is dropped when another has distortion and unfairness no larger
/// and at least one strictly smaller; exact duplicates are kept once. The
/// result has strictly decreasing `mi_lower`.
pub fn pareto_filter(points: &[CurvePoint]) -> Vec<CurvePoint> {
    let mut sorted: Vec<CurvePoint> = points.to_vec();
    sorted.sort_by(|a, b| a.distortion.total_cmp(&b.distortion).then(a.mi_lower.total_cmp(&b.mi_lower)));
    let mut out: Vec<CurvePoint> = Vec::new();
    for p in sorted {
        if out.last().is_none_or(|last| p.mi_lower < last.mi_lower) {
            out.push(p);
        }
    }
    out
}

/// Normalized area under a Pareto-filtered curve.
///
/// The area consists of the rectangle `[0, D_1] × I_1` left of the first
/// point, trapezoids between consecutive points, and the tail rectangle
/// `I_last × (D_max - D_last)`; it is divided by `D_max · I_max`. Values of
/// `mi_lower` are clamped to `[0, I_max]`.
pub fn aufdc(points: &[CurvePoint], d_max: f64, i_max: f64) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no curve points".into()));
    }
    if !(i_max > 0.0) || !(d_max > 0.0) {
        return Err(Error::InvalidArgument(format!("normalizers must be positive (D_max={d_max}, I_max={i_max})")));
    }
    let last = points[points.len() - 1];
    if last.distortion > d_max * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!("D_max = {d_max} is below max distortion {}", last.distortion)));
    }
    if points.windows(2).any(|w| w[1].distortion < w[0].distortion) {
        return Err(Error::InvalidArgument("points must be sorted by distortion".into()));
    }
    let mi = |p: &CurvePoint| p.mi_lower.clamp(0.0, i_max);
    let mut area = mi(&points[0]) * points[0].distortion;
    for w in points.windows(2) {
        area += 0.5 * (mi(&w[0]) + mi(&w[1])) * (w[1].distortion - w[0].distortion);
    }
    area += mi(&last) * (d_max - last.distortion).max(0.0);
    Ok((area / (d_max * i_max)).clamp(0.0, 1.0))
}

/// Mean MSE when each test row is decoded from another row's code,
/// averaged over `shuffles` random permutations.
pub fn permuted_distortion(model: &Model, test: &TabularDataset, beta: f64, shuffles: usize, seed: u64) -> Result<f64> {
    let z = model.latent(test.features.view(), beta)?;
    let mut total = 0.0;
    for k in 0..shuffles.max(1) {
        let mut idx: Vec<usize> = (0..z.nrows()).collect();
        idx.shuffle(&mut indexed_substream(seed, "permute", k as u64));
        let zp = z.select(Axis(0), &idx);
        let x_hat = model.decode(zp.view(), test.sensitive.view(), beta)?;
        total += mse(test.features.view(), x_hat.view());
    }
    Ok(total / shuffles.max(1) as f64)
}

/// `D_max`: the largest permuted-code distortion over the grid, never below
/// the largest observed distortion.
pub fn distortion_max(model: &Model, test: &TabularDataset, betas: &[f64], points: &[CurvePoint], seed: u64) -> Result<f64> {
    let mut d = points.iter().map(|p| p.distortion).fold(0.0, f64::max);
    for &b in betas {
        d = d.max(permuted_distortion(model, test, b, 10, seed)?);
    }
    Ok(d)
}

/// `I_max`: the audit bound on the uncoded features.
pub fn information_max(test: &TabularDataset, protocol: &AuditProtocol) -> Result<f64> {
    Ok(audit_mi(test.features.view(), &test.sensitive_index(), test.d_s(), protocol)?.mi_lower)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub points: Vec<CurvePoint>,
    pub filtered: Vec<CurvePoint>,
    pub d_max: f64,
    pub i_max: f64,
    pub aufdc: f64,
}

impl CurveReport {
    /// Clamps negative estimates, filters, and integrates.
    pub fn from_points(points: Vec<CurvePoint>, d_max: f64, i_max: f64) -> Result<Self> {
        let clamped: Vec<CurvePoint> =
            points.iter().map(|p| CurvePoint { mi_lower: p.mi_lower.max(0.0), ..*p }).collect();
        let filtered = pareto_filter(&clamped);
        let aufdc = aufdc(&filtered, d_max, i_max)?;
        Ok(Self { points, filtered, d_max, i_max, aufdc })
    }

    /// `beta,distortion,mi_lower,mean_bits`, one row per raw point.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        write_curve_csv(&self.points, w)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

pub fn write_curve_csv(points: &[CurvePoint], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["beta", "distortion", "mi_lower", "mean_bits"])?;
    for p in points {
        out.serialize((p.beta, p.distortion, p.mi_lower, p.mean_bits))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize::<(f64, f64, f64, f64)>() {
        let (beta, distortion, mi_lower, mean_bits) = rec?;
        out.push(CurvePoint { beta, distortion, mi_lower, mean_bits });
    }
    Ok(out)
}

/// Traces a curve and computes both normalizers for a single model.
pub fn curve_report(model: &Model, test: &TabularDataset, betas: &[f64], protocol: &AuditProtocol) -> Result<CurveReport> {
    let points = trace_curve(model, test, betas, protocol)?;
    let d_max = distortion_max(model, test, betas, &points, protocol.seed)?;
    let i_max = information_max(test, protocol)?;
    CurveReport::from_points(points, d_max, i_max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityReport {
    pub value: f64,
    /// Groups left out because they (or their complement) had no rows.
    pub skipped_groups: Vec<usize>,
}

/// `max_s |P(b = 1 | S = s) - P(b = 1 | S ≠ s)|`.
pub fn bit_disparity(bits: &[u8], s: &[usize], n_groups: usize) -> Result<DisparityReport> {
    if bits.len() != s.len() {
        return Err(Error::DimensionMismatch(format!("{} bits vs {} labels", bits.len(), s.len())));
    }
    if let Some(&g) = s.iter().find(|&&g| g >= n_groups) {
        return Err(Error::OutOfRange(format!("group {g} ≥ {n_groups}")));
    }
    let mut ones = vec![0usize; n_groups];
    let mut size = vec![0usize; n_groups];
    for (&b, &g) in bits.iter().zip(s) {
        size[g] += 1;
        ones[g] += usize::from(b == 1);
    }
    let (total_ones, total) = (ones.iter().sum::<usize>(), s.len());
    let mut value: f64 = 0.0;
    let mut skipped_groups = Vec::new();
    for g in 0..n_groups {
        let rest = total - size[g];
        if size[g] == 0 || rest == 0 {
            skipped_groups.push(g);
            continue;
        }
        let inside = ones[g] as f64 / size[g] as f64;
        let outside = (total_ones - ones[g]) as f64 / rest as f64;
        value = value.max((inside - outside).abs());
    }
    Ok(DisparityReport { value, skipped_groups })
}

/// Pearson correlation; zero when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n < 2.0 {
        return 0.0;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&k| r[k] = avg);
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// First principal direction of the centered rows (power iteration).
pub fn first_principal_component(x: ArrayView2<'_, f64>) -> Option<Array1<f64>> {
    let mean = x.mean_axis(Axis(0))?;
    let c = &x - &mean;
    let cov = c.t().dot(&c);
    if cov.iter().all(|&v| v.abs() < 1e-300) {
        return None;
    }
    let d = cov.nrows();
    let mut v = Array1::from_shape_fn(d, |i| 1.0 + i as f64 / d as f64);
    for _ in 0..500 {
        let next = cov.dot(&v);
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            return None;
        }
        let next = next / norm;
        let change = (&next - &v).mapv(f64::abs).sum();
        v = next;
        if change < 1e-13 {
            break;
        }
    }
    let (arg, _) = v.iter().enumerate().fold((0, 0.0), |best, (i, &x)| if x.abs() > best.1 { (i, x.abs()) } else { best });
    if v[arg] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
    Some(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub beta_hi: f64,
    pub beta_lo: f64,
    pub feature_names: Vec<String>,
    pub correlations: Vec<f64>,
    /// No bits were unmasked between the two levels.
    pub empty: bool,
}

impl CorrelationReport {
    /// Header of feature names and one row of correlations.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.feature_names)?;
        if !self.empty {
            out.write_record(self.correlations.iter().map(|c| format!("{c}")))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Correlation of each feature with the leading component of the value
/// added by bits that become visible when moving from `beta_hi` to
/// `beta_lo`.
pub fn unmasked_bit_correlations(model: &Model, test: &TabularDataset, beta_hi: f64, beta_lo: f64) -> Result<CorrelationReport> {
    if beta_lo > beta_hi {
        return Err(Error::InvalidArgument(format!("beta_lo = {beta_lo} exceeds beta_hi = {beta_hi}")));
    }
    let coarse = model.codes(test.features.view(), beta_hi)?;
    let fine = model.codes(test.features.view(), beta_lo)?;
    let d = model.latent_dim();
    let mut delta = Array2::zeros((coarse.len(), d));
    for (i, (c, f)) in coarse.iter().zip(&fine).enumerate() {
        for (j, v) in refinement_delta(c, f)?.into_iter().enumerate() {
            delta[[i, j]] = v;
        }
    }
    let empty_report = || CorrelationReport {
        beta_hi,
        beta_lo,
        feature_names: test.feature_names.clone(),
        correlations: Vec::new(),
        empty: true,
    };
    let new_bits = coarse.iter().zip(&fine).any(|(c, f)| c.active_counts() != f.active_counts());
    if !new_bits {
        return Ok(empty_report());
    }
    let Some(pc) = first_principal_component(delta.view()) else {
        return Ok(empty_report());
    };
    let mean = delta.mean_axis(Axis(0)).expect("nonempty");
    let scores: Vec<f64> = (&delta - &mean).dot(&pc).to_vec();
    let correlations = test.features.axis_iter(Axis(1)).map(|col| pearson(&scores, &col.to_vec())).collect();
    Ok(CorrelationReport { beta_hi, beta_lo, feature_names: test.feature_names.clone(), correlations, empty: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontPoint {
    pub beta: f64,
    /// Held-out accuracy predicting the sensitive attribute from the code.
    pub a_s: f64,
    /// Held-out accuracy predicting the task label from the code.
    pub a_y: f64,
}

/// Accuracy of one classifier trained on a held-out split.
pub fn holdout_accuracy(z: ArrayView2<'_, f64>, labels: &[usize], n_classes: usize, cfg: &ClassifierConfig, seed: u64, name: &str) -> Result<f64> {
    let (train, test) = holdout_split(labels.len(), 0.3, seed)?;
    let zt = z.select(Axis(0), &train);
    let lt: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let clf = Classifier::train(zt.view(), &lt, n_classes, cfg, &mut substream(seed, name))?;
    let ze = z.select(Axis(0), &test);
    let le: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    Ok(clf.accuracy(ze.view(), &le))
}

/// Sensitive and task accuracy of frozen codes at each `(model, β)`; the
/// encoder never sees the task labels.
pub fn pareto_front(pairs: &[(&Model, f64)], test: &TabularDataset, cfg: &ClassifierConfig, seed: u64) -> Result<Vec<FrontPoint>> {
    let y: Vec<usize> = test
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("the Pareto front needs task labels".into()))?
        .iter()
        .map(|&v| v as usize)
        .collect();
    let s = test.sensitive_index();
    pairs
        .iter()
        .map(|&(model, beta)| {
            let z = model.latent(test.features.view(), beta)?;
            Ok(FrontPoint {
                beta,
                a_s: holdout_accuracy(z.view(), &s, test.d_s(), cfg, seed, "front-sensitive")?,
                a_y: holdout_accuracy(z.view(), &y, 2, cfg, seed, "front-task")?,
            })
        })
        .collect()
}
