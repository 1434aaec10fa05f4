//! Dataset ingestion, preprocessing, splitting and synthetic generators.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio::{expect_magic, len_u32, read_f32, read_str, read_u32, read_u8, write_f32, write_str, write_u32};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};

/// Standardization and category map for one feature column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub name: String,
    pub mean: f64,
    pub scale: f64,
    /// Index → label map for index-encoded categorical columns; empty for
    /// numeric and one-hot indicator columns.
    #[serde(default)]
    pub categories: Vec<String>,
}

/// Per-column preprocessing fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Preprocessing {
    pub columns: Vec<ColumnStats>,
}

impl Preprocessing {
    /// Fits means and standard deviations on `raw`; constant columns keep
    /// unit scale.
    pub fn fit(raw: &Array2<f64>, names: &[String], categories: &[Vec<String>]) -> Self {
        let n = raw.nrows().max(1) as f64;
        let columns = raw
            .axis_iter(Axis(1))
            .enumerate()
            .map(|(c, col)| {
                let mean = col.sum() / n;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                ColumnStats {
                    name: names[c].clone(),
                    mean,
                    scale: if var > 1e-24 { var.sqrt() } else { 1.0 },
                    categories: categories.get(c).cloned().unwrap_or_default(),
                }
            })
            .collect();
        Self { columns }
    }

    pub fn transform(&self, raw: &Array2<f64>) -> Array2<f64> {
        let mut out = raw.clone();
        for mut row in out.outer_iter_mut() {
            for (v, s) in row.iter_mut().zip(&self.columns) {
                *v = (*v - s.mean) / s.scale;
            }
        }
        out
    }

    pub fn inverse(&self, standardized: &Array2<f64>) -> Array2<f64> {
        let mut out = standardized.clone();
        for mut row in out.outer_iter_mut() {
            for (v, s) in row.iter_mut().zip(&self.columns) {
                *v = *v * s.scale + s.mean;
            }
        }
        out
    }

    fn categories(&self) -> Vec<Vec<String>> {
        self.columns.iter().map(|c| c.categories.clone()).collect()
    }
}

/// Standardized features, one-hot sensitive attribute and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub features: Array2<f64>,
    pub sensitive: Array2<f64>,
    pub sensitive_names: Vec<String>,
    pub labels: Option<Vec<u8>>,
    pub feature_names: Vec<String>,
    pub stats: Preprocessing,
}

/// Row accounting of a loader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_dropped: usize,
}

impl TabularDataset {
    /// Standardizes `raw` with statistics fitted on all rows and validates
    /// the result.
    pub fn from_raw(
        raw: Array2<f64>,
        feature_names: Vec<String>,
        categories: Vec<Vec<String>>,
        sensitive_index: &[usize],
        sensitive_names: Vec<String>,
        labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        let stats = Preprocessing::fit(&raw, &feature_names, &categories);
        let features = stats.transform(&raw);
        let ds = sensitive_names.len();
        let mut sensitive = Array2::zeros((raw.nrows(), ds));
        for (i, &s) in sensitive_index.iter().enumerate() {
            if s >= ds {
                return Err(Error::OutOfRange(format!("sensitive index {s} ≥ {ds}")));
            }
            sensitive[[i, s]] = 1.0;
        }
        let out = Self { features, sensitive, sensitive_names, labels, feature_names, stats };
        out.validate()?;
        Ok(out)
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    pub fn d_s(&self) -> usize {
        self.sensitive.ncols()
    }

    /// Checks the one-hot, finiteness and naming invariants.
    pub fn validate(&self) -> Result<()> {
        if self.feature_names.len() != self.p() || self.stats.columns.len() != self.p() {
            return Err(Error::Data(format!(
                "{} feature names / {} stats for {} columns",
                self.feature_names.len(),
                self.stats.columns.len(),
                self.p()
            )));
        }
        if self.sensitive.nrows() != self.n() {
            return Err(Error::Data("sensitive rows do not match feature rows".into()));
        }
        if self.sensitive_names.len() != self.d_s() {
            return Err(Error::Data("sensitive names do not match sensitive width".into()));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.n() || l.iter().any(|&y| y > 1) {
                return Err(Error::Data("labels must be binary with one per row".into()));
            }
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature after preprocessing".into()));
        }
        for (i, row) in self.sensitive.outer_iter().enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data(format!("sensitive row {i} is not one-hot")));
            }
        }
        Ok(())
    }

    /// Group index of each row.
    pub fn sensitive_index(&self) -> Vec<usize> {
        self.sensitive
            .outer_iter()
            .map(|r| r.iter().position(|&v| v == 1.0).unwrap_or(0))
            .collect()
    }

    /// Features in their original units.
    pub fn raw_features(&self) -> Array2<f64> {
        self.stats.inverse(&self.features)
    }

    /// Rows `idx`, keeping the current preprocessing.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), idx),
            sensitive: self.sensitive.select(Axis(0), idx),
            sensitive_names: self.sensitive_names.clone(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            feature_names: self.feature_names.clone(),
            stats: self.stats.clone(),
        }
    }

    /// Re-expresses the features under different preprocessing statistics.
    pub fn restandardize(&self, stats: &Preprocessing) -> Self {
        let raw = self.raw_features();
        Self { features: stats.transform(&raw), stats: stats.clone(), ..self.clone() }
    }

    /// Deterministic random subset of at most `n` rows.
    pub fn subsample(&self, n: usize, seed: u64) -> Self {
        if n >= self.n() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.n()).collect();
        idx.shuffle(&mut substream(seed, "subsample"));
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx)
    }
}

/// Deterministic shuffled train/validation/test split.
///
/// Preprocessing is refitted on the training rows and applied to all three.
pub fn split(dataset: &TabularDataset, fractions: [f64; 3], seed: u64) -> Result<(TabularDataset, TabularDataset, TabularDataset)> {
    if fractions.iter().any(|&f| !(f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions {fractions:?} must be positive and sum to 1")));
    }
    let n = dataset.n();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = (fractions[1] * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::InvalidArgument(format!("split of {n} rows with {fractions:?} leaves an empty part")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "split"));
    let (tr, rest) = idx.split_at(n_train);
    let (va, te) = rest.split_at(n_val);
    let train_raw = dataset.select(tr);
    let stats = Preprocessing::fit(&train_raw.raw_features(), &dataset.feature_names, &dataset.stats.categories());
    Ok((
        train_raw.restandardize(&stats),
        dataset.select(va).restandardize(&stats),
        dataset.select(te).restandardize(&stats),
    ))
}

// ---------------------------------------------------------------------------
// CSV loaders

/// Sensitive attribute definition for the census data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdultsVariant {
    Gender,
    GenderRace,
}

/// How categorical columns become real-valued features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CategoricalEncoding {
    /// Category index, standardized like a numeric column.
    #[default]
    Index,
    /// One indicator column per category.
    OneHot,
}

const ADULT_LAYOUT: [&str; 15] = [
    "age",
    "workclass",
    "fnlwgt",
    "education",
    "education-num",
    "marital-status",
    "occupation",
    "relationship",
    "race",
    "sex",
    "capital-gain",
    "capital-loss",
    "hours-per-week",
    "native-country",
    "income",
];

const ADULT_NUMERIC: [&str; 4] = ["age", "education-num", "capital-gain", "capital-loss"];
const ADULT_FEATURES: [&str; 9] = [
    "age",
    "workclass",
    "education-num",
    "marital-status",
    "occupation",
    "relationship",
    "capital-gain",
    "capital-loss",
    "hours-per-week",
];

fn normalize_header(h: &str) -> String {
    let h = h.trim().to_ascii_lowercase().replace(['_', '.', ' '], "-");
    match h.as_str() {
        "educational-num" => "education-num".into(),
        "gender" => "sex".into(),
        "class" | "salary" => "income".into(),
        _ => h,
    }
}

fn read_records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    for rec in reader.records() {
        match rec {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("skipping unreadable CSV record: {e}"),
        }
    }
    Ok(out)
}

struct CategoryMap(Vec<String>);

impl CategoryMap {
    fn from_values<'a>(values: impl Iterator<Item = &'a str>) -> Self {
        Self(values.map(str::to_owned).collect::<BTreeSet<_>>().into_iter().collect())
    }

    fn index(&self, v: &str) -> usize {
        self.0.binary_search_by(|c| c.as_str().cmp(v)).expect("category present")
    }
}

/// Loads the census income data with the sensitive attribute `variant`.
///
/// Accepts both the headerless UCI layout and files with a header row.
/// Rows with missing (`?`) or unparseable fields are dropped and counted.
pub fn load_adults(path: &Path, variant: AdultsVariant, encoding: CategoricalEncoding) -> Result<(TabularDataset, LoadReport)> {
    let records = read_records(path)?;
    let first = records.first().ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?;
    let has_header = first.get(0).is_some_and(|f| f.trim().eq_ignore_ascii_case("age"));
    let layout: Vec<String> = if has_header {
        first.iter().map(normalize_header).collect()
    } else {
        ADULT_LAYOUT.iter().map(|s| s.to_string()).collect()
    };
    let mut needed: Vec<&str> = ADULT_FEATURES.to_vec();
    needed.extend(["race", "sex", "income"]);
    let col = |name: &str| layout.iter().position(|h| h == name);
    for name in &needed {
        if col(name).is_none() {
            return Err(Error::MissingColumn((*name).to_string()));
        }
    }
    let pos: Vec<usize> = needed.iter().map(|n| col(n).expect("checked")).collect();

    let body = if has_header { &records[1..] } else { &records[..] };
    let mut report = LoadReport { rows_read: body.len(), rows_dropped: 0 };
    let mut rows: Vec<Vec<String>> = Vec::with_capacity(body.len());
    'rows: for rec in body {
        if rec.len() < layout.len() {
            report.rows_dropped += 1;
            continue;
        }
        let mut row = Vec::with_capacity(pos.len());
        for (k, &p) in pos.iter().enumerate() {
            let v = rec.get(p).unwrap_or("").trim().trim_end_matches('.').to_string();
            let numeric = ADULT_NUMERIC.contains(&needed[k]) || needed[k] == "hours-per-week";
            if v.is_empty() || v == "?" || (numeric && v.parse::<f64>().is_err()) {
                report.rows_dropped += 1;
                continue 'rows;
            }
            row.push(v);
        }
        rows.push(row);
    }
    if report.rows_dropped > 0 {
        log::info!("adults: dropped {} of {} rows", report.rows_dropped, report.rows_read);
    }
    if rows.is_empty() {
        return Err(Error::Data("no usable rows".into()));
    }

    let n_feat = ADULT_FEATURES.len();
    let (race_k, sex_k, income_k) = (n_feat, n_feat + 1, n_feat + 2);
    let sexes = CategoryMap::from_values(rows.iter().map(|r| r[sex_k].as_str()));
    let races = CategoryMap::from_values(rows.iter().map(|r| r[race_k].as_str()));
    let (sensitive_index, sensitive_names): (Vec<usize>, Vec<String>) = match variant {
        AdultsVariant::Gender => (
            rows.iter().map(|r| sexes.index(&r[sex_k])).collect(),
            sexes.0.iter().map(|s| format!("sex={s}")).collect(),
        ),
        AdultsVariant::GenderRace => (
            rows.iter().map(|r| sexes.index(&r[sex_k]) * races.0.len() + races.index(&r[race_k])).collect(),
            sexes
                .0
                .iter()
                .flat_map(|s| races.0.iter().map(move |r| format!("sex={s}&race={r}")))
                .collect(),
        ),
    };
    let labels: Vec<u8> = rows.iter().map(|r| u8::from(r[income_k].contains(">50K"))).collect();

    let mut names = Vec::new();
    let mut cats = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (k, &name) in ADULT_FEATURES.iter().enumerate() {
        if ADULT_NUMERIC.contains(&name) || name == "hours-per-week" {
            names.push(name.to_string());
            cats.push(Vec::new());
            columns.push(rows.iter().map(|r| r[k].parse::<f64>().expect("validated")).collect());
            continue;
        }
        let map = CategoryMap::from_values(rows.iter().map(|r| r[k].as_str()));
        match encoding {
            CategoricalEncoding::Index => {
                names.push(name.to_string());
                columns.push(rows.iter().map(|r| map.index(&r[k]) as f64).collect());
                cats.push(map.0.clone());
            }
            CategoricalEncoding::OneHot => {
                for c in &map.0 {
                    names.push(format!("{name}={c}"));
                    cats.push(Vec::new());
                    columns.push(rows.iter().map(|r| f64::from(u8::from(&r[k] == c))).collect());
                }
            }
        }
    }
    let raw = Array2::from_shape_fn((rows.len(), columns.len()), |(i, c)| columns[c][i]);
    let ds = TabularDataset::from_raw(raw, names, cats, &sensitive_index, sensitive_names, Some(labels))?;
    Ok((ds, report))
}

/// Age bands of the health-claims data.
pub const HERITAGE_AGE_BANDS: [&str; 9] = ["0-9", "10-19", "20-29", "30-39", "40-49", "50-59", "60-69", "70-79", "80+"];

fn age_band(v: &str) -> Option<usize> {
    if let Some(i) = HERITAGE_AGE_BANDS.iter().position(|b| *b == v) {
        return Some(i);
    }
    let age: f64 = v.parse().ok()?;
    (age >= 0.0).then(|| ((age / 10.0).floor() as usize).min(8))
}

/// Loads the preaggregated health-claims table.
///
/// Requires a header with `Sex`, `AgeAtFirstClaim` and `CharlsonIndex`
/// columns (case-insensitive; `MemberID` is ignored). All other columns are
/// numeric features. The sensitive attribute is the 2 × 9 sex × age-band
/// intersection; the label is a nonzero Charlson index.
pub fn load_heritage(path: &Path) -> Result<(TabularDataset, LoadReport)> {
    let records = read_records(path)?;
    let header: Vec<String> = records
        .first()
        .ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?
        .iter()
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();
    let find = |names: &[&str]| header.iter().position(|h| names.contains(&h.as_str()));
    let sex_c = find(&["sex", "gender"]).ok_or_else(|| Error::MissingColumn("Sex".into()))?;
    let age_c = find(&["ageatfirstclaim", "age"]).ok_or_else(|| Error::MissingColumn("AgeAtFirstClaim".into()))?;
    let y_c = find(&["charlsonindex", "charlsonindexi_max", "charlson"])
        .ok_or_else(|| Error::MissingColumn("CharlsonIndex".into()))?;
    let skip = find(&["memberid"]);
    let feat_cols: Vec<usize> = (0..header.len())
        .filter(|&c| c != sex_c && c != age_c && c != y_c && Some(c) != skip)
        .collect();

    let body = &records[1..];
    let mut report = LoadReport { rows_read: body.len(), rows_dropped: 0 };
    let mut feats = Vec::new();
    let mut sens = Vec::new();
    let mut labels = Vec::new();
    for rec in body {
        let parsed = (|| {
            let sex = match rec.get(sex_c)?.trim() {
                "M" | "m" | "Male" | "male" => 1usize,
                "F" | "f" | "Female" | "female" => 0,
                _ => return None,
            };
            let band = age_band(rec.get(age_c)?.trim())?;
            let yv = rec.get(y_c)?.trim();
            let y = match yv.parse::<f64>() {
                Ok(v) => u8::from(v > 0.0),
                Err(_) if !yv.is_empty() && yv != "?" => u8::from(yv != "0"),
                Err(_) => return None,
            };
            let row: Option<Vec<f64>> = feat_cols
                .iter()
                .map(|&c| rec.get(c).and_then(|v| v.trim().parse::<f64>().ok()).filter(|v| v.is_finite()))
                .collect();
            Some((row?, sex * HERITAGE_AGE_BANDS.len() + band, y))
        })();
        match parsed {
            Some((row, s, y)) => {
                feats.push(row);
                sens.push(s);
                labels.push(y);
            }
            None => report.rows_dropped += 1,
        }
    }
    if report.rows_dropped > 0 {
        log::info!("heritage: dropped {} of {} rows", report.rows_dropped, report.rows_read);
    }
    if feats.is_empty() {
        return Err(Error::Data("no usable rows".into()));
    }
    let raw = Array2::from_shape_fn((feats.len(), feat_cols.len()), |(i, c)| feats[i][c]);
    let names: Vec<String> = feat_cols.iter().map(|&c| records[0].get(c).unwrap_or("").trim().to_string()).collect();
    let sensitive_names = ["F", "M"]
        .iter()
        .flat_map(|s| HERITAGE_AGE_BANDS.iter().map(move |b| format!("sex={s}&age={b}")))
        .collect();
    let cats = vec![Vec::new(); names.len()];
    let ds = TabularDataset::from_raw(raw, names, cats, &sens, sensitive_names, Some(labels))?;
    Ok((ds, report))
}

// ---------------------------------------------------------------------------
// Synthetic generators

/// Sprite factor cardinalities and the shape-sampling weight parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub shapes: usize,
    pub orientations: usize,
    pub scales: usize,
    pub positions: usize,
    pub weight_scale: f64,
    pub exponent: i32,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self { shapes: 3, orientations: 40, scales: 6, positions: 32, weight_scale: 10.0, exponent: 3 }
    }
}

/// Unnormalized weight `1 + c [(i_or / n_or)^k + (i_shape / n_shape)^k]`,
/// indexed `[shape, orientation]`.
pub fn dsprites_unfair_weights(spec: &SamplerSpec) -> Result<Array2<f64>> {
    if spec.shapes == 0 || spec.orientations == 0 || spec.scales == 0 || spec.positions == 0 {
        return Err(Error::InvalidArgument("all factor cardinalities must be ≥ 1".into()));
    }
    Ok(Array2::from_shape_fn((spec.shapes, spec.orientations), |(s, o)| {
        1.0 + spec.weight_scale
            * ((o as f64 / spec.orientations as f64).powi(spec.exponent)
                + (s as f64 / spec.shapes as f64).powi(spec.exponent))
    }))
}

/// One sampled factor combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SpriteFactors {
    pub shape: usize,
    pub orientation: usize,
    pub scale: usize,
    pub pos_x: usize,
    pub pos_y: usize,
    /// Sensitive attribute: quadrant of the orientation angle.
    pub quadrant: usize,
}

/// Quadrant of orientation index `o` out of `n` angles on the circle.
pub fn orientation_quadrant(o: usize, n: usize) -> usize {
    (o * 4 / n).min(3)
}

/// Draws factors: every factor but shape uniform, shape given the other
/// factors proportional to the weight table.
pub fn sample_dsprites_unfair(spec: &SamplerSpec, n: usize, rng: &mut Rng) -> Result<Vec<SpriteFactors>> {
    let w = dsprites_unfair_weights(spec)?;
    Ok((0..n)
        .map(|_| {
            let orientation = rng.random_range(0..spec.orientations);
            let col = w.column(orientation);
            let mut u = rng.random::<f64>() * col.sum();
            let mut shape = spec.shapes - 1;
            for (s, &wt) in col.iter().enumerate() {
                if u < wt {
                    shape = s;
                    break;
                }
                u -= wt;
            }
            SpriteFactors {
                shape,
                orientation,
                scale: rng.random_range(0..spec.scales),
                pos_x: rng.random_range(0..spec.positions),
                pos_y: rng.random_range(0..spec.positions),
                quadrant: orientation_quadrant(orientation, spec.orientations),
            }
        })
        .collect())
}

/// Exact `P(shape, quadrant)` under [`sample_dsprites_unfair`].
pub fn dsprites_shape_quadrant_table(spec: &SamplerSpec) -> Result<Array2<f64>> {
    let w = dsprites_unfair_weights(spec)?;
    let mut t = Array2::zeros((spec.shapes, 4));
    for o in 0..spec.orientations {
        let col = w.column(o);
        let total = col.sum();
        for s in 0..spec.shapes {
            t[[s, orientation_quadrant(o, spec.orientations)]] += col[s] / total / spec.orientations as f64;
        }
    }
    Ok(t)
}

/// Gaussian factor model with a group-dependent mean shift on a known
/// subset of factors.
///
/// The group `g` is uniform on `0..d_s`. There are `factors` latent factors
/// `u_f ~ N(0, 1)`; the first `biased_factors` are shifted by
/// `m_g = bias · shift · (2g/(d_s-1) - 1)`. Column `c` is
/// `u_{c mod factors} + noise · ε_c`, so a column is biased exactly when its
/// factor is. The label is `1{u_last + u_0 / 2 + ε/2 > 0}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub p: usize,
    pub d_s: usize,
    pub bias_strength: f64,
    pub factors: usize,
    pub biased_factors: usize,
    pub shift: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// `ceil(p/3)` factors, half of them (rounded up) biased, unit shift and
    /// noise 0.3.
    pub fn new(n: usize, p: usize, d_s: usize, bias_strength: f64, seed: u64) -> Self {
        let factors = p.div_ceil(3).max(1);
        Self { n, p, d_s, bias_strength, factors, biased_factors: factors.div_ceil(2), shift: 1.0, noise: 0.3, seed }
    }

    /// Group mean of the biased factors.
    pub fn group_mean(&self, g: usize) -> f64 {
        if self.d_s < 2 {
            return 0.0;
        }
        self.bias_strength * self.shift * (2.0 * g as f64 / (self.d_s - 1) as f64 - 1.0)
    }

    /// Columns driven by a biased factor.
    pub fn biased_columns(&self) -> Vec<usize> {
        (0..self.p).filter(|c| c % self.factors < self.biased_factors).collect()
    }

    /// Exact `I(X, S)` in nats.
    ///
    /// Given `g`, `x ~ N(m_g v, Σ)` with a common covariance, so
    /// `T = vᵀ Σ⁻¹ x` is sufficient for `S` and `T | g ~ N(m_g c, c)` with
    /// `c = vᵀ Σ⁻¹ v = Σ_f r_f / (noise² + r_f)` over biased factors loading
    /// on `r_f` columns. Then `I(X, S) = h(T) - h(T | S)`, a one-dimensional
    /// integral evaluated by Simpson's rule.
    pub fn exact_feature_mi(&self) -> f64 {
        let s2 = self.noise * self.noise;
        let c: f64 = (0..self.biased_factors.min(self.factors))
            .map(|f| {
                let r = (0..self.p).filter(|col| col % self.factors == f).count() as f64;
                if r == 0.0 { 0.0 } else { r / (s2 + r) }
            })
            .sum();
        if c == 0.0 || self.d_s < 2 || self.bias_strength == 0.0 {
            return 0.0;
        }
        let sd = c.sqrt();
        let means: Vec<f64> = (0..self.d_s).map(|g| c * self.group_mean(g)).collect();
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min) - 12.0 * sd;
        let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 12.0 * sd;
        let density = |t: f64| {
            means.iter().map(|m| (-(t - m) * (t - m) / (2.0 * c)).exp()).sum::<f64>()
                / (self.d_s as f64 * (2.0 * std::f64::consts::PI * c).sqrt())
        };
        let steps = 20_000;
        let h = (hi - lo) / steps as f64;
        let f = |t: f64| {
            let p = density(t);
            if p > 0.0 { -p * p.ln() } else { 0.0 }
        };
        let mut acc = f(lo) + f(hi);
        for i in 1..steps {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
        }
        let h_t = acc * h / 3.0;
        let h_t_given_s = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * c).ln();
        (h_t - h_t_given_s).max(0.0)
    }
}

/// Generates the dataset described by `spec`.
pub fn synth_biased(spec: &SynthSpec) -> Result<TabularDataset> {
    if !(0.0..=1.0).contains(&spec.bias_strength) {
        return Err(Error::OutOfRange(format!("bias_strength {} outside [0, 1]", spec.bias_strength)));
    }
    if spec.n == 0 || spec.p == 0 || spec.d_s == 0 || spec.factors == 0 {
        return Err(Error::InvalidArgument("n, p, d_s and factors must be ≥ 1".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise {} must be finite and ≥ 0", spec.noise)));
    }
    let mut rng = substream(spec.seed, "synth");
    let mut raw = Array2::zeros((spec.n, spec.p));
    let mut groups = Vec::with_capacity(spec.n);
    let mut labels = Vec::with_capacity(spec.n);
    let mut u = vec![0.0; spec.factors];
    for i in 0..spec.n {
        let g = rng.random_range(0..spec.d_s);
        for (f, uf) in u.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *uf = z + if f < spec.biased_factors { spec.group_mean(g) } else { 0.0 };
        }
        for c in 0..spec.p {
            let e: f64 = rng.sample(StandardNormal);
            raw[[i, c]] = u[c % spec.factors] + spec.noise * e;
        }
        let eps: f64 = rng.sample(StandardNormal);
        labels.push(u8::from(u[spec.factors - 1] + 0.5 * u[0] + 0.5 * eps > 0.0));
        groups.push(g);
    }
    let names = (0..spec.p).map(|c| format!("x{c}")).collect();
    let sensitive_names = (0..spec.d_s).map(|g| format!("group={g}")).collect();
    TabularDataset::from_raw(raw, names, vec![Vec::new(); spec.p], &groups, sensitive_names, Some(labels))
}

// ---------------------------------------------------------------------------
// Columnar cache

const SFDS_MAGIC: &[u8; 5] = b"SFDS1";

#[repr(u8)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum ColumnKind {
    Feature = 0,
    Sensitive = 1,
    Label = 2,
}

/// Writes the columnar cache.
///
/// Layout (little-endian): magic `SFDS1`; `u32` row count; `u32` column
/// count; for each column a `u32`-length-prefixed UTF-8 name, a `u8` kind
/// (0 feature, 1 sensitive indicator, 2 label), `f32` mean and scale, a
/// `u32` category count followed by the category names; then every column's
/// values as `f32`, column after column. Feature values are stored
/// standardized.
pub fn write_dataset(path: &Path, ds: &TabularDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SFDS_MAGIC)?;
    let n_cols = ds.p() + ds.d_s() + usize::from(ds.labels.is_some());
    write_u32(&mut w, len_u32(ds.n())?)?;
    write_u32(&mut w, len_u32(n_cols)?)?;
    let mut header = |name: &str, kind: ColumnKind, mean: f64, scale: f64, cats: &[String]| -> Result<()> {
        write_str(&mut w, name)?;
        w.write_all(&[kind as u8])?;
        write_f32(&mut w, mean as f32)?;
        write_f32(&mut w, scale as f32)?;
        write_u32(&mut w, len_u32(cats.len())?)?;
        cats.iter().try_for_each(|c| write_str(&mut w, c))
    };
    for s in &ds.stats.columns {
        header(&s.name, ColumnKind::Feature, s.mean, s.scale, &s.categories)?;
    }
    for name in &ds.sensitive_names {
        header(name, ColumnKind::Sensitive, 0.0, 1.0, &[])?;
    }
    if ds.labels.is_some() {
        header("label", ColumnKind::Label, 0.0, 1.0, &[])?;
    }
    for col in ds.features.axis_iter(Axis(1)).chain(ds.sensitive.axis_iter(Axis(1))) {
        col.iter().try_for_each(|&v| write_f32(&mut w, v as f32))?;
    }
    if let Some(l) = &ds.labels {
        l.iter().try_for_each(|&v| write_f32(&mut w, f32::from(v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<TabularDataset> {
    let mut r = BufReader::new(File::open(path)?);
    read_dataset_from(&mut r)
}

fn read_dataset_from(r: &mut impl Read) -> Result<TabularDataset> {
    expect_magic(r, SFDS_MAGIC)?;
    let n = read_u32(r, "row count")? as usize;
    let n_cols = read_u32(r, "column count")? as usize;
    if n_cols > 1 << 20 {
        return Err(Error::Corrupt(format!("implausible column count {n_cols}")));
    }
    let mut heads = Vec::with_capacity(n_cols);
    for _ in 0..n_cols {
        let name = read_str(r, 1 << 16, "column name")?;
        let kind = match read_u8(r, "column kind")? {
            0 => ColumnKind::Feature,
            1 => ColumnKind::Sensitive,
            2 => ColumnKind::Label,
            k => return Err(Error::Corrupt(format!("unknown column kind {k}"))),
        };
        let mean = f64::from(read_f32(r, "mean")?);
        let scale = f64::from(read_f32(r, "scale")?);
        let n_cat = read_u32(r, "category count")? as usize;
        if n_cat > 1 << 20 {
            return Err(Error::Corrupt(format!("implausible category count {n_cat}")));
        }
        let categories = (0..n_cat).map(|_| read_str(r, 1 << 16, "category")).collect::<Result<Vec<_>>>()?;
        heads.push((ColumnStats { name, mean, scale, categories }, kind));
    }
    let mut data = Vec::with_capacity(n_cols);
    for (h, _) in &heads {
        let col = (0..n).map(|_| read_f32(r, &h.name).map(f64::from)).collect::<Result<Vec<_>>>()?;
        data.push(col);
    }
    let pick = |kind: ColumnKind| -> Vec<usize> { heads.iter().enumerate().filter(|(_, h)| h.1 == kind).map(|(i, _)| i).collect() };
    let (fi, si, li) = (pick(ColumnKind::Feature), pick(ColumnKind::Sensitive), pick(ColumnKind::Label));
    let features = Array2::from_shape_fn((n, fi.len()), |(i, c)| data[fi[c]][i]);
    let sensitive = Array2::from_shape_fn((n, si.len()), |(i, c)| data[si[c]][i]);
    let labels = li.first().map(|&c| data[c].iter().map(|&v| v as u8).collect());
    let stats = Preprocessing { columns: fi.iter().map(|&c| heads[c].0.clone()).collect() };
    let ds = TabularDataset {
        features,
        sensitive,
        sensitive_names: si.iter().map(|&c| heads[c].0.name.clone()).collect(),
        labels,
        feature_names: stats.columns.iter().map(|c| c.name.clone()).collect(),
        stats,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ADULT_ROWS: &str = "\
39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K
50, Self-emp-not-inc, 83311, Bachelors, 13, Married-civ-spouse, Exec-managerial, Husband, White, Male, 0, 0, 13, United-States, <=50K
38, Private, 215646, HS-grad, 9, Divorced, Handlers-cleaners, Not-in-family, White, Male, 0, 0, 40, United-States, <=50K
53, Private, 234721, 11th, 7, Married-civ-spouse, Handlers-cleaners, Husband, Black, Male, 0, 0, 40, United-States, <=50K
28, Private, 338409, Bachelors, 13, Married-civ-spouse, Prof-specialty, Wife, Black, Female, 0, 0, 40, Cuba, <=50K
37, Private, 284582, Masters, 14, Married-civ-spouse, Exec-managerial, Wife, White, Female, 0, 0, 40, United-States, >50K.
54, ?, 180211, Some-college, 10, Married-civ-spouse, ?, Husband, Asian-Pac-Islander, Male, 0, 0, 60, South, >50K
31, Private, 45781, Masters, 14, Never-married, Prof-specialty, Not-in-family, Asian-Pac-Islander, Female, 14084, 0, 50, United-States, >50K
";

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn adults_gender_and_intersection() {
        let f = write_tmp(ADULT_ROWS);
        let (ds, report) = load_adults(f.path(), AdultsVariant::Gender, CategoricalEncoding::Index).unwrap();
        assert_eq!(report, LoadReport { rows_read: 8, rows_dropped: 1 });
        assert_eq!(ds.n(), 7);
        assert_eq!(ds.p(), 9);
        assert_eq!(ds.d_s(), 2);
        assert_eq!(ds.labels.as_ref().unwrap(), &vec![0, 0, 0, 0, 0, 1, 1]);
        // three race categories survive (White, Black, Asian-Pac-Islander)
        let (ds, _) = load_adults(f.path(), AdultsVariant::GenderRace, CategoricalEncoding::Index).unwrap();
        assert_eq!(ds.d_s(), 2 * 3);
        let (oh, _) = load_adults(f.path(), AdultsVariant::Gender, CategoricalEncoding::OneHot).unwrap();
        assert!(oh.p() > 9);
        assert!(oh.feature_names.iter().any(|n| n == "relationship=Wife"));
    }

    #[test]
    fn adults_with_header_and_missing_column() {
        let mut text = String::from(
            "age,workclass,fnlwgt,education,educational-num,marital-status,occupation,relationship,race,gender,capital-gain,capital-loss,hours-per-week,native-country,income\n",
        );
        text.push_str(ADULT_ROWS);
        let f = write_tmp(&text);
        let (ds, _) = load_adults(f.path(), AdultsVariant::Gender, CategoricalEncoding::Index).unwrap();
        assert_eq!(ds.n(), 7);
        let f = write_tmp("age,workclass,race,sex,income\n39,Private,White,Male,<=50K\n");
        match load_adults(f.path(), AdultsVariant::Gender, CategoricalEncoding::Index) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "education-num"),
            other => panic!("expected missing column, got {other:?}"),
        }
    }

    #[test]
    fn heritage_schema() {
        let mut header = vec!["MemberID".to_string(), "Sex".into(), "AgeAtFirstClaim".into(), "CharlsonIndex".into()];
        header.extend((0..65).map(|i| format!("f{i}")));
        let mut text = header.join(",") + "\n";
        let rows = [("M", "30-39", "0"), ("F", "80+", "1-2"), ("F", "0-9", "0"), ("", "40-49", "0"), ("M", "50-59", "3")];
        for (i, (s, a, c)) in rows.iter().enumerate() {
            let feats: Vec<String> = (0..65).map(|j| format!("{}", (i * j) % 7)).collect();
            text += &format!("{i},{s},{a},{c},{}\n", feats.join(","));
        }
        let f = write_tmp(&text);
        let (ds, report) = load_heritage(f.path()).unwrap();
        assert_eq!(ds.p(), 65);
        assert_eq!(ds.d_s(), 18);
        assert_eq!(report.rows_dropped, 1);
        assert_eq!(ds.labels.clone().unwrap(), vec![0, 1, 0, 1]);
        assert_eq!(ds.sensitive_index(), vec![9 + 3, 8, 0, 9 + 5]);
    }

    #[test]
    fn dsprites_weights() {
        let spec = SamplerSpec::default();
        let w = dsprites_unfair_weights(&spec).unwrap();
        assert_eq!(w[[0, 0]], 1.0);
        let expected = 1.0 + 10.0 * ((39.0f64 / 40.0).powi(3) + (2.0f64 / 3.0).powi(3));
        assert!((w[[2, 39]] - expected).abs() < 1e-12);
        assert!((w[[2, 39]] - 13.2325).abs() < 1e-3);
        for s in 0..3 {
            for o in 0..40 {
                if s + 1 < 3 {
                    assert!(w[[s + 1, o]] > w[[s, o]]);
                }
                if o + 1 < 40 {
                    assert!(w[[s, o + 1]] > w[[s, o]]);
                }
            }
        }
        assert!(dsprites_unfair_weights(&SamplerSpec { shapes: 0, ..spec }).is_err());
    }

    #[test]
    fn dsprites_contingency_matches_analytic() {
        let spec = SamplerSpec::default();
        let mut rng = substream(3, "dsprites");
        let n = 100_000;
        let samples = sample_dsprites_unfair(&spec, n, &mut rng).unwrap();
        let exact = dsprites_shape_quadrant_table(&spec).unwrap();
        assert!((exact.sum() - 1.0).abs() < 1e-12);
        let mut counts = Array2::<f64>::zeros((3, 4));
        for s in &samples {
            counts[[s.shape, s.quadrant]] += 1.0;
            assert!(s.scale < 6 && s.pos_x < 32 && s.pos_y < 32);
        }
        for ((i, j), &p) in exact.indexed_iter() {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((counts[[i, j]] / n as f64 - p).abs() <= 3.0 * se, "cell ({i},{j})");
        }
    }

    #[test]
    fn synthetic_determinism_and_bias() {
        let spec = SynthSpec::new(10_000, 6, 2, 1.0, 42);
        let a = synth_biased(&spec).unwrap();
        let b = synth_biased(&spec).unwrap();
        assert_eq!(a, b);
        // plug-in MI between one discretized biased column and S
        let s = a.sensitive_index();
        let bins = 20;
        let col = a.features.column(0);
        let (lo, hi) = (col.fold(f64::INFINITY, |m, &v| m.min(v)), col.fold(f64::NEG_INFINITY, |m, &v| m.max(v)));
        let mut t = Array2::<f64>::zeros((bins, 2));
        for (i, &v) in col.iter().enumerate() {
            let b = (((v - lo) / (hi - lo)) * bins as f64).min(bins as f64 - 1.0) as usize;
            t[[b, s[i]]] += 1.0 / a.n() as f64;
        }
        let mi = crate::info::mutual_information(t.view()).unwrap();
        assert!(mi > 0.1, "plug-in MI {mi}");
        assert!(mi <= spec.exact_feature_mi() + 0.02);
        assert_eq!(SynthSpec::new(10, 4, 2, 0.0, 1).exact_feature_mi(), 0.0);
        assert!(synth_biased(&SynthSpec::new(10, 4, 2, 1.5, 1)).is_err());
    }

    #[test]
    fn split_properties() {
        let ds = synth_biased(&SynthSpec::new(500, 4, 3, 0.5, 7)).unwrap();
        let (tr, va, te) = split(&ds, [0.6, 0.2, 0.2], 9).unwrap();
        assert_eq!(tr.n() + va.n() + te.n(), 500);
        // train split is standardized on itself
        for c in 0..4 {
            let col = tr.features.column(c);
            assert!(col.mean().unwrap().abs() < 1e-9);
        }
        // every raw row appears exactly once across splits
        let key = |d: &TabularDataset| -> Vec<String> {
            d.raw_features().outer_iter().map(|r| format!("{:.6}", r[0] + 10.0 * r[1])).collect()
        };
        let mut all: Vec<String> = key(&tr).into_iter().chain(key(&va)).chain(key(&te)).collect();
        all.sort();
        let mut orig = key(&ds);
        orig.sort();
        assert_eq!(all, orig);
        let again = split(&ds, [0.6, 0.2, 0.2], 9).unwrap();
        assert_eq!(again.0, tr);
        assert!(split(&ds, [0.5, 0.5, 0.0], 9).is_err());
        assert!(split(&ds, [0.7, 0.2, 0.2], 9).is_err());
    }

    #[test]
    fn inverse_transform_roundtrip() {
        let ds = synth_biased(&SynthSpec::new(300, 5, 2, 1.0, 3)).unwrap();
        let raw = ds.raw_features();
        let again = ds.stats.transform(&raw);
        let back = ds.stats.inverse(&again);
        for (a, b) in raw.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn cache_roundtrip() {
        let ds = synth_biased(&SynthSpec::new(50, 3, 2, 1.0, 5)).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_dataset(f.path(), &ds).unwrap();
        let back = read_dataset(f.path()).unwrap();
        assert_eq!(back.n(), 50);
        assert_eq!(back.feature_names, ds.feature_names);
        assert_eq!(back.sensitive, ds.sensitive);
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.features.iter().zip(ds.features.iter()) {
            assert_eq!(*a, f64::from(*b as f32));
        }
        let bytes = std::fs::read(f.path()).unwrap();
        assert_eq!(&bytes[..5], b"SFDS1");
        assert!(matches!(read_dataset_from(&mut &bytes[..40]), Err(Error::Corrupt(_))));
        assert!(matches!(read_dataset_from(&mut &b"XXXXX"[..]), Err(Error::Corrupt(_))));
    }
}
