//! Exact information quantities on small finite distributions.
//!
//! Everything here is in nats. A [`FiniteJoint`] holds `p(x, s)` and a
//! [`StochasticEncoder`] holds `p(z | x)`; because the code is produced from
//! `x` alone, the three-way joint factorises as `p(x, s) p(z | x)`. The
//! functions below enumerate that joint exactly, which makes them usable as
//! oracles for the identities linking unfairness, rate and distortion.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::Exp1;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Largest supported feature alphabet.
pub const MAX_X: usize = 16;
/// Largest supported sensitive alphabet.
pub const MAX_S: usize = 8;
/// Largest supported code alphabet.
pub const MAX_Z: usize = 16;

const SUM_TOL: f64 = 1e-9;

fn check_probs<'a>(values: impl IntoIterator<Item = &'a f64>, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &p in values {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::InvalidDistribution(format!("{what}: entry {p} is negative or non-finite")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidDistribution(format!("{what}: entries sum to {sum}")));
    }
    Ok(())
}

fn plogp_sum<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    values
        .into_iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum::<f64>()
        .max(0.0)
}

/// Shannon entropy `-Σ p ln p` of a probability vector, with `0 ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    check_probs(dist, "probability vector")?;
    Ok(plogp_sum(dist))
}

/// Mutual information of the two axes of a joint probability table,
/// computed as `H(A) + H(B) - H(A, B)`.
pub fn mutual_information(joint: ArrayView2<'_, f64>) -> Result<f64> {
    check_probs(joint.iter(), "joint table")?;
    let pa = joint.sum_axis(Axis(1));
    let pb = joint.sum_axis(Axis(0));
    let mi = plogp_sum(pa.iter()) + plogp_sum(pb.iter()) - plogp_sum(joint.iter());
    Ok(mi.max(0.0))
}

fn dirichlet_row(rng: &mut Rng, len: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= total);
    row
}

/// Joint distribution of features `X` and sensitive attribute `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteJoint {
    p_xs: Array2<f64>,
}

impl FiniteJoint {
    /// Builds a joint from a `|X| × |S|` probability table.
    pub fn new(p_xs: Array2<f64>) -> Result<Self> {
        let (nx, ns) = p_xs.dim();
        if nx == 0 || ns == 0 || nx > MAX_X || ns > MAX_S {
            return Err(Error::DimensionMismatch(format!(
                "joint table is {nx}×{ns}; supported sizes are 1..={MAX_X} × 1..={MAX_S}"
            )));
        }
        check_probs(p_xs.iter(), "joint table")?;
        Ok(Self { p_xs })
    }

    /// Draws a joint whose flattened table is Dirichlet(1).
    pub fn random(nx: usize, ns: usize, rng: &mut Rng) -> Result<Self> {
        let flat = dirichlet_row(rng, nx * ns);
        let table = Array2::from_shape_vec((nx, ns), flat)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        Self::new(table)
    }

    pub fn table(&self) -> ArrayView2<'_, f64> {
        self.p_xs.view()
    }

    pub fn nx(&self) -> usize {
        self.p_xs.nrows()
    }

    pub fn ns(&self) -> usize {
        self.p_xs.ncols()
    }

    pub fn h_s(&self) -> f64 {
        plogp_sum(self.p_xs.sum_axis(Axis(0)).iter())
    }

    pub fn h_x(&self) -> f64 {
        plogp_sum(self.p_xs.sum_axis(Axis(1)).iter())
    }

    /// `H(X | S) = H(X, S) - H(S)`.
    pub fn h_x_given_s(&self) -> f64 {
        (plogp_sum(self.p_xs.iter()) - self.h_s()).max(0.0)
    }

    pub fn i_xs(&self) -> f64 {
        (self.h_x() + self.h_s() - plogp_sum(self.p_xs.iter())).max(0.0)
    }
}

/// Channel `p(z | x)`; rows are indexed by `x`, columns by `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticEncoder {
    p_z_given_x: Array2<f64>,
}

impl StochasticEncoder {
    pub fn new(p_z_given_x: Array2<f64>) -> Result<Self> {
        let (nx, nz) = p_z_given_x.dim();
        if nx == 0 || nz == 0 || nx > MAX_X || nz > MAX_Z {
            return Err(Error::DimensionMismatch(format!(
                "encoder table is {nx}×{nz}; supported sizes are 1..={MAX_X} × 1..={MAX_Z}"
            )));
        }
        for (x, row) in p_z_given_x.outer_iter().enumerate() {
            check_probs(row.iter(), &format!("encoder row {x}"))?;
        }
        Ok(Self { p_z_given_x })
    }

    /// Each row drawn independently from Dirichlet(1).
    pub fn random(nx: usize, nz: usize, rng: &mut Rng) -> Result<Self> {
        let mut table = Array2::zeros((nx, nz));
        for mut row in table.outer_iter_mut() {
            for (dst, v) in row.iter_mut().zip(dirichlet_row(rng, nz)) {
                *dst = v;
            }
        }
        Self::new(table)
    }

    /// Deterministic encoder `z = map[x]`.
    pub fn deterministic(map: &[usize], nz: usize) -> Result<Self> {
        let mut table = Array2::zeros((map.len(), nz));
        for (x, &z) in map.iter().enumerate() {
            if z >= nz {
                return Err(Error::OutOfRange(format!("code {z} for x={x} exceeds alphabet {nz}")));
            }
            table[[x, z]] = 1.0;
        }
        Self::new(table)
    }

    /// `z = x`.
    pub fn identity(nx: usize) -> Result<Self> {
        Self::deterministic(&(0..nx).collect::<Vec<_>>(), nx)
    }

    /// Every row equal to the same distribution, so `Z ⫫ X`.
    pub fn independent(nx: usize, code_dist: &[f64]) -> Result<Self> {
        let nz = code_dist.len();
        let mut table = Array2::zeros((nx, nz));
        for mut row in table.outer_iter_mut() {
            row.iter_mut().zip(code_dist).for_each(|(d, &p)| *d = p);
        }
        Self::new(table)
    }

    pub fn table(&self) -> ArrayView2<'_, f64> {
        self.p_z_given_x.view()
    }

    pub fn nz(&self) -> usize {
        self.p_z_given_x.ncols()
    }
}

/// Information quantities of one encoder applied to one joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderInfo {
    /// `H(X | Z, S)`.
    pub distortion: f64,
    /// `I(Z, X)`.
    pub rate: f64,
    /// `I(Z, S)`.
    pub unfairness: f64,
    /// `H(X | S)`.
    pub h_x_given_s: f64,
}

impl EncoderInfo {
    /// `|I(Z,S) - I(Z,X) - H(X|Z,S) + H(X|S)|`.
    pub fn residual(&self) -> f64 {
        (self.unfairness - self.rate - self.distortion + self.h_x_given_s).abs()
    }
}

fn three_way(joint: &FiniteJoint, enc: &StochasticEncoder) -> Result<Array3<f64>> {
    if joint.nx() != enc.p_z_given_x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "joint has |X|={} but encoder has {} rows",
            joint.nx(),
            enc.p_z_given_x.nrows()
        )));
    }
    let (nx, ns, nz) = (joint.nx(), joint.ns(), enc.nz());
    let mut p = Array3::zeros((nx, ns, nz));
    for x in 0..nx {
        for s in 0..ns {
            for z in 0..nz {
                p[[x, s, z]] = joint.p_xs[[x, s]] * enc.p_z_given_x[[x, z]];
            }
        }
    }
    Ok(p)
}

/// Enumerates the exact joint `p(x, s) p(z | x)` and returns its quantities.
pub fn analyze(joint: &FiniteJoint, enc: &StochasticEncoder) -> Result<EncoderInfo> {
    let p = three_way(joint, enc)?;
    let p_sz = p.sum_axis(Axis(0));
    let p_xz = p.sum_axis(Axis(1));
    let h_xsz = plogp_sum(p.iter());
    let h_sz = plogp_sum(p_sz.iter());
    let h_z = plogp_sum(p_sz.sum_axis(Axis(0)).iter());
    let h_s = joint.h_s();
    let h_x = joint.h_x();
    let h_xz = plogp_sum(p_xz.iter());
    Ok(EncoderInfo {
        distortion: (h_xsz - h_sz).max(0.0),
        rate: (h_x + h_z - h_xz).max(0.0),
        unfairness: (h_s + h_z - h_sz).max(0.0),
        h_x_given_s: joint.h_x_given_s(),
    })
}

/// Residual of the identity `I(Z,S) = I(Z,X) + H(X|Z,S) - H(X|S)`.
pub fn identity_residual(joint: &FiniteJoint, enc: &StochasticEncoder) -> Result<f64> {
    Ok(analyze(joint, enc)?.residual())
}

/// Encodes with a constant code and returns `(H(X|Z,S), I(Z,S))`.
///
/// For such an encoder the distortion collapses to `H(X|S)` and the
/// unfairness to zero: the right end of the unfairness-distortion curve.
/// A single-symbol code keeps every product exact, so both values match
/// [`FiniteJoint::h_x_given_s`] and `0.0` bit for bit.
pub fn fair_limit_check(joint: &FiniteJoint) -> Result<(f64, f64)> {
    let enc = StochasticEncoder::independent(joint.nx(), &[1.0])?;
    let info = analyze(joint, &enc)?;
    Ok((info.distortion, info.unfairness))
}

/// One sampled achievable point.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct FrontierPoint {
    pub distortion: f64,
    pub rate: f64,
    pub unfairness: f64,
    pub residual: f64,
}

/// Samples `n_samples` Dirichlet(1) encoders with `n_codes` outputs.
pub fn frontier_scan(
    joint: &FiniteJoint,
    n_samples: usize,
    n_codes: usize,
    rng: &mut Rng,
) -> Result<Vec<FrontierPoint>> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    (0..n_samples)
        .map(|_| {
            let enc = StochasticEncoder::random(joint.nx(), n_codes, rng)?;
            let info = analyze(joint, &enc)?;
            Ok(FrontierPoint {
                distortion: info.distortion,
                rate: info.rate,
                unfairness: info.unfairness,
                residual: info.residual(),
            })
        })
        .collect()
}

/// Lower envelope of unfairness over equal-width distortion bins.
///
/// Returns `(bin_upper_edge, min unfairness over all points with distortion
/// up to that edge)`; empty bins carry the running minimum forward, so the
/// envelope is non-increasing.
pub fn lower_envelope(points: &[FrontierPoint], n_bins: usize) -> Vec<(f64, f64)> {
    if points.is_empty() || n_bins == 0 {
        return Vec::new();
    }
    let lo = points.iter().map(|p| p.distortion).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.distortion).fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / n_bins as f64).max(f64::MIN_POSITIVE);
    let mut bin_min = vec![f64::INFINITY; n_bins];
    for p in points {
        let b = (((p.distortion - lo) / width) as usize).min(n_bins - 1);
        bin_min[b] = bin_min[b].min(p.unfairness);
    }
    let mut running = f64::INFINITY;
    bin_min
        .iter()
        .enumerate()
        .filter_map(|(b, &m)| {
            running = running.min(m);
            running.is_finite().then(|| (lo + width * (b + 1) as f64, running))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use ndarray::array;

    // Independent double-loop plug-in oracle: Σ p log(p / (pa pb)).
    fn plug_in_mi(t: &Array2<f64>) -> f64 {
        let (na, nb) = t.dim();
        let mut mi = 0.0;
        for a in 0..na {
            let pa: f64 = (0..nb).map(|b| t[[a, b]]).sum();
            for b in 0..nb {
                let pb: f64 = (0..na).map(|i| t[[i, b]]).sum();
                let p = t[[a, b]];
                if p > 0.0 {
                    mi += p * (p / (pa * pb)).ln();
                }
            }
        }
        mi
    }

    #[test]
    fn entropy_values() {
        assert!((entropy(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let brute = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((entropy(&[0.25, 0.75]).unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_bad_input() {
        assert!(entropy(&[-0.1, 1.1]).is_err());
        assert!(entropy(&[0.5, 0.4]).is_err());
        assert!(entropy(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn mutual_information_values() {
        let indep = array![[0.12, 0.28], [0.18, 0.42]];
        assert!(mutual_information(indep.view()).unwrap() < 1e-10);
        let copy = array![[0.5, 0.0], [0.0, 0.5]];
        assert!((mutual_information(copy.view()).unwrap() - 2f64.ln()).abs() < 1e-12);
        let mut rng = substream(3, "mi");
        for _ in 0..20 {
            let t = Array2::from_shape_vec((4, 4), dirichlet_row(&mut rng, 16)).unwrap();
            let mi = mutual_information(t.view()).unwrap();
            assert!((mi - plug_in_mi(&t)).abs() < 1e-10);
        }
        assert!(mutual_information(array![[0.5, 0.6]].view()).is_err());
    }

    #[test]
    fn lemma1_on_deterministic_and_constant_codes() {
        let mut rng = substream(11, "lemma1");
        for _ in 0..50 {
            let joint = FiniteJoint::random(6, 3, &mut rng).unwrap();
            let map: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
            let enc = StochasticEncoder::deterministic(&map, 4).unwrap();
            assert!(identity_residual(&joint, &enc).unwrap() <= 1e-9);
        }
        let joint = FiniteJoint::random(5, 2, &mut rng).unwrap();
        let constant = StochasticEncoder::deterministic(&[0; 5], 3).unwrap();
        let info = analyze(&joint, &constant).unwrap();
        assert!(info.residual() <= 1e-9);
        assert!(info.unfairness.abs() <= 1e-12);
    }

    #[test]
    fn lemma1_dimension_mismatch() {
        let joint = FiniteJoint::new(array![[0.25, 0.25], [0.25, 0.25]]).unwrap();
        let enc = StochasticEncoder::identity(3).unwrap();
        assert!(matches!(identity_residual(&joint, &enc), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn fair_limit() {
        let joint = FiniteJoint::new(array![[0.5, 0.0], [0.0, 0.5]]).unwrap();
        let (d, i) = fair_limit_check(&joint).unwrap();
        assert!(d.abs() < 1e-12);
        assert!(i.abs() < 1e-10);

        let mut rng = substream(5, "fair");
        let joint = FiniteJoint::random(7, 3, &mut rng).unwrap();
        // direct H(X|S) = -Σ p(x,s) ln p(x|s)
        let t = joint.table();
        let mut oracle = 0.0;
        for s in 0..3 {
            let ps: f64 = t.column(s).sum();
            for x in 0..7 {
                let p = t[[x, s]];
                if p > 0.0 {
                    oracle -= p * (p / ps).ln();
                }
            }
        }
        let (d, i) = fair_limit_check(&joint).unwrap();
        assert!((d - oracle).abs() < 1e-10);
        assert!(i.abs() < 1e-10);
    }

    #[test]
    fn identity_code_is_lossless() {
        let mut rng = substream(9, "identity");
        let joint = FiniteJoint::random(4, 2, &mut rng).unwrap();
        let info = analyze(&joint, &StochasticEncoder::identity(4).unwrap()).unwrap();
        assert!(info.distortion.abs() < 1e-12);
        assert!((info.rate - joint.h_x()).abs() < 1e-12);
        assert!((info.unfairness - joint.i_xs()).abs() < 1e-12);
    }

    #[test]
    fn frontier_scan_identity_and_envelope() {
        let mut rng = substream(1, "scan");
        let joint = FiniteJoint::random(4, 2, &mut rng).unwrap();
        let points = frontier_scan(&joint, 1000, 4, &mut rng).unwrap();
        assert_eq!(points.len(), 1000);
        let hxs = joint.h_x_given_s();
        for p in &points {
            assert!((p.unfairness - (p.rate + p.distortion - hxs)).abs() <= 1e-9);
            assert!(p.unfairness <= joint.i_xs() + 1e-9);
            assert!(p.distortion <= hxs + 1e-10);
        }
        let env = lower_envelope(&points, 20);
        assert!(!env.is_empty());
        assert!(env.windows(2).all(|w| w[1].1 <= w[0].1));
        assert!(frontier_scan(&joint, 0, 4, &mut rng).is_err());
    }

    #[test]
    fn size_limits_enforced() {
        assert!(FiniteJoint::new(Array2::from_elem((17, 1), 1.0 / 17.0)).is_err());
        assert!(StochasticEncoder::new(Array2::from_elem((2, 17), 1.0 / 17.0)).is_err());
        assert!(StochasticEncoder::new(array![[0.5, 0.6]]).is_err());
    }
}
