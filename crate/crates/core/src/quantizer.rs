//! Multi-resolution bitplane quantizer.
//!
//! A latent dimension is carried by `A` bits `b_1 .. b_A` (most significant
//! first) and a fairness level `β` decides how many of them are visible.
//! The allocation `a_j(β) = A (1 - tanh(h_j β))` shrinks as `β` grows, and
//! bit `l` stays visible while `a_j(β) ≥ l`. Coarse codes are always
//! obtained by masking one full-resolution code, so moving from `β` to a
//! smaller `β'` only ever appends bits:
//!
//! ```text
//! z_j(β') = z_j(β) + Σ_{l = n_j(β)+1}^{n_j(β')} b_{j,l} 2^{-l}
//! ```

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `2^{-l}` for a 1-based bit position.
pub fn bit_weight(l: usize) -> f64 {
    (-(l as f64)).exp2()
}

/// Continuous allocation for one dimension.
pub fn allocation(h: f64, beta: f64, max_bits: usize) -> f64 {
    max_bits as f64 * (1.0 - (h * beta).tanh())
}

/// `∂a/∂h` and `∂a/∂β` of [`allocation`].
pub fn allocation_grad(h: f64, beta: f64, max_bits: usize) -> (f64, f64) {
    let t = (h * beta).tanh();
    let sech2 = 1.0 - t * t;
    let a = max_bits as f64;
    (-a * beta * sech2, -a * h * sech2)
}

/// Number of visible bits for a continuous allocation: `#{l ≤ A : a ≥ l}`.
///
/// `σ(a - l) ≥ 1/2` exactly when `a ≥ l`, so ties count as visible.
pub fn active_bits(a: f64, max_bits: usize) -> usize {
    if a.is_nan() || a < 1.0 {
        0
    } else {
        (a.floor() as usize).min(max_bits)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::OutOfRange(format!("beta = {beta} is outside [0, 1]")));
    }
    Ok(())
}

/// Per-dimension bit budget at one fairness level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitAllocation {
    a: Vec<f64>,
    max_bits: usize,
}

impl BitAllocation {
    /// Wraps explicit allocations, checking `0 ≤ a_j ≤ A`.
    pub fn from_values(a: Vec<f64>, max_bits: usize) -> Result<Self> {
        if max_bits == 0 {
            return Err(Error::InvalidArgument("max_bits must be at least 1".into()));
        }
        if let Some(bad) = a.iter().find(|v| !(0.0..=max_bits as f64).contains(*v)) {
            return Err(Error::OutOfRange(format!("allocation {bad} outside [0, {max_bits}]")));
        }
        Ok(Self { a, max_bits })
    }

    pub fn values(&self) -> &[f64] {
        &self.a
    }

    pub fn max_bits(&self) -> usize {
        self.max_bits
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// Visible bit count per dimension.
    pub fn active_counts(&self) -> Vec<usize> {
        self.a.iter().map(|&a| active_bits(a, self.max_bits)).collect()
    }
}

/// `a_j = A (1 - tanh(h_j β))`, kept continuous.
pub fn bit_allocation(h_a_out: &[f64], beta: f64, max_bits: usize) -> Result<BitAllocation> {
    check_beta(beta)?;
    if let Some(bad) = h_a_out.iter().find(|h| !h.is_finite() || **h < 0.0) {
        return Err(Error::OutOfRange(format!("allocation head output {bad} must be finite and ≥ 0")));
    }
    BitAllocation::from_values(
        h_a_out.iter().map(|&h| allocation(h, beta, max_bits)).collect(),
        max_bits,
    )
}

/// Soft mask `σ(a_j - l)` for `l = 1..A` and its rounding.
pub fn soft_mask(alloc: &BitAllocation) -> (Array2<f64>, Array2<u8>) {
    let (d, bits) = (alloc.dim(), alloc.max_bits);
    let soft = Array2::from_shape_fn((d, bits), |(j, l)| sigmoid(alloc.a[j] - (l + 1) as f64));
    let hard = Array2::from_shape_fn((d, bits), |(j, l)| u8::from(alloc.a[j] >= (l + 1) as f64));
    (soft, hard)
}

/// Reference head: the `A`-bit binary expansion of a scalar in `[0, 1)`.
///
/// `k = ⌊e 2^A + 1/2⌋` clamped to `[0, 2^A - 1]`, written big-endian.
pub fn binary_expand(e: f64, max_bits: usize) -> Result<Vec<u8>> {
    if !(0.0..1.0).contains(&e) {
        return Err(Error::OutOfRange(format!("e = {e} is outside [0, 1)")));
    }
    if max_bits == 0 || max_bits > 52 {
        return Err(Error::InvalidArgument(format!("max_bits = {max_bits} must be in 1..=52")));
    }
    let levels = 1u64 << max_bits;
    let k = ((e * levels as f64 + 0.5).floor() as u64).min(levels - 1);
    Ok((0..max_bits).map(|l| ((k >> (max_bits - 1 - l)) & 1) as u8).collect())
}

/// A full-resolution bitplane code and the mask selecting its visible part.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitCode {
    bits: Array2<u8>,
    mask: Array2<u8>,
}

impl BitCode {
    /// Checks that bits and mask are binary, equally shaped, and the mask
    /// rows are prefixes.
    pub fn new(bits: Array2<u8>, mask: Array2<u8>) -> Result<Self> {
        if bits.dim() != mask.dim() {
            return Err(Error::DimensionMismatch(format!(
                "bits {:?} vs mask {:?}",
                bits.dim(),
                mask.dim()
            )));
        }
        if bits.iter().chain(mask.iter()).any(|&b| b > 1) {
            return Err(Error::InvalidArgument("bits and mask must be 0/1".into()));
        }
        for (j, row) in mask.outer_iter().enumerate() {
            if row.iter().zip(row.iter().skip(1)).any(|(&a, &b)| b > a) {
                return Err(Error::InvalidArgument(format!("mask row {j} is not a prefix")));
            }
        }
        Ok(Self { bits, mask })
    }

    pub fn bits(&self) -> ArrayView2<'_, u8> {
        self.bits.view()
    }

    pub fn mask(&self) -> ArrayView2<'_, u8> {
        self.mask.view()
    }

    pub fn dim(&self) -> usize {
        self.bits.nrows()
    }

    pub fn max_bits(&self) -> usize {
        self.bits.ncols()
    }

    /// Visible bit count per dimension (mask rows are prefixes).
    pub fn active_counts(&self) -> Vec<usize> {
        self.mask.outer_iter().map(|r| r.iter().map(|&m| m as usize).sum()).collect()
    }

    pub fn mean_bits(&self) -> f64 {
        let counts = self.active_counts();
        counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64
    }

    /// `z_j = Σ_l m_{j,l} b_{j,l} 2^{-l}`; exact dyadic arithmetic.
    pub fn values(&self) -> Vec<f64> {
        self.bits
            .outer_iter()
            .zip(self.mask.outer_iter())
            .map(|(b, m)| {
                b.iter()
                    .zip(m.iter())
                    .enumerate()
                    .filter(|(_, (&b, &m))| b == 1 && m == 1)
                    .map(|(l, _)| bit_weight(l + 1))
                    .sum()
            })
            .collect()
    }

    /// The visible prefix of row `j`.
    pub fn visible(&self, j: usize) -> Vec<u8> {
        self.bits
            .row(j)
            .iter()
            .zip(self.mask.row(j).iter())
            .take_while(|(_, &m)| m == 1)
            .map(|(&b, _)| b)
            .collect()
    }

    /// Packs the full bitplane big-endian, rows concatenated, zero-padded
    /// to a whole byte at the end of the sample.
    pub fn pack_bits(&self) -> Vec<u8> {
        let total = self.bits.len();
        let mut out = vec![0u8; total.div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            out[i / 8] |= b << (7 - (i % 8));
        }
        out
    }

    /// Visible-bit count per row, one byte each.
    pub fn mask_counts(&self) -> Vec<u8> {
        self.active_counts().into_iter().map(|c| c as u8).collect()
    }

    /// Inverse of [`pack_bits`](Self::pack_bits) plus [`mask_counts`](Self::mask_counts).
    pub fn unpack(packed: &[u8], counts: &[u8], max_bits: usize) -> Result<Self> {
        let d = counts.len();
        if packed.len() != (d * max_bits).div_ceil(8) {
            return Err(Error::Corrupt(format!(
                "packed length {} does not match {d}×{max_bits} bits",
                packed.len()
            )));
        }
        if let Some(c) = counts.iter().find(|&&c| c as usize > max_bits) {
            return Err(Error::Corrupt(format!("mask count {c} exceeds {max_bits}")));
        }
        let bits = Array2::from_shape_fn((d, max_bits), |(j, l)| {
            let i = j * max_bits + l;
            (packed[i / 8] >> (7 - (i % 8))) & 1
        });
        let mask = Array2::from_shape_fn((d, max_bits), |(j, l)| u8::from(l < counts[j] as usize));
        Self::new(bits, mask)
    }
}

fn round_bit(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

/// Rounds per-bit logits and applies the hard mask of `alloc`.
///
/// In training the rounding is straight-through: the backward pass is the
/// identity, see [`quantize_backward`].
pub fn quantize(bit_logits: ArrayView2<'_, f64>, alloc: &BitAllocation) -> Result<BitCode> {
    if bit_logits.dim() != (alloc.dim(), alloc.max_bits) {
        return Err(Error::DimensionMismatch(format!(
            "bit logits {:?} vs allocation {}×{}",
            bit_logits.dim(),
            alloc.dim(),
            alloc.max_bits
        )));
    }
    if let Some(bad) = bit_logits.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::OutOfRange(format!("bit logit {bad} outside [0, 1]")));
    }
    let bits = bit_logits.mapv(round_bit);
    let (_, mask) = soft_mask(alloc);
    BitCode::new(bits, mask)
}

/// Gradients of a downstream scalar through `z_j = Σ_l m_{j,l} b_{j,l} 2^{-l}`.
///
/// `grad_values` is `∂L/∂z`; `bits` and `mask` are the forward-pass values
/// (hard when rounding, soft on the identity path). Rounding is the identity
/// in the backward pass, so the returned pair is `(∂L/∂logits, ∂L/∂soft_mask)`.
pub fn quantize_backward(
    grad_values: &[f64],
    bits: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (d, nb) = bits.dim();
    let g_bits = Array2::from_shape_fn((d, nb), |(j, l)| grad_values[j] * mask[[j, l]] * bit_weight(l + 1));
    let g_mask = Array2::from_shape_fn((d, nb), |(j, l)| grad_values[j] * bits[[j, l]] * bit_weight(l + 1));
    (g_bits, g_mask)
}

/// Re-masks the same bits with a finer allocation.
pub fn refine(code: &BitCode, alloc_fine: &BitAllocation) -> Result<BitCode> {
    if alloc_fine.dim() != code.dim() || alloc_fine.max_bits != code.max_bits() {
        return Err(Error::DimensionMismatch("allocation does not match code shape".into()));
    }
    let (_, mask) = soft_mask(alloc_fine);
    let fine = mask.outer_iter().map(|r| r.iter().map(|&m| m as usize).sum::<usize>());
    for (j, (c, f)) in code.active_counts().into_iter().zip(fine).enumerate() {
        if f < c {
            return Err(Error::InvalidArgument(format!(
                "refinement would hide bits in dimension {j} ({c} → {f})"
            )));
        }
    }
    BitCode::new(code.bits.clone(), mask)
}

/// One bit revealed by a refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NewBit {
    pub dim: usize,
    /// 1-based position.
    pub position: usize,
    pub bit: u8,
}

/// Positions visible in `fine` but not in `coarse`.
pub fn new_bits(coarse: &BitCode, fine: &BitCode) -> Result<Vec<NewBit>> {
    if coarse.bits != fine.bits {
        return Err(Error::InvalidArgument("codes do not share the same underlying bits".into()));
    }
    let mut out = Vec::new();
    for ((j, l), &m) in fine.mask.indexed_iter() {
        let c = coarse.mask[[j, l]];
        if c > m {
            return Err(Error::InvalidArgument(format!("masks are not nested at ({j}, {})", l + 1)));
        }
        if m == 1 && c == 0 {
            out.push(NewBit { dim: j, position: l + 1, bit: fine.bits[[j, l]] });
        }
    }
    Ok(out)
}

/// Per-dimension value added by a refinement, `Σ_{new l} b_{j,l} 2^{-l}`.
pub fn refinement_delta(coarse: &BitCode, fine: &BitCode) -> Result<Vec<f64>> {
    let mut delta = vec![0.0; fine.dim()];
    for nb in new_bits(coarse, fine)? {
        if nb.bit == 1 {
            delta[nb.dim] += bit_weight(nb.position);
        }
    }
    Ok(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn logits_from_expansion(e: f64, nb: usize) -> Array2<f64> {
        let bits = binary_expand(e, nb).unwrap();
        Array2::from_shape_vec((1, nb), bits.into_iter().map(f64::from).collect()).unwrap()
    }

    #[test]
    fn allocation_examples() {
        let a = bit_allocation(&[0.3, 2.0], 0.0, 8).unwrap();
        assert_eq!(a.values(), &[8.0, 8.0]);
        let a = bit_allocation(&[0.7], 0.5, 8).unwrap();
        assert!((a.values()[0] - 8.0 * (1.0 - 0.35f64.tanh())).abs() < 1e-12);
        assert!((a.values()[0] - 5.3).abs() < 0.01);
        let a = bit_allocation(&[1.0], 1.0, 8).unwrap();
        assert!((a.values()[0] - 1.9073).abs() < 1e-4);
        assert!(bit_allocation(&[1.0], 1.5, 8).is_err());
        assert!(bit_allocation(&[-1.0], 0.5, 8).is_err());
    }

    #[test]
    fn mask_examples() {
        let alloc = BitAllocation::from_values(vec![5.3, 0.0, 8.0], 8).unwrap();
        let (soft, hard) = soft_mask(&alloc);
        assert_eq!(hard.row(0).to_vec(), vec![1, 1, 1, 1, 1, 0, 0, 0]);
        assert!(hard.row(1).iter().all(|&m| m == 0));
        assert!(hard.row(2).iter().all(|&m| m == 1));
        // rounding the soft mask agrees with the threshold form
        for ((j, l), &s) in soft.indexed_iter() {
            assert_eq!(u8::from(s >= 0.5), hard[[j, l]]);
        }
    }

    #[test]
    fn binary_expand_examples() {
        assert_eq!(binary_expand(0.7, 8).unwrap(), vec![1, 0, 1, 1, 0, 0, 1, 1]);
        assert_eq!(binary_expand(0.0, 5).unwrap(), vec![0; 5]);
        // clamped at the top
        assert_eq!(binary_expand(0.9999, 3).unwrap(), vec![1, 1, 1]);
        assert!(binary_expand(1.0, 8).is_err());
    }

    #[test]
    fn worked_example_values() {
        let logits = logits_from_expansion(0.7, 8);
        let full = quantize(logits.view(), &BitAllocation::from_values(vec![8.0], 8).unwrap()).unwrap();
        assert_eq!(full.values(), vec![179.0 / 256.0]);
        let coarse = quantize(logits.view(), &bit_allocation(&[0.7], 0.5, 8).unwrap()).unwrap();
        assert_eq!(coarse.values(), vec![0.6875]);
        assert_eq!(coarse.visible(0), vec![1, 0, 1, 1, 0]);
        let refined = refine(&coarse, &BitAllocation::from_values(vec![8.0], 8).unwrap()).unwrap();
        assert_eq!(refined.values(), vec![0.69921875]);
        let delta = refinement_delta(&coarse, &refined).unwrap();
        assert_eq!(coarse.values()[0] + delta[0], refined.values()[0]);
    }

    #[test]
    fn below_threshold_is_zero() {
        let logits = Array2::from_elem((3, 4), 0.5 - 1e-9);
        let code = quantize(logits.view(), &BitAllocation::from_values(vec![4.0; 3], 4).unwrap()).unwrap();
        assert_eq!(code.values(), vec![0.0; 3]);
    }

    #[test]
    fn refine_rejects_coarser() {
        let logits = Array2::from_elem((1, 4), 0.9);
        let code = quantize(logits.view(), &BitAllocation::from_values(vec![3.0], 4).unwrap()).unwrap();
        assert!(refine(&code, &BitAllocation::from_values(vec![2.0], 4).unwrap()).is_err());
        let same = refine(&code, &BitAllocation::from_values(vec![3.0], 4).unwrap()).unwrap();
        assert_eq!(same, code);
    }

    #[test]
    fn new_bits_structure() {
        let logits = array![[0.9, 0.1, 0.8, 0.7], [0.2, 0.6, 0.6, 0.1]];
        let coarse = quantize(logits.view(), &BitAllocation::from_values(vec![1.0, 2.5], 4).unwrap()).unwrap();
        let fine = refine(&coarse, &BitAllocation::from_values(vec![4.0, 3.0], 4).unwrap()).unwrap();
        assert!(new_bits(&fine, &fine).unwrap().is_empty());
        let nb = new_bits(&coarse, &fine).unwrap();
        let expected: usize = fine
            .active_counts()
            .iter()
            .zip(coarse.active_counts())
            .map(|(f, c)| f - c)
            .sum();
        assert_eq!(nb.len(), expected);
        for b in &nb {
            assert_eq!(coarse.mask()[[b.dim, b.position - 1]], 0);
        }
        assert!(new_bits(&fine, &coarse).is_err());
    }

    #[test]
    fn pack_roundtrip_and_layout() {
        let logits = logits_from_expansion(0.7, 8);
        let code = quantize(logits.view(), &BitAllocation::from_values(vec![5.3], 8).unwrap()).unwrap();
        assert_eq!(code.pack_bits(), vec![0b1011_0011]);
        assert_eq!(code.mask_counts(), vec![5]);
        let back = BitCode::unpack(&code.pack_bits(), &code.mask_counts(), 8).unwrap();
        assert_eq!(back, code);
        assert!(BitCode::unpack(&[0, 0], &[1], 8).is_err());
    }

    #[test]
    fn bitcode_rejects_non_prefix_mask() {
        let bits = array![[1u8, 1, 1]];
        assert!(BitCode::new(bits.clone(), array![[1u8, 0, 1]]).is_err());
        assert!(BitCode::new(bits, array![[1u8, 1, 0]]).is_ok());
    }

    #[test]
    fn backward_is_identity_on_rounding() {
        // for a linear downstream loss L = Σ c_j z_j the straight-through
        // gradient w.r.t. the logits is c_j m_{j,l} 2^{-l}
        let bits = array![[1.0, 0.0, 1.0]];
        let mask = array![[1.0, 1.0, 0.0]];
        let (gb, gm) = quantize_backward(&[2.0], bits.view(), mask.view());
        assert_eq!(gb, array![[1.0, 0.5, 0.0]]);
        assert_eq!(gm, array![[1.0, 0.0, 0.25]]);
    }
}
