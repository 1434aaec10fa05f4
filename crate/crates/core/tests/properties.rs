use ndarray::Array2;
use proptest::prelude::*;

use sofair_core::info::{self, FiniteJoint, StochasticEncoder};
use sofair_core::quantizer::{
    allocation, binary_expand, bit_allocation, bit_weight, new_bits, quantize, refine, refinement_delta, BitCode,
};
use sofair_core::rng::substream;

fn code_inputs() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..6, 1usize..10).prop_flat_map(|(d, a)| {
        (
            Just(d),
            Just(a),
            prop::collection::vec(0.0f64..4.0, d),
            prop::collection::vec(0.0f64..=1.0, d * a),
        )
    })
}

proptest! {
    #[test]
    fn coarser_code_is_a_prefix_of_finer((d, a, h, logits) in code_inputs(), b1 in 0.0f64..=1.0, b2 in 0.0f64..=1.0) {
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let logits = Array2::from_shape_vec((d, a), logits).unwrap();
        let fine_alloc = bit_allocation(&h, lo, a).unwrap();
        let coarse = quantize(logits.view(), &bit_allocation(&h, hi, a).unwrap()).unwrap();
        let fine = quantize(logits.view(), &fine_alloc).unwrap();
        for j in 0..d {
            let (c, f) = (coarse.visible(j), fine.visible(j));
            prop_assert!(c.len() <= f.len());
            prop_assert_eq!(&f[..c.len()], &c[..]);
        }
        prop_assert_eq!(refine(&coarse, &fine_alloc).unwrap(), fine.clone());
        let delta = refinement_delta(&coarse, &fine).unwrap();
        for ((vc, vf), dj) in coarse.values().iter().zip(fine.values()).zip(delta) {
            prop_assert_eq!(vc + dj, vf);
        }
        let revealed: usize = new_bits(&coarse, &fine).unwrap().len();
        let grown: usize = fine.active_counts().iter().zip(coarse.active_counts()).map(|(f, c)| f - c).sum();
        prop_assert_eq!(revealed, grown);
    }

    #[test]
    fn allocation_is_non_increasing_in_beta(h in 0.0f64..10.0, b1 in 0.0f64..=1.0, b2 in 0.0f64..=1.0, a in 1usize..16) {
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        prop_assert!(allocation(h, hi, a) <= allocation(h, lo, a));
        prop_assert!((0.0..=a as f64).contains(&allocation(h, hi, a)));
        prop_assert_eq!(allocation(h, 0.0, a), a as f64);
    }

    #[test]
    fn expansion_is_within_half_a_step(e in 0.0f64..1.0, a in 1usize..20) {
        let bits = binary_expand(e, a).unwrap();
        let v: f64 = bits.iter().enumerate().filter(|(_, &b)| b == 1).map(|(l, _)| bit_weight(l + 1)).sum();
        prop_assert!((v - e).abs() <= bit_weight(a + 1) + 1e-15 || v == 1.0 - bit_weight(a));
    }

    #[test]
    fn packing_round_trips((d, a, h, logits) in code_inputs(), beta in 0.0f64..=1.0) {
        let logits = Array2::from_shape_vec((d, a), logits).unwrap();
        let code = quantize(logits.view(), &bit_allocation(&h, beta, a).unwrap()).unwrap();
        let back = BitCode::unpack(&code.pack_bits(), &code.mask_counts(), a).unwrap();
        prop_assert_eq!(back, code);
    }

    #[test]
    fn information_inequalities_hold(seed in any::<u64>(), nx in 1usize..=16, ns in 1usize..=8, nz in 1usize..=16) {
        let mut rng = substream(seed, "prop-info");
        let joint = FiniteJoint::random(nx, ns, &mut rng).unwrap();
        let enc = StochasticEncoder::random(nx, nz, &mut rng).unwrap();
        let r = info::analyze(&joint, &enc).unwrap();
        let tol = 1e-9;
        prop_assert!(r.residual() <= tol);
        prop_assert!(r.unfairness >= 0.0 && r.rate >= 0.0 && r.distortion >= 0.0);
        // data processing through X
        prop_assert!(r.unfairness <= joint.i_xs() + tol);
        prop_assert!(r.rate <= joint.h_x() + tol);
        prop_assert!(r.distortion <= joint.h_x_given_s() + tol);
        prop_assert!(r.unfairness <= joint.h_s() + tol);
    }
}

#[test]
fn identity_encoder_has_zero_distortion() {
    let mut rng = substream(9, "identity-enc");
    let joint = FiniteJoint::random(7, 3, &mut rng).unwrap();
    let r = info::analyze(&joint, &StochasticEncoder::identity(7).unwrap()).unwrap();
    assert!(r.distortion.abs() < 1e-12);
    assert!((r.unfairness - joint.i_xs()).abs() < 1e-12);
    assert!((r.rate - joint.h_x()).abs() < 1e-12);
}
