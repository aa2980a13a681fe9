//! Property tests for the spec-level invariants that hold over whole input
//! domains rather than single examples.

use lucid_core::degrade::{self, DegradationKind, DegradationLevel};
use lucid_core::encoder::info_nce_loss;
use lucid_core::enhancer::ReprSource;
use lucid_core::imaging::{crop_patches, patch_count, resize_bicubic, ImageTensor};
use lucid_core::nn::ParamSet;
use lucid_core::propagation::PropagationState;
use lucid_core::tensor::Tensor;
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crop_count_matches_formula(
        h in 8usize..80,
        w in 8usize..80,
        size in 8usize..40,
        stride in 1usize..20,
    ) {
        prop_assume!(size <= h.min(w));
        let img = ImageTensor::constant(h, w, 0.5).unwrap();
        let patches = crop_patches(&img, size, stride).unwrap();
        prop_assert_eq!(patches.len(), patch_count(h, w, size, stride));
        prop_assert_eq!(patches.len(), ((h - size) / stride + 1) * ((w - size) / stride + 1));
    }

    #[test]
    fn resize_preserves_constants(v in 0.0f64..1.0, h in 8usize..48, w in 8usize..48, num in 1usize..4, den in 1usize..4) {
        let scale = num as f64 / den as f64;
        let oh = (h as f64 * scale).round() as usize;
        let ow = (w as f64 * scale).round() as usize;
        prop_assume!(oh >= 8 && ow >= 8);
        let img = ImageTensor::constant(h, w, v).unwrap();
        let out = resize_bicubic(&img, scale).unwrap();
        for &p in out.data().iter() {
            prop_assert!((p - v).abs() < 1e-9);
        }
    }

    #[test]
    fn degradations_stay_in_unit_range_and_replay(
        kind_idx in 0usize..5,
        level_idx in 0usize..4,
        seed in 0u64..1000,
    ) {
        let kind = DegradationKind::ALL[kind_idx];
        let level = DegradationLevel::ALL[level_idx];
        let img = lucid_core::fixtures::synth_image(24, 24, seed);
        let params = degrade::sample_parameters(kind, level, 24, 24, 1, seed);
        let a = degrade::apply(&img, &params, seed).unwrap();
        let b = degrade::apply(&img, &params, seed).unwrap();
        prop_assert_eq!(a.data(), b.data());
        for &v in a.data().iter() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn info_nce_is_invariant_to_negative_order(
        qx in -1.0f64..1.0,
        perm_seed in 0u64..100,
    ) {
        let qn = (qx * qx + 0.25).sqrt();
        let q = Tensor::constant(ndarray::arr2(&[[qx / qn, 0.5 / qn]]).into_dyn());
        let mut negs: Vec<[f64; 2]> = (0..5)
            .map(|i| {
                let a = i as f64 * 1.1 + 0.3;
                [a.cos(), a.sin()]
            })
            .collect();
        let base = Array2::from_shape_fn((5, 2), |(i, j)| negs[i][j]);
        let l1 = info_nce_loss(&q, &q, &base, 0.3).unwrap().scalar();
        // rotate the negative list
        let k = (perm_seed % 5) as usize;
        negs.rotate_left(k);
        let rotated = Array2::from_shape_fn((5, 2), |(i, j)| negs[i][j]);
        let l2 = info_nce_loss(&q, &q, &rotated, 0.3).unwrap().scalar();
        prop_assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn momentum_update_lands_strictly_between(m in 0.01f64..0.99) {
        let mut q = ParamSet::new("q");
        q.add("w", ndarray::arr1(&[1.0, -2.0, 0.5]).into_dyn());
        let mut k = ParamSet::new("k");
        k.add("w", ndarray::arr1(&[0.0, 0.0, 0.0]).into_dyn());
        k.momentum_update_from(&q, m).unwrap();
        let kid = k.var_ids().next().unwrap();
        let qid = q.var_ids().next().unwrap();
        for (i, (&kv, &qv)) in k.value(kid).iter().zip(q.value(qid).iter()).enumerate() {
            let lo = 0.0f64.min(qv);
            let hi = 0.0f64.max(qv);
            prop_assert!(kv > lo && kv < hi, "index {i}: {kv} not strictly between 0 and {qv}");
        }
    }

    #[test]
    fn propagation_state_never_exceeds_capacity(
        capacity in 1usize..12,
        updates in 1usize..40,
    ) {
        let mut state = PropagationState::new(capacity);
        for i in 0..updates {
            let source = if i % 3 == 0 { ReprSource::Dam } else { ReprSource::Drpm };
            state.update(i, Array1::zeros(4), source).unwrap();
            prop_assert!(state.len() <= capacity);
        }
        prop_assert_eq!(state.len(), updates.min(capacity));
    }

    #[test]
    fn blur_never_leaves_unit_range(len in 1.0f64..15.0, angle in 0.0f64..3.14) {
        let img = lucid_core::fixtures::synth_image(16, 16, 1);
        let k = degrade::line_kernel(len, angle);
        let out = degrade::degrade_blur(&img, &k).unwrap();
        for &v in out.data().iter() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn smoke_composition_is_convex(t_mean in 0.1f64..1.0, a in 0.0f64..1.0) {
        let img = lucid_core::fixtures::synth_image(16, 16, 2);
        let t = Array2::from_elem((16, 16), t_mean);
        let out = degrade::degrade_smoke(&img, &t, degrade::Airlight::Scalar(a)).unwrap();
        for ((&o, &j), _) in out.data().iter().zip(img.data().iter()).zip(0..) {
            let lo = j.min(a) - 1e-12;
            let hi = j.max(a) + 1e-12;
            prop_assert!(o >= lo && o <= hi);
        }
    }
}

#[test]
fn image_tensor_rejects_garbage() {
    assert!(ImageTensor::new(Array3::from_elem((8, 8, 3), -0.1)).is_err());
    assert!(ImageTensor::new(Array3::from_elem((8, 8, 3), f64::INFINITY)).is_err());
    assert!(ImageTensor::new(Array3::from_elem((4, 8, 3), 0.5)).is_err());
}
