use deepfake_core::adversarial::{fgsm, AttackConfig};
use deepfake_core::backbones::blocks::{hard_distill_loss, scaled_dot_attention};
use deepfake_core::backbones::{Architecture, Backbone, LogisticConfig};
use deepfake_core::ensemble::{fuse_majority, fuse_weighted, FusionWeights};
use deepfake_core::evalsuite::{classification_metrics, confusion_matrix, mcnemar_from_counts};
use deepfake_core::imagecore::{augment, denormalize, normalize, AugmentConfig, Image, NormalizationStats};
use deepfake_core::wavelet::{dwt2_haar, idwt2_haar};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use proptest::prelude::*;

fn matrix(max_half: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_half, 1..=max_half).prop_flat_map(|(h, w)| {
        proptest::collection::vec(-100.0f64..100.0, 4 * h * w)
            .prop_map(move |v| Array2::from_shape_vec((2 * h, 2 * w), v).unwrap())
    })
}

fn image(min_side: usize, max_side: usize) -> impl Strategy<Value = Image> {
    (min_side..=max_side, min_side..=max_side).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0.0f64..=1.0, h * w * 3)
            .prop_map(move |v| Image::new("p", Array3::from_shape_vec((h, w, 3), v).unwrap()).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn haar_conserves_energy_and_reconstructs(x in matrix(12)) {
        let sb = dwt2_haar(x.view()).unwrap();
        let e = x.mapv(|v| v * v).sum();
        prop_assert!((sb.energy() - e).abs() <= 1e-8 * e.max(1e-300));
        let back = idwt2_haar(sb.a.view(), sb.h.view(), sb.v.view(), sb.d.view()).unwrap();
        for (a, b) in back.iter().zip(x.iter()) {
            prop_assert!((a - b).abs() <= 1e-10 * 100.0);
        }
    }

    #[test]
    fn haar_is_linear_in_scale(x in matrix(8), s in -10.0f64..10.0) {
        let sb = dwt2_haar(x.view()).unwrap();
        let scaled = dwt2_haar((&x * s).view()).unwrap();
        for (band, sband) in [(&sb.a, &scaled.a), (&sb.h, &scaled.h), (&sb.v, &scaled.v), (&sb.d, &scaled.d)] {
            for (p, q) in band.iter().zip(sband.iter()) {
                prop_assert!((p * s - q).abs() <= 1e-9 * (1.0 + q.abs()));
            }
        }
    }

    #[test]
    fn transposing_swaps_h_and_v(x in matrix(8)) {
        let sb = dwt2_haar(x.view()).unwrap();
        let st = dwt2_haar(x.t()).unwrap();
        prop_assert_eq!(&sb.h, &st.v.t());
        prop_assert_eq!(&sb.v, &st.h.t());
        let energy = |m: ndarray::ArrayView2<f64>| m.iter().map(|v| v * v).sum::<f64>();
        prop_assert_eq!(energy(sb.h.view()), energy(st.v.t()));
        prop_assert_eq!(energy(sb.v.view()), energy(st.h.t()));
    }

    #[test]
    fn identity_augment_is_pixel_exact(img in image(1, 10), seed in any::<u64>()) {
        // Identity only makes sense at the input size; non-square inputs resize.
        if img.height() == img.width() {
            let out = augment(&img, &AugmentConfig::identity(img.height()), seed).unwrap();
            prop_assert_eq!(out.pixels(), img.pixels());
        }
    }

    #[test]
    fn augment_output_is_square(img in image(8, 24), size in 1usize..20, seed in any::<u64>()) {
        let cfg = AugmentConfig { output_size: size, ..AugmentConfig::standard() };
        let out = augment(&img, &cfg, seed).unwrap();
        prop_assert_eq!(out.pixels().dim(), (size, size, 3));
        prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn normalize_round_trips(img in image(1, 10)) {
        let stats = NormalizationStats::imagenet();
        let back = denormalize(normalize(&img, &stats).unwrap().view(), &stats).unwrap();
        for (a, b) in back.iter().zip(img.pixels().iter()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn attention_rows_are_distributions(
        q in proptest::collection::vec(-3.0f64..3.0, 12),
        k in proptest::collection::vec(-3.0f64..3.0, 20),
    ) {
        let q = Array2::from_shape_vec((3, 4), q).unwrap();
        let k = Array2::from_shape_vec((5, 4), k).unwrap();
        let att = scaled_dot_attention(q.view(), k.view(), k.view(), 4.0).unwrap();
        for row in att.weights.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn distillation_loss_is_non_negative(
        student in proptest::collection::vec(-5.0f64..5.0, 2),
        teacher in proptest::collection::vec(-5.0f64..5.0, 2),
        label in 0usize..2,
    ) {
        let loss = hard_distill_loss(&student, &teacher, label).unwrap().value;
        prop_assert!(loss >= 0.0);
        let mut agreeing = vec![0.0, 0.0];
        agreeing[label] = 1.0;
        let plain = hard_distill_loss(&student, &agreeing, label).unwrap().value;
        let lse = (student[0].exp() + student[1].exp()).ln();
        prop_assert!((plain - (lse - student[label])).abs() <= 1e-12);
    }

    #[test]
    fn equal_fusion_is_the_mean(p in proptest::collection::vec(0.0f64..=1.0, 3)) {
        let fused = fuse_weighted(&p, &FusionWeights::equal(3)).unwrap();
        prop_assert!((fused - p.iter().sum::<f64>() / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn majority_agrees_when_votes_are_unanimous(p in proptest::collection::vec(0.0f64..=1.0, 3)) {
        let decisions: Vec<u8> = p.iter().map(|&x| u8::from(x >= 0.5)).collect();
        if decisions.iter().all(|&d| d == decisions[0]) {
            let fused = fuse_weighted(&p, &FusionWeights::equal(3)).unwrap();
            prop_assert_eq!(fuse_majority(&decisions).unwrap(), u8::from(fused >= 0.5));
        }
    }

    #[test]
    fn accuracy_matches_confusion(
        rows in proptest::collection::vec((0u8..2, 0.0f64..=1.0), 1..80),
        t in 0.0f64..=1.0,
    ) {
        let (labels, scores): (Vec<u8>, Vec<f64>) = rows.into_iter().unzip();
        let cm = confusion_matrix(&labels, &scores, t).unwrap();
        prop_assert_eq!(cm.tp + cm.tn + cm.fp + cm.fn_, labels.len());
        let m = classification_metrics(&labels, &scores, t).unwrap();
        prop_assert_eq!(m.accuracy, (cm.tp + cm.tn) as f64 / labels.len() as f64);
    }

    #[test]
    fn mcnemar_is_symmetric(n11 in 0u64..500, n10 in 0u64..500, n01 in 0u64..500, n00 in 0u64..500) {
        let a = mcnemar_from_counts(n11, n10, n01, n00, 0.05, 1).unwrap();
        let b = mcnemar_from_counts(n11, n01, n10, n00, 0.05, 1).unwrap();
        prop_assert_eq!(a.chi2, b.chi2);
        prop_assert_eq!(a.p_value, b.p_value);
        prop_assert!(a.chi2.is_finite());
    }

    #[test]
    fn fgsm_respects_budget_and_leaves_model_alone(
        x in proptest::collection::vec(-2.0f64..2.5, 4 * 2 * 2 * 3),
        y in proptest::collection::vec(0u8..2, 4),
        eps in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        let arch = Architecture::Logistic(LogisticConfig { height: 2, width: 2, channels: 3 });
        let model = Backbone::new("p", arch, seed).unwrap();
        let before = model.params.content_hash();
        let stats = NormalizationStats::imagenet();
        let cfg = AttackConfig::normalized(eps, &stats).unwrap();
        let x = ArrayD::from_shape_vec(IxDyn(&[4, 2, 2, 3]), x).unwrap();
        let adv = fgsm(&model, &x, &y, &cfg).unwrap();
        prop_assert_eq!(model.params.content_hash(), before);
        for ((idx, a), o) in adv.indexed_iter().zip(x.iter()) {
            let (lo, hi) = cfg.clamp_range[idx[3]];
            prop_assert!(*a >= lo && *a <= hi);
            // Clamping can only shrink the step.
            prop_assert!((a - o.clamp(lo, hi)).abs() <= eps + 1e-12);
        }
    }
}
