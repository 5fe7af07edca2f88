use std::collections::BTreeSet;
use std::path::Path;

use forgetir_core::degrade::{adversarial_from_perturbation, apply_degradation, make_adversarial_target};
use forgetir_core::persist::{corpus_from_bytes, corpus_to_bytes};
use forgetir_core::{partition, psnr, ssim, DegradationKind, DegradationSpec, DegradedPair, Tensor};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = DegradationKind> {
    prop_oneof![
        Just(DegradationKind::Haze),
        Just(DegradationKind::Rain),
        Just(DegradationKind::Noise)
    ]
}

fn image(h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(0.0..=1.0f64, 3 * h * w).prop_map(move |v| Tensor::new(&[3, h, w], v).unwrap())
}

fn tiny_pair(kind: DegradationKind, index: usize) -> DegradedPair {
    let t = Tensor::full(&[3, 1, 1], index as f64 / 1000.0).unwrap();
    DegradedPair {
        degraded: t.clone(),
        clean: t,
        kind,
        index,
    }
}

fn flip_h(img: &Tensor) -> Tensor {
    let [c, h, w] = *img.shape() else { unreachable!() };
    let mut out = img.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.values_mut()[(ch * h + y) * w + x] = img.values()[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn partition_is_exact(kinds in proptest::collection::vec(kind(), 2..60), forget in kind()) {
        let corpus: Vec<DegradedPair> = kinds.iter().enumerate().map(|(i, &k)| tiny_pair(k, i)).collect();
        let present: BTreeSet<_> = kinds.iter().copied().collect();
        match partition(&corpus, forget) {
            Ok(p) => {
                let f: BTreeSet<usize> = p.forget().iter().map(|x| x.index).collect();
                let r: BTreeSet<usize> = p.retain().iter().map(|x| x.index).collect();
                prop_assert!(f.is_disjoint(&r));
                prop_assert_eq!(f.len() + r.len(), corpus.len());
                prop_assert!(p.forget().iter().all(|x| x.kind == forget));
                prop_assert!(p.retain().iter().all(|x| x.kind != forget));
            }
            Err(_) => prop_assert!(!present.contains(&forget) || present.len() == 1),
        }
    }

    #[test]
    fn adversarial_targets_stay_in_unit_range(clean in image(4, 5), seed in any::<u64>()) {
        let adv = make_adversarial_target(&clean, seed).unwrap();
        prop_assert!(adv.in_unit_range());
        for (a, c) in adv.values().iter().zip(clean.values()) {
            prop_assert!((a - c).abs() <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn explicit_perturbations_clamp(clean in image(2, 2), p in proptest::collection::vec(-0.5..=0.5f64, 12)) {
        let adv = adversarial_from_perturbation(&clean, &p).unwrap();
        for ((a, c), d) in adv.values().iter().zip(clean.values()).zip(&p) {
            prop_assert_eq!(*a, (c + d).clamp(0.0, 1.0));
        }
    }

    #[test]
    fn degradations_stay_in_unit_range(clean in image(16, 16), seed in any::<u64>(), k in kind()) {
        let spec = match k {
            DegradationKind::Noise => DegradationSpec::noise(50.0 / 255.0, seed),
            DegradationKind::Haze => DegradationSpec::haze(2.0, 0.9, seed),
            DegradationKind::Rain => DegradationSpec::rain(0.2, 7, seed),
        };
        let pair = apply_degradation(&clean, &spec).unwrap();
        prop_assert!(pair.degraded.in_unit_range());
        prop_assert_eq!(pair.degraded.shape(), clean.shape());
    }

    #[test]
    fn ssim_is_symmetric_bounded_and_flip_invariant(a in image(12, 13), b in image(12, 13)) {
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(s > -1.0 && s <= 1.0 + 1e-12);
        prop_assert!((s - ssim(&flip_h(&a), &flip_h(&b)).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn psnr_is_symmetric_and_flip_invariant(a in image(4, 4), b in image(4, 4)) {
        let p = psnr(&a, &b).unwrap();
        prop_assert_eq!(p, psnr(&b, &a).unwrap());
        prop_assert!(p >= 0.0 && p <= 120.0);
        prop_assert!((p - psnr(&flip_h(&a), &flip_h(&b)).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn stack_unstack_round_trip(imgs in proptest::collection::vec(image(2, 3), 1..5)) {
        let refs: Vec<&Tensor> = imgs.iter().collect();
        prop_assert_eq!(Tensor::stack(&refs).unwrap().unstack(), imgs);
    }

    #[test]
    fn corpus_bytes_round_trip(kinds in proptest::collection::vec(kind(), 0..10)) {
        let pairs: Vec<DegradedPair> = kinds.iter().enumerate().map(|(i, &k)| tiny_pair(k, i)).collect();
        let back = corpus_from_bytes(&corpus_to_bytes(&pairs), Path::new("p")).unwrap();
        prop_assert_eq!(back, pairs);
    }
}
