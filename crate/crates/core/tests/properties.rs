//! Property tests for metrics, nearest-neighbor search, losses and fusion.

mod common;

use mvfa_autograd::{DType, Tensor};
use mvfa_core::eval::auc;
use mvfa_core::inference::{fuse, nearest_distances};
use mvfa_core::objective::{bce_image, dice_loss, focal_loss, LevelMask};
use proptest::prelude::*;

fn t64(shape: &[usize], v: Vec<f64>) -> Tensor {
    Tensor::new_in(shape, v, DType::F64).unwrap()
}

/// Scores drawn from a small grid so ties are common, with both classes.
fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=50)
        .prop_flat_map(|n| (prop::collection::vec(0u8..12, n), prop::collection::vec(0u8..2, n)))
        .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
        .prop_map(|(s, l)| (s.into_iter().map(|v| v as f64 / 4.0 - 1.0).collect(), l))
}

fn rows(max_rows: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
    (1..=max_rows)
        .prop_flat_map(move |n| prop::collection::vec(-1.0f64..1.0, n * d))
        .prop_filter("nonzero rows", move |v| v.chunks(d).all(|r| r.iter().any(|x| x.abs() > 1e-3)))
}

proptest! {
    #[test]
    fn auc_equals_pairwise_oracle((s, l) in scored()) {
        let a = auc(&s, &l).unwrap();
        prop_assert!((a - common::brute_auc(&s, &l)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn auc_ignores_monotone_transforms((s, l) in scored()) {
        let a = auc(&s, &l).unwrap();
        let affine: Vec<f64> = s.iter().map(|x| 3.0 * x + 7.0).collect();
        let exp: Vec<f64> = s.iter().map(|x| x.exp()).collect();
        let atan: Vec<f64> = s.iter().map(|x| x.atan()).collect();
        prop_assert_eq!(auc(&affine, &l).unwrap(), a);
        prop_assert_eq!(auc(&exp, &l).unwrap(), a);
        prop_assert_eq!(auc(&atan, &l).unwrap(), a);
    }

    #[test]
    fn auc_of_negated_scores((s, l) in scored()) {
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((1.0 - auc(&s, &l).unwrap() - auc(&neg, &l).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn auc_ignores_duplication((s, l) in scored()) {
        let s2: Vec<f64> = s.iter().chain(&s).copied().collect();
        let l2: Vec<u8> = l.iter().chain(&l).copied().collect();
        prop_assert!((auc(&s2, &l2).unwrap() - auc(&s, &l).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn nearest_neighbor_matches_double_loop(q in rows(6, 8), b in rows(6, 8)) {
        let store: Vec<f64> = b.chunks(8).flat_map(common::unit).collect();
        let got = nearest_distances(&t64(&[q.len() / 8, 8], q.clone()), &t64(&[b.len() / 8, 8], store)).unwrap();
        prop_assert_eq!(got, common::nn_oracle(&q, &b, 8));
    }

    #[test]
    fn more_bank_rows_never_increase_distance(q in rows(4, 8), b in rows(4, 8), extra in rows(3, 8)) {
        let unit_rows = |v: &[f64]| -> Vec<f64> { v.chunks(8).flat_map(common::unit).collect() };
        let small = unit_rows(&b);
        let mut big = small.clone();
        big.extend(unit_rows(&extra));
        let query = t64(&[q.len() / 8, 8], q);
        let d_small = nearest_distances(&query, &t64(&[small.len() / 8, 8], small)).unwrap();
        let d_big = nearest_distances(&query, &t64(&[big.len() / 8, 8], big)).unwrap();
        for (s, g) in d_small.iter().zip(&d_big) {
            prop_assert!(g <= s);
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(g));
        }
    }

    #[test]
    fn losses_are_nonnegative_and_order_free(
        p in prop::collection::vec(0.0f64..1.0, 12),
        s in prop::collection::vec(0u8..2, 12),
        shift in 0usize..12,
    ) {
        let sf: Vec<f64> = s.iter().map(|&v| v as f64).collect();
        let dice = dice_loss(&t64(&[3, 4], p.clone()), &t64(&[3, 4], sf.clone())).unwrap().item().unwrap();
        let focal = focal_loss(&t64(&[3, 4], p.clone()), &t64(&[3, 4], sf.clone())).unwrap().item().unwrap();
        prop_assert!(dice >= 0.0 && focal >= 0.0);
        let mut pr = p.clone();
        let mut sr = sf.clone();
        pr.rotate_left(shift);
        sr.rotate_left(shift);
        let dice_r = dice_loss(&t64(&[4, 3], pr.clone()), &t64(&[4, 3], sr.clone())).unwrap().item().unwrap();
        let focal_r = focal_loss(&t64(&[4, 3], pr), &t64(&[4, 3], sr)).unwrap().item().unwrap();
        prop_assert!((dice - dice_r).abs() <= 1e-12);
        prop_assert!((focal - focal_r).abs() <= 1e-12);
    }

    #[test]
    fn bce_is_nonnegative(p in 0.0f64..=1.0, c in 0u8..2) {
        let v = bce_image(&t64(&[1, 1], vec![p]), c).unwrap().item().unwrap();
        prop_assert!(v >= 0.0 && v.is_finite());
    }

    #[test]
    fn fusion_ranking_survives_beta_rescaling(
        zs in prop::collection::vec(0.0f64..1.0, 2..20),
        fs_seed in any::<u64>(),
        b1 in 0.0f64..2.0,
        b2 in 0.0f64..2.0,
        k in 0.1f64..10.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut gen = rand_chacha::ChaCha8Rng::seed_from_u64(fs_seed);
        let fs: Vec<f64> = zs.iter().map(|_| gen.random_range(0.0..2.0)).collect();
        let score = |a: f64, b: f64| -> Vec<f64> {
            zs.iter().zip(&fs).map(|(z, f)| fuse(*z, *f, &[], &[], a, b).unwrap().0).collect()
        };
        let base = score(b1, b2);
        let scaled = score(k * b1, k * b2);
        for i in 0..base.len() {
            for j in 0..base.len() {
                if (base[i] - base[j]).abs() > 1e-9 {
                    prop_assert_eq!(base[i] < base[j], scaled[i] < scaled[j]);
                }
            }
        }
    }

    #[test]
    fn level_masks_roundtrip_through_text(bits in 1u8..16) {
        let levels: Vec<usize> = (0..4).filter(|b| bits >> b & 1 == 1).map(|b| b + 1).collect();
        let mask = LevelMask::try_from(levels.clone()).unwrap();
        prop_assert_eq!(mask.levels(), levels);
        prop_assert_eq!(LevelMask::parse(&mask.to_string()).unwrap(), mask);
    }
}
