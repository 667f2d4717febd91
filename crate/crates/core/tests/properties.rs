mod common;

use candle_core::{Device, Tensor};
use cgpn::evaluation::{cmc_map, EvalProtocol, Meta};
use cgpn::losses::{batch_hard_triplet, mse_supervision, softmax_loss, MseConfig, Reduction, TripletBatchSpec};
use cgpn::partition::{enumerate_windows, pool_window, Fraction, FeatureMap};
use common::oracles;
use ndarray::Array2;
use proptest::prelude::*;

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn matrix(rows: &[Vec<f64>]) -> Tensor {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (rows.len(), rows[0].len()), &Device::Cpu).unwrap()
}

/// P = 2 identities of K = 3 images each, 4-d features.
fn pk_batch() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 6)
}

const LABELS: [u32; 6] = [0, 0, 0, 1, 1, 1];
const SPEC: TripletBatchSpec = TripletBatchSpec { p: 2, k: 3, margin: 1.2 };

fn triplet(rows: &[Vec<f64>], labels: &[u32]) -> f64 {
    scalar(&batch_hard_triplet(&matrix(rows), labels, &SPEC, Reduction::Sum).unwrap())
}

proptest! {
    #[test]
    fn windows_match_exhaustive_scan(n in 1usize..=12) {
        let got: Vec<(usize, usize)> = enumerate_windows(n, Fraction::HALF)
            .unwrap()
            .iter()
            .map(|w| (w.start, w.length))
            .collect();
        prop_assert_eq!(got, oracles::windows_exhaustive(n));
    }

    #[test]
    fn pooling_ignores_spatial_order(values in prop::collection::vec(-5.0f64..5.0, 2 * 6 * 2), rot in 0usize..12) {
        let t = Tensor::from_vec(values.clone(), (2, 6, 2), &Device::Cpu).unwrap();
        let mut shuffled = Vec::with_capacity(values.len());
        for ch in values.chunks(12) {
            let mut c = ch.to_vec();
            c.rotate_left(rot);
            shuffled.extend(c);
        }
        let u = Tensor::from_vec(shuffled, (2, 6, 2), &Device::Cpu).unwrap();
        let a: Vec<f64> = pool_window(&FeatureMap::new(t).unwrap()).unwrap().to_vec1().unwrap();
        let b: Vec<f64> = pool_window(&FeatureMap::new(u).unwrap()).unwrap().to_vec1().unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pooling_is_monotone(values in prop::collection::vec(-5.0f64..5.0, 3 * 4 * 2), at in 0usize..24, bump in 0.0f64..3.0) {
        let t = Tensor::from_vec(values.clone(), (3, 4, 2), &Device::Cpu).unwrap();
        let mut raised = values;
        raised[at] += bump;
        let u = Tensor::from_vec(raised, (3, 4, 2), &Device::Cpu).unwrap();
        let a: Vec<f64> = pool_window(&FeatureMap::new(t).unwrap()).unwrap().to_vec1().unwrap();
        let b: Vec<f64> = pool_window(&FeatureMap::new(u).unwrap()).unwrap().to_vec1().unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(y >= x);
        }
    }

    #[test]
    fn triplet_matches_oracle_and_is_nonnegative(rows in pk_batch()) {
        let v = triplet(&rows, &LABELS);
        let labels: Vec<usize> = LABELS.iter().map(|&l| l as usize).collect();
        prop_assert!(v >= 0.0);
        prop_assert!((v - oracles::batch_hard(&rows, &labels, 1.2)).abs() < 1e-9);
    }

    #[test]
    fn triplet_invariant_within_group_permutation(rows in pk_batch(), swap in 0usize..3) {
        let mut permuted = rows.clone();
        permuted.swap(0, swap);
        permuted.swap(3, 3 + (2 - swap));
        prop_assert!((triplet(&rows, &LABELS) - triplet(&permuted, &LABELS)).abs() < 1e-9);
    }

    #[test]
    fn triplet_invariant_under_relabeling(rows in pk_batch()) {
        let relabeled = [7, 7, 7, 2, 2, 2];
        prop_assert!((triplet(&rows, &LABELS) - triplet(&rows, &relabeled)).abs() < 1e-12);
    }

    #[test]
    fn triplet_invariant_under_translation(rows in pk_batch(), shift in prop::collection::vec(-10.0f64..10.0, 4)) {
        let moved: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect())
            .collect();
        prop_assert!((triplet(&rows, &LABELS) - triplet(&moved, &LABELS)).abs() < 1e-8);
    }

    #[test]
    fn softmax_nonnegative_and_oracle(rows in prop::collection::vec(prop::collection::vec(-20.0f64..20.0, 5), 1..6), seed in 0u32..5) {
        let labels: Vec<u32> = (0..rows.len() as u32).map(|i| (i + seed) % 5).collect();
        let v = scalar(&softmax_loss(&matrix(&rows), &labels, Reduction::Sum).unwrap());
        let usize_labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        prop_assert!(v >= 0.0);
        let o = oracles::softmax_nll(&rows, &usize_labels);
        prop_assert!((v - o).abs() <= 1e-10 * o.abs().max(1.0));
    }

    #[test]
    fn mse_nonnegative_and_zero_only_at_targets(vals in prop::collection::vec(-2.0f64..2.0, 3 * 2 * 4), equal in any::<bool>()) {
        let t = |o: usize| Tensor::from_vec(vals[o * 4..o * 4 + 4].to_vec(), (1, 4), &Device::Cpu).unwrap();
        let globals: Vec<Vec<Tensor>> = (0..3).map(|b| vec![t(2 * b), t(2 * b + 1)]).collect();
        let targets: Vec<Vec<Tensor>> = if equal {
            globals.clone()
        } else {
            (0..3).map(|b| vec![t(2 * b + 1), t(2 * b)]).collect()
        };
        let v = scalar(&mse_supervision(&globals, &targets, &MseConfig::default(), Reduction::Sum).unwrap());
        prop_assert!(v >= 0.0);
        if equal {
            prop_assert_eq!(v, 0.0);
        }
    }
}

fn ranking_case() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Meta>, Vec<Meta>)> {
    (1usize..8, 1usize..12).prop_flat_map(|(nq, ng)| {
        let meta = || (1i64..4, 1u32..3).prop_map(|(p, c)| Meta { person_id: p, camera_id: c });
        (
            prop::collection::vec(prop::collection::vec(0.0f64..10.0, ng), nq),
            prop::collection::vec(meta(), nq),
            prop::collection::vec(meta(), ng),
        )
    })
}

fn to_array(d: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((d.len(), d[0].len()), |(i, j)| d[i][j])
}

proptest! {
    #[test]
    fn monotone_distance_transform_keeps_ranking((d, q, g) in ranking_case()) {
        let p = EvalProtocol::default();
        let a = cmc_map(&to_array(&d), &q, &g, &p).unwrap();
        let squashed = to_array(&d).mapv(|x| (x * 0.3).exp() + x.powi(3));
        let b = cmc_map(&squashed, &q, &g, &p).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn cmc_is_a_cumulative_curve((d, q, g) in ranking_case()) {
        let r = cmc_map(&to_array(&d), &q, &g, &EvalProtocol::default()).unwrap();
        prop_assert!(r.cmc.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(r.cmc.iter().all(|c| (0.0..=1.0).contains(c)));
        prop_assert!((0.0..=1.0).contains(&r.map));
        if !r.queries.is_empty() {
            prop_assert_eq!(*r.cmc.last().unwrap(), 1.0);
        }
        prop_assert_eq!(r.queries.len() + r.skipped.len(), q.len());
    }

    #[test]
    fn perfect_map_iff_relevants_first((d, q, g) in ranking_case()) {
        let p = EvalProtocol::default();
        let r = cmc_map(&to_array(&d), &q, &g, &p).unwrap();
        let all_first = r.queries.iter().all(|qr| {
            let qm = q[qr.query];
            let flags: Vec<bool> = qr.ranking.iter().map(|&j| g[j].person_id == qm.person_id).collect();
            flags.windows(2).all(|w| w[0] || !w[1])
        });
        prop_assert_eq!(r.map == 1.0, all_first && !r.queries.is_empty());
    }
}
