mod common;

use std::collections::BTreeSet;

use common::{eval_block, max_abs_diff, random_expanded_block, uniform};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssre::data::IncrementalSplit;
use ssre::metrics::avg_forgetting;
use ssre::protomem::{partition, PrototypeStore};
use ssre::reparam::AdapterKind;
use ssre::Tensor;

fn kind() -> impl Strategy<Value = AdapterKind> {
    prop::sample::select(AdapterKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fusion_preserves_block_output(
        seed in any::<u64>(), kind in kind(), stride in 1usize..3, main_bn in any::<bool>(),
        in_ch in 1usize..4, out_ch in 1usize..4, side in 3usize..8,
    ) {
        let expanded = random_expanded_block::<f64>(seed, kind, stride, main_bn, in_ch, out_ch);
        let mut fused = expanded.clone();
        fused.fuse().unwrap();
        prop_assert!(!fused.is_expanded() && fused.main_bn.is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let x = uniform::<f64>(&[2, in_ch, side, side], -1.0, 1.0, &mut rng);
        let d = max_abs_diff(&eval_block(&expanded, &x), &eval_block(&fused, &x));
        prop_assert!(d <= 1e-10, "deviation {d}");
    }

    #[test]
    fn partition_is_exact(scores in prop::collection::vec(-1.0f64..=1.0, 0..40), sigma in -1.0f64..=1.0) {
        let m = partition(&scores, sigma);
        for (i, &s) in scores.iter().enumerate() {
            prop_assert!(m.ce[i] ^ m.kd[i]);
            prop_assert_eq!(m.kd[i], s > sigma);
        }
        prop_assert_eq!(m.kd_count() + m.ce_count(), scores.len());
        let all_ce = partition(&scores, 1.0);
        prop_assert_eq!(all_ce.kd_count(), 0);
    }

    #[test]
    fn cosine_scores_ignore_feature_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = PrototypeStore::<f64>::new(5);
        for c in 0..3 {
            store.insert(c, uniform::<f64>(&[5], -1.0, 1.0, &mut rng).into_data(), 0).unwrap();
        }
        let r = uniform::<f64>(&[4, 5], -1.0, 1.0, &mut rng);
        let scaled = Tensor::new(&[4, 5], r.data().iter().map(|v| v * scale).collect()).unwrap();
        let a = store.cosine_scores(&r).unwrap();
        let b = store.cosine_scores(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((-1.0..=1.0).contains(x));
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn split_phases_are_disjoint_and_complete(
        base in 1usize..6, inc in 1usize..5, per in 1usize..4, seed in any::<u64>(),
    ) {
        let n = base + inc * per;
        let split = IncrementalSplit::build(n, base, inc, seed).unwrap();
        prop_assert_eq!(split.num_phases(), inc + 1);
        let mut seen = BTreeSet::new();
        for phase in &split.phases {
            for &c in phase {
                prop_assert!(seen.insert(c), "class {} in two phases", c);
            }
        }
        prop_assert_eq!(seen, (0..n).collect::<BTreeSet<_>>());
        prop_assert_eq!(IncrementalSplit::build(n, base, inc, seed).unwrap(), split);
    }

    #[test]
    fn forgetting_is_nonnegative_and_zero_without_drops(
        seed in any::<u64>(), n in 2usize..7,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let acc: Vec<Vec<f64>> = (0..n).map(|k| (0..=k).map(|_| rng.random::<f64>()).collect()).collect();
        prop_assert!(avg_forgetting(&acc).unwrap() >= 0.0);
        // Non-decreasing columns never forget.
        let mono: Vec<Vec<f64>> = (0..n).map(|k| (0..=k).map(|j| 0.1 + 0.1 * (k - j) as f64).collect()).collect();
        prop_assert_eq!(avg_forgetting(&mono).unwrap(), 0.0);
    }
}

#[test]
fn oversampling_is_uniform() {
    let mut store = PrototypeStore::<f64>::new(2);
    for c in 0..4 {
        store.insert(c, vec![c as f64, 1.0], 0).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (batch, labels) = store.oversample(4000, &mut rng).unwrap();
    for c in 0..4 {
        let count = labels.iter().filter(|&&l| l == c).count();
        assert!((950..=1050).contains(&count), "class {c}: {count}");
    }
    for (i, &l) in labels.iter().enumerate() {
        assert_eq!(batch.row(i), store.get(l).unwrap().centroid.as_slice());
    }
}

#[test]
fn prototypes_are_class_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = 60;
    let features = uniform::<f64>(&[m, 6], -2.0, 3.0, &mut rng);
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
    let mut store = PrototypeStore::new(6);
    store.compute(&features, &labels, &[0, 1, 2], 0).unwrap();
    for c in 0..3 {
        let rows: Vec<&[f64]> = (0..m).filter(|&i| labels[i] == c).map(|i| features.row(i)).collect();
        for d in 0..6 {
            let mean = rows.iter().map(|r| r[d]).sum::<f64>() / rows.len() as f64;
            assert!((store.get(c).unwrap().centroid[d] - mean).abs() < 1e-12);
        }
    }
}
