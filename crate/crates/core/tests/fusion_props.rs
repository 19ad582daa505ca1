//! Property tests for harmony weights and logit fusion.

use std::collections::BTreeMap;

use proptest::prelude::*;
use unibridge_core::fusion::{fuse_logits, harmony_weights, HiddenStateSet, Pooling};

fn states(lang: &str, k: usize, dim: usize, values: &[f32]) -> HiddenStateSet {
    HiddenStateSet::new(lang, Pooling::Mean, k, dim, values.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(250))]

    #[test]
    fn weights_form_a_probability_vector(
        k in 1usize..5,
        dim in 1usize..6,
        n_sources in 1usize..6,
        raw in proptest::collection::vec(-5.0f32..5.0, 150),
    ) {
        let need = (n_sources + 1) * k * dim;
        prop_assume!(raw.len() >= need);
        let target = states("tt", k, dim, &raw[..k * dim]);
        let sources: Vec<HiddenStateSet> = (0..n_sources)
            .map(|i| {
                let off = (i + 1) * k * dim;
                states(&format!("s{i}"), k, dim, &raw[off..off + k * dim])
            })
            .collect();
        let hw = harmony_weights(&target, &sources).unwrap();
        let sum: f64 = hw.weights.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(hw.weights.iter().all(|&w| w > 0.0));
        prop_assert!(hw.distances.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn fused_logits_stay_in_the_envelope_and_commute_with_shifts(
        weights_raw in proptest::collection::vec(0.05f64..1.0, 2..5),
        logits_raw in proptest::collection::vec(-4.0f64..4.0, 40),
        shift in -3.0f64..3.0,
    ) {
        let n = weights_raw.len();
        let len = 40 / n;
        let total: f64 = weights_raw.iter().sum();
        let hw = unibridge_core::HarmonyWeights {
            sources: (0..n).map(|i| format!("s{i}")).collect(),
            raw_l2: vec![1.0; n],
            distances: weights_raw.iter().map(|w| w / total).collect(),
            weights: weights_raw.iter().map(|w| w / total).collect(),
        };
        let mut map = BTreeMap::new();
        for (i, chunk) in logits_raw.chunks(len).take(n).enumerate() {
            map.insert(format!("s{i}"), chunk.to_vec());
        }
        let fused = fuse_logits(&hw, &map).unwrap();

        // convex combination: element-wise min/max envelope
        for (pos, value) in fused.iter().enumerate() {
            let column: Vec<f64> = map.values().map(|v| v[pos]).collect();
            let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*value >= lo - 1e-9 && *value <= hi + 1e-9);
        }

        // adding a constant vector to every source shifts the fusion by it
        let shifted: BTreeMap<String, Vec<f64>> = map
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|x| x + shift).collect()))
            .collect();
        let fused_shifted = fuse_logits(&hw, &shifted).unwrap();
        for (a, b) in fused.iter().zip(&fused_shifted) {
            prop_assert!((a + shift - b).abs() < 1e-9);
        }
    }
}
