// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use proptest::prelude::*;
use sublab_core::analysis::{
    covariance_similarity, eigen_angles, overlap_test, ridge_fit, structure_report,
    ActivationTrace, TraceProvenance,
};
use sublab_core::bigram::count_bigrams;
use sublab_core::corpus::BOS;
use sublab_core::eval::{pearson_r, select_subnetwork, SweepPoint};
use sublab_core::mask::{random_matched_mask, MaskProvenance};
use sublab_core::model::surprisals;
use sublab_core::{BinaryMask, Checkpoint, ModelConfig, ParamSet, TokenStream};

fn stream(ids: Vec<u32>) -> TokenStream {
    TokenStream {
        ids,
        sources: vec![],
        vocab_hash: String::new(),
    }
}

fn tiny(vocab: usize, seed: u64) -> ParamSet<f32> {
    ParamSet::init(&ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_mlp: 16,
        vocab_size: vocab,
        max_seq_len: 8,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..200).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
        )
    })
}

fn varies(s: &[f64]) -> bool {
    s.iter().any(|&x| (x - s[0]).abs() > 1e-3)
}

fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
    let p = tiny(7, 0);
    let total: usize = p.maskable_indices().iter().map(|&k| p.tensors[k].len()).sum();
    prop::collection::vec(prop::bool::weighted(0.3), total).prop_map(move |flat| {
        let mut m = BinaryMask::constant(&p, false, MaskProvenance::manual("p"));
        let mut it = flat.into_iter();
        for bits in &mut m.bits {
            for b in bits.iter_mut() {
                *b = it.next().unwrap();
            }
        }
        m
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pearson_symmetric_and_affine_invariant(
        (x, y) in series(),
        a in 0.1f64..5.0,
        b in -5.0f64..5.0,
    ) {
        prop_assume!(varies(&x) && varies(&y));
        let r = pearson_r(&x, &y).unwrap();
        prop_assert!((r - pearson_r(&y, &x).unwrap()).abs() < 1e-12);
        let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((r - pearson_r(&xs, &y).unwrap()).abs() < 1e-9);
        let neg: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
        prop_assert!((r + pearson_r(&neg, &y).unwrap()).abs() < 1e-9);
        prop_assert!(r.abs() <= 1.0);
    }

    #[test]
    fn selection_ignores_order(
        rs in prop::collection::vec((0u32..4, 0u64..1000, 0.5f64..1.0), 1..8),
        rot in 0usize..8,
    ) {
        let mut runs: Vec<SweepPoint> = rs
            .iter()
            .map(|&(l, a, r)| SweepPoint { lambda: [0.0, 1.0, 10.0, 100.0][l as usize], active: a, r })
            .collect();
        runs[0].lambda = 0.0;
        let chosen = runs[select_subnetwork(&runs).unwrap()].clone();
        let k = rot % runs.len();
        runs.rotate_left(k);
        runs.reverse();
        prop_assert_eq!(&runs[select_subnetwork(&runs).unwrap()], &chosen);
    }

    #[test]
    fn bigram_counts_match_recount(
        ids in prop::collection::vec(0u32..12, 2..400),
        extra in prop::collection::vec(0u32..12, 1..50),
    ) {
        let s = stream(ids.clone());
        prop_assume!(ids.windows(2).any(|w| w[1] != BOS));
        let t = count_bigrams(&s, 12, 0.0).unwrap();
        let mut naive: HashMap<(u32, u32), u64> = HashMap::new();
        for w in ids.windows(2) {
            if w[1] != BOS {
                *naive.entry((w[0], w[1])).or_default() += 1;
            }
        }
        for a in 0..12 {
            for b in 0..12 {
                prop_assert_eq!(t.count(a, b), naive.get(&(a, b)).copied().unwrap_or(0));
            }
            let d = t.dist(a).unwrap();
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let mut longer = ids.clone();
        longer.extend(extra);
        let t2 = count_bigrams(&stream(longer), 12, 0.0).unwrap();
        for a in 0..12 {
            for b in 0..12 {
                prop_assert!(t2.count(a, b) >= t.count(a, b));
            }
        }
    }

    #[test]
    fn eigen_angles_close_under_conjugation(
        d in 1usize..7,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let angles = eigen_angles(&m, d).unwrap();
        prop_assert_eq!(angles.len(), d);
        prop_assert!(angles.iter().all(|a| (0.0..=180.0).contains(a)));
        // Complex eigenvalues of a real matrix come in conjugate pairs, which
        // share the same |angle|.
        let mut complex: Vec<f64> = angles
            .iter()
            .copied()
            .filter(|a| *a > 1e-6 && *a < 180.0 - 1e-6)
            .collect();
        prop_assert_eq!(complex.len() % 2, 0);
        complex.sort_by(f64::total_cmp);
        for pair in complex.chunks(2) {
            prop_assert!((pair[0] - pair[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn ridge_recovers_exact_map(
        d_in in 1usize..5,
        d_out in 1usize..5,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 20 * d_in + 10;
        let a: Vec<f64> = (0..d_in * d_out).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x: Vec<f64> = (0..n * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut y = vec![0.0; n * d_out];
        for r in 0..n {
            for j in 0..d_out {
                y[r * d_out + j] = (0..d_in).map(|i| x[r * d_in + i] * a[i * d_out + j]).sum();
            }
        }
        for centered in [false, true] {
            let l = ridge_fit(&x, &y, n, 0.0, centered).unwrap();
            for (got, want) in l.matrix.iter().zip(&a) {
                prop_assert!((got - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn covariance_similarity_invariances(
        seed in any::<u64>(),
        shift in 0usize..50,
        scale in 0.1f64..10.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (60, 4);
        let layers: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let trace = |layers: Vec<Vec<f64>>| ActivationTrace {
            n,
            d,
            out: layers[0].clone(),
            layers,
            provenance: TraceProvenance {
                model_hash: String::new(),
                mask_hash: None,
                corpus_hash: String::new(),
            },
        };
        let base = covariance_similarity(&trace(layers.clone())).unwrap();
        for i in 0..3 {
            prop_assert!((base[i][i] - 1.0).abs() < 1e-12);
            for j in 0..3 {
                prop_assert!((base[i][j] - base[j][i]).abs() < 1e-12);
                prop_assert!(base[i][j] <= 1.0 + 1e-12);
            }
        }
        // Reordering token rows and rescaling one layer leave it unchanged.
        let moved: Vec<Vec<f64>> = layers
            .iter()
            .enumerate()
            .map(|(l, x)| {
                let mut rows: Vec<&[f64]> = x.chunks(d).collect();
                rows.rotate_left(shift % n);
                let s = if l == 1 { scale } else { 1.0 };
                rows.concat().into_iter().map(|v| v * s).collect()
            })
            .collect();
        let other = covariance_similarity(&trace(moved)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((base[i][j] - other[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn structure_shares_sum_to_one(m in mask_strategy()) {
        prop_assume!(m.active() > 0);
        let r = structure_report(&m).unwrap();
        let s: f64 = r.cells.iter().map(|c| c.proportion).sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
        prop_assert_eq!(r.cells.iter().map(|c| c.active).sum::<u64>(), m.active());
    }

    #[test]
    fn random_matched_mask_keeps_counts(m in mask_strategy(), seed in any::<u64>()) {
        let r = random_matched_mask(&m, seed);
        prop_assert_eq!(r.tensor_active(), m.tensor_active());
        prop_assert_eq!(&r, &random_matched_mask(&m, seed));
    }

    #[test]
    fn overlap_bounds(a in mask_strategy(), b in mask_strategy()) {
        prop_assume!(a.active() > 0 && b.active() > 0);
        let s = overlap_test(&a, &b, 50, 0).unwrap();
        prop_assert!(s.overlap <= s.proportion0.min(s.proportion1) + 1e-12);
        prop_assert!(s.p_value > 0.0 && s.p_value <= 1.0);
        prop_assert!(s.contained >= 0.0 && s.contained <= 1.0);
    }

    #[test]
    fn mask_bytes_roundtrip(m in mask_strategy()) {
        prop_assert_eq!(BinaryMask::from_bytes(&m.to_bytes()).unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_roundtrip(seed in any::<u64>(), step in 0u64..100_000) {
        let cp = Checkpoint {
            params: tiny(9, seed),
            step,
            optimizer_state_hash: format!("{seed:x}"),
        };
        let back = Checkpoint::from_bytes(&cp.to_bytes()).unwrap();
        prop_assert_eq!(back.hash(), cp.hash());
        prop_assert_eq!(back.step, step);
        prop_assert_eq!(&back.params.tensors, &cp.params.tensors);
    }

    #[test]
    fn surprisal_probabilities_sum_to_one(
        prefix in prop::collection::vec(2u32..9, 1..7),
        seed in any::<u64>(),
    ) {
        let p = tiny(9, seed);
        let total: f64 = (0..9u32)
            .filter(|&v| v != BOS)
            .map(|v| {
                let mut ids = prefix.clone();
                ids.push(v);
                let s = surprisals(&p, &stream(ids), None).unwrap();
                (-s.last().unwrap()).exp()
            })
            .sum();
        // The BOS target is never scored, so its probability is added back
        // from the model directly.
        let mut ids = prefix.clone();
        ids.push(2);
        let logits = sublab_core::model::forward(
            &p,
            &ids.iter().map(|&i| i as usize).collect::<Vec<_>>(),
            1,
            false,
            None,
        )
        .unwrap()
        .logits;
        let row = logits.row(prefix.len() - 1);
        let probs = sublab_core::autodiff::softmax_rows(row, 9);
        prop_assert!((total + probs[BOS as usize] as f64 - 1.0).abs() < 1e-4);
    }
}
