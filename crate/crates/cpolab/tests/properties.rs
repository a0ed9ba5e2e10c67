//! Property tests over the annotation-merge algebra, the mask rules, and
//! the evaluation arithmetic.

use std::collections::BTreeSet;

use proptest::prelude::*;

use cpolab::annotate::{balanced_accuracy, merge_union, AnnotationVerdict, ConfusionCounts};
use cpolab::corpus::TokenizedSample;
use cpolab::cpo::{build_masks, compute_y, InstructionKind};

fn arb_verdict(n: usize) -> impl Strategy<Value = AnnotationVerdict> {
    proptest::collection::vec(proptest::option::of(any::<bool>()), n).prop_map(|slots| {
        // None = unmentioned, Some(true) = inconsistent, Some(false) = consistent
        let mut inconsistent = BTreeSet::new();
        let mut consistent = BTreeSet::new();
        for (i, slot) in slots.into_iter().enumerate() {
            match slot {
                Some(true) => {
                    inconsistent.insert(i);
                }
                Some(false) => {
                    consistent.insert(i);
                }
                None => {}
            }
        }
        AnnotationVerdict {
            inconsistent,
            consistent,
        }
    })
}

fn verdict_from_labels(labels: &[u8]) -> AnnotationVerdict {
    let mut v = AnnotationVerdict {
        inconsistent: BTreeSet::new(),
        consistent: BTreeSet::new(),
    };
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            v.inconsistent.insert(i);
        } else {
            v.consistent.insert(i);
        }
    }
    v
}

fn arb_pair() -> impl Strategy<Value = (AnnotationVerdict, AnnotationVerdict, usize)> {
    (1usize..8).prop_flat_map(|n| (arb_verdict(n), arb_verdict(n)).prop_map(move |(a, b)| (a, b, n)))
}

fn arb_triple(
) -> impl Strategy<Value = (AnnotationVerdict, AnnotationVerdict, AnnotationVerdict, usize)> {
    (1usize..8).prop_flat_map(|n| {
        (arb_verdict(n), arb_verdict(n), arb_verdict(n)).prop_map(move |(a, b, c)| (a, b, c, n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn union_is_commutative((a, b, n) in arb_pair()) {
        prop_assert_eq!(merge_union(&a, &b, n), merge_union(&b, &a, n));
    }

    #[test]
    fn union_is_associative((a, b, c, n) in arb_triple()) {
        let ab = verdict_from_labels(&merge_union(&a, &b, n));
        let bc = verdict_from_labels(&merge_union(&b, &c, n));
        prop_assert_eq!(merge_union(&ab, &c, n), merge_union(&a, &bc, n));
    }

    #[test]
    fn union_is_idempotent((a, _b, n) in arb_pair()) {
        let merged = merge_union(&a, &a, n);
        let again = merge_union(&verdict_from_labels(&merged), &verdict_from_labels(&merged), n);
        prop_assert_eq!(merged, again);
    }

    #[test]
    fn union_matches_set_union((a, b, n) in arb_pair()) {
        let labels = merge_union(&a, &b, n);
        for i in 0..n {
            let flagged = a.inconsistent.contains(&i) || b.inconsistent.contains(&i);
            prop_assert_eq!(labels[i] == 0, flagged, "sentence {}", i);
        }
    }

    #[test]
    fn mask_rules_match_brute_force(token_label in proptest::collection::vec(0u8..2, 1..50)) {
        let n = token_label.len();
        let sample = TokenizedSample {
            prompt_tokens: vec![0, 1],
            summary_tokens: (0..n).map(|i| i % 250).collect(),
            sentence_of_token: token_label
                .iter()
                .scan((0usize, None::<u8>), |(idx, prev), &l| {
                    if prev.is_some() && *prev != Some(l) {
                        *idx += 1;
                    }
                    *prev = Some(l);
                    Some(*idx)
                })
                .collect(),
            token_label: token_label.clone(),
            y: u8::from(token_label.iter().all(|&l| l == 1)),
        };
        let masks = build_masks(&sample);
        let y = sample.y;
        for (i, &label) in token_label.iter().enumerate() {
            let (want_inc, want_pen) = if y == 1 {
                (true, true) // every token, both terms
            } else {
                (label == 0, label == 0) // exactly the inconsistent tokens
            };
            prop_assert_eq!(masks.incentive_mask[i], want_inc);
            prop_assert_eq!(masks.penalty_mask[i], want_pen);
        }
        if y == 1 {
            prop_assert_eq!(masks.incentive_instruction, InstructionKind::Contextual);
            prop_assert_eq!(masks.penalty_instruction, InstructionKind::Internal);
        } else {
            prop_assert_eq!(masks.incentive_instruction, InstructionKind::Internal);
            prop_assert_eq!(masks.penalty_instruction, InstructionKind::Contextual);
        }
    }

    #[test]
    fn y_matches_brute_force(labels in proptest::collection::vec(0u8..2, 1..40)) {
        let brute = if labels.contains(&0) { 0 } else { 1 };
        prop_assert_eq!(compute_y(&labels).unwrap(), brute);
    }

    #[test]
    fn balanced_accuracy_matches_brute_force(
        tp in 0usize..50, fp in 0usize..50, tn in 0usize..50, fn_ in 0usize..50
    ) {
        let c = ConfusionCounts { tp, fp, tn, fn_ };
        let result = balanced_accuracy(&c);
        if tp + fn_ == 0 || tn + fp == 0 {
            prop_assert!(result.is_err());
        } else {
            let brute = (tp as f64 / (tp + fn_) as f64 + tn as f64 / (tn + fp) as f64) / 2.0;
            let got = result.unwrap();
            prop_assert!((got - brute).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn worst_layer_selection_is_rank_based(
        accs in proptest::collection::vec(0.0f64..1.0, 1..12),
        k in 1usize..16,
        scale in 0.1f64..5.0,
        shift in -2.0f64..2.0
    ) {
        let transformed: Vec<f64> = accs.iter().map(|a| a * scale + shift).collect();
        prop_assert_eq!(
            cpolab::probe::select_worst_layers(&accs, k).unwrap(),
            cpolab::probe::select_worst_layers(&transformed, k).unwrap()
        );
    }
}
