//! Randomized invariant checks over the library's core contracts:
//! tokenizer round trips, softmax laws, Huffman code soundness,
//! embed/extract inversion, and dataset splitting guarantees.

use proptest::collection::vec;
use proptest::prelude::*;
use std::collections::BTreeSet;

use lsgc_core::datapipe::{
    balance, filter, split, FilterRules, Label, LabeledExample, SplitSpec,
};
use lsgc_core::numerics::{Graph, Tensor};
use lsgc_core::stegsynth::{
    embed, extract, HuffmanCodebook, MarkovLM, PoolDial,
};
use lsgc_core::tokenizer::{decode, encode, BOS, EOS};

fn any_dial() -> impl Strategy<Value = PoolDial> {
    prop_oneof![
        Just(PoolDial::Exp(1)),
        Just(PoolDial::Exp(3)),
        Just(PoolDial::Full),
    ]
}

/// Weighted byte distributions with distinct tokens and support ≥ 8, so
/// every dial's pool fits (the strict builder rejects pools larger than
/// the support by contract).
fn any_dist() -> impl Strategy<Value = Vec<(u8, f64)>> {
    (
        proptest::collection::btree_set(any::<u8>(), 8..=20),
        vec(0.01f64..10.0, 20),
    )
        .prop_map(|(tokens, weights)| {
            tokens.into_iter().zip(weights).collect::<Vec<_>>()
        })
}

fn example(text: String, label: Label) -> LabeledExample {
    LabeledExample {
        text,
        label,
        source: "prop".into(),
        bpw: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // ------------------------------------------------------- tokenizer --

    #[test]
    fn tokenizer_round_trips_any_bytes(text in vec(any::<u8>(), 0..200)) {
        let ids = encode(&text, false, false);
        prop_assert_eq!(ids.len(), text.len());
        prop_assert_eq!(decode(&ids).unwrap(), text);
    }

    #[test]
    fn specials_frame_the_payload(text in vec(any::<u8>(), 0..50)) {
        let ids = encode(&text, true, true);
        prop_assert_eq!(ids.len(), text.len() + 2);
        prop_assert_eq!(ids[0], BOS);
        prop_assert_eq!(*ids.last().unwrap(), EOS);
        prop_assert_eq!(decode(&ids[1..ids.len() - 1]).unwrap(), text);
    }

    // --------------------------------------------------------- softmax --

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..4,
        cols in 1usize..12,
        fill in vec(-30.0f64..30.0, 48),
    ) {
        let data: Vec<f64> = fill.iter().cycle().take(rows * cols).copied().collect();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::new(vec![rows, cols], data).unwrap());
        let s = g.softmax_rows(x).unwrap();
        for r in 0..rows {
            let row = &g.value(s).data()[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(
        cols in 2usize..12,
        fill in vec(-20.0f64..20.0, 12),
        shift in -50.0f64..50.0,
    ) {
        let data: Vec<f64> = fill.iter().take(cols).copied().collect();
        let cols = data.len();
        let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&Tensor::new(vec![1, cols], data).unwrap());
        let b = g.leaf(&Tensor::new(vec![1, cols], shifted).unwrap());
        let sa = g.softmax_rows(a).unwrap();
        let sb = g.softmax_rows(b).unwrap();
        for (x, y) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            prop_assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    // --------------------------------------------------------- huffman --

    #[test]
    fn codebooks_are_prefix_free_and_complete(dist in any_dist(), dial in any_dial()) {
        let book = HuffmanCodebook::build(&dist, dial).unwrap();
        prop_assert!(book.is_prefix_free());
        let (num, max_len) = book.kraft_scaled();
        prop_assert_eq!(num, 1u128 << max_len, "Kraft sum must be exactly 1");
        // The pool honors the dial: 2^h candidates, capped by support.
        let expected = dial.pool_for_support(dist.len());
        prop_assert_eq!(book.len(), expected);
    }

    #[test]
    fn decode_inverts_every_code(dist in any_dist(), dial in any_dial()) {
        let book = HuffmanCodebook::build(&dist, dial).unwrap();
        for &(token, code) in book.codes() {
            let bits: Vec<bool> = (0..code.len as usize).map(|j| code.bit(j)).collect();
            let (decoded, used) = book.decode_padded(&bits);
            prop_assert_eq!(decoded, token);
            prop_assert_eq!(used, bits.len());
        }
    }

    // --------------------------------------------------- embed/extract --

    #[test]
    fn extraction_inverts_embedding(
        bits in vec(any::<bool>(), 1..64),
        length in 24usize..96,
        dial in any_dial(),
        seed in any::<u64>(),
    ) {
        let lm = MarkovLM::bundled();
        let rec = embed(lm, &bits, length, dial, seed).unwrap();
        prop_assert!(rec.bits_embedded >= 1, "every stego text carries payload");
        prop_assert!(rec.bits_embedded <= bits.len());
        let recovered = extract(lm, &rec.text, rec.bits_embedded, dial).unwrap();
        prop_assert_eq!(&recovered[..], &bits[..rec.bits_embedded]);
    }

    // ---------------------------------------------------------- splits --

    #[test]
    fn split_is_disjoint_exhaustive_and_stratified(
        per_class in 5usize..60,
        seed in any::<u64>(),
    ) {
        let mut pool = Vec::new();
        for i in 0..per_class {
            pool.push(example(format!("cover text {i}"), Label::Cover));
            pool.push(example(format!("stego text {i}"), Label::Stego));
        }
        let (train, val, test) = split(pool.clone(), &SplitSpec { seed }).unwrap();

        // Sizes follow the 6:2:2 rule per class.
        let g = per_class;
        prop_assert_eq!(train.len(), 2 * (g * 6 / 10));
        prop_assert_eq!(val.len(), 2 * (g * 2 / 10));
        prop_assert_eq!(test.len(), 2 * (g - g * 6 / 10 - g * 2 / 10));

        // Disjoint and exhaustive over unique texts.
        let mut seen = BTreeSet::new();
        for ex in train.iter().chain(&val).chain(&test) {
            prop_assert!(seen.insert(ex.text.clone()), "duplicate {}", ex.text);
        }
        prop_assert_eq!(seen.len(), pool.len());

        // Each split is class-balanced when the input is.
        for part in [&train, &val, &test] {
            let covers = part.iter().filter(|e| e.label == Label::Cover).count();
            prop_assert_eq!(covers * 2, part.len());
        }
    }

    #[test]
    fn split_is_deterministic_in_the_seed(per_class in 5usize..30, seed in any::<u64>()) {
        let pool: Vec<LabeledExample> = (0..per_class)
            .flat_map(|i| {
                [
                    example(format!("c{i}"), Label::Cover),
                    example(format!("s{i}"), Label::Stego),
                ]
            })
            .collect();
        let a = split(pool.clone(), &SplitSpec { seed }).unwrap();
        let b = split(pool, &SplitSpec { seed }).unwrap();
        prop_assert_eq!(a, b);
    }

    // ------------------------------------------------- filter, balance --

    #[test]
    fn filtering_is_idempotent(
        texts in vec(vec(any::<u8>(), 0..64), 1..40),
    ) {
        let rules = FilterRules::default();
        let corpus: Vec<LabeledExample> = texts
            .iter()
            .map(|b| example(String::from_utf8_lossy(b).into_owned(), Label::Cover))
            .collect();
        let (kept, rejected) = filter(corpus.clone(), &rules);
        prop_assert_eq!(kept.len() + rejected.len(), corpus.len());
        let (kept2, rejected2) = filter(kept.clone(), &rules);
        prop_assert_eq!(kept2, kept);
        prop_assert!(rejected2.is_empty(), "second pass must reject nothing");
    }

    #[test]
    fn balanced_sets_have_equal_classes(
        n_covers in 4usize..40,
        n_stegos in 4usize..40,
        seed in any::<u64>(),
    ) {
        let covers: Vec<LabeledExample> = (0..n_covers)
            .map(|i| example(format!("c{i}"), Label::Cover))
            .collect();
        let stegos: Vec<LabeledExample> = (0..n_stegos)
            .map(|i| example(format!("s{i}"), Label::Stego))
            .collect();
        let want = n_covers.min(n_stegos);
        let out = balance(covers, stegos, want, seed).unwrap();
        prop_assert_eq!(out.len(), 2 * want);
        let c = out.iter().filter(|e| e.label == Label::Cover).count();
        prop_assert_eq!(c, want);
    }
}
