use proptest::prelude::*;

use rankcert::calibrate::{conformal_threshold_values, prediction_set};
use rankcert::consensus::{
    aggregate, canonicalize_numeric, CanonicalClass, Canonicalizer, ClassKind, NumericCanonicalizer,
    OptionCanonicalizer, VerbatimCanonicalizer,
};
use rankcert::harness::{dataset, DatasetItem};
use rankcert::synthetic::FragmentCanonicalizer;
use rankcert::{RankedConsensus, RawSample, ScoreValue};

fn samples(texts: &[String]) -> Vec<RawSample> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| RawSample::new("item", i as u32, t.clone()))
        .collect()
}

fn answer() -> impl Strategy<Value = String> {
    prop_oneof![
        (0u8..6).prop_map(|i| format!("a{i}")),
        (0u8..4).prop_map(|i| format!("b{i}#{}", i % 2)),
        Just(String::new()),
    ]
}

fn option_letter(class: &CanonicalClass) -> String {
    let idx: u8 = class.key.parse().unwrap();
    ((b'A' + idx) as char).to_string()
}

proptest! {
    #[test]
    fn consensus_summary_bounds(texts in prop::collection::vec(answer(), 1..80), tie in any::<u64>()) {
        let cons = aggregate(&samples(&texts), &VerbatimCanonicalizer, tie).unwrap();
        let k = texts.len();
        prop_assert_eq!(cons.classes().iter().map(|c| c.count).sum::<usize>(), k);
        prop_assert!(cons.strength() >= 1.0 / k as f64 - 1e-15 && cons.strength() <= 1.0);
        prop_assert!(cons.margin() <= cons.strength());
        prop_assert!(cons.entropy() >= -1e-15 && cons.entropy() <= (k as f64).ln() + 1e-12);
        for w in cons.classes().windows(2) {
            prop_assert!(w[0].count >= w[1].count);
        }
    }

    #[test]
    fn aggregation_ignores_sample_order(
        texts in prop::collection::vec(answer(), 1..60),
        tie in any::<u64>(),
        rot in any::<usize>(),
    ) {
        let base = aggregate(&samples(&texts), &VerbatimCanonicalizer, tie).unwrap();
        let mut rotated = texts.clone();
        let n = rotated.len();
        rotated.rotate_left(rot % n);
        rotated.reverse();
        prop_assert_eq!(aggregate(&samples(&rotated), &VerbatimCanonicalizer, tie).unwrap(), base);
    }

    #[test]
    fn numeric_canonicalization_is_idempotent(
        int in -1_000_000i64..1_000_000,
        frac in 0u32..10_000,
        pad in 0usize..4,
        prefix in prop_oneof![Just(""), Just("The answer is "), Just("#### "), Just("= ")],
    ) {
        let text = format!("{prefix}{int}.{frac:04}{}", "0".repeat(pad));
        let c = canonicalize_numeric(&text);
        prop_assert!(!c.is_invalid());
        prop_assert_eq!(NumericCanonicalizer.canonicalize(&c.key), c);
    }

    #[test]
    fn option_canonicalization_is_idempotent(idx in 0usize..5, style in 0u8..4) {
        let options: Vec<String> = ["red", "green", "blue", "cyan", "black"].iter().map(|s| s.to_string()).collect();
        let canon = OptionCanonicalizer::new(&options).unwrap();
        let letter = ((b'A' + idx as u8) as char).to_string();
        let text = match style {
            0 => letter.clone(),
            1 => format!("({letter})"),
            2 => format!("{letter}. {}", options[idx]),
            _ => options[idx].to_uppercase(),
        };
        let c = canon.canonicalize(&text);
        prop_assert_eq!(c.key.clone(), idx.to_string());
        prop_assert_eq!(canon.canonicalize(&option_letter(&c)), c);
    }

    #[test]
    fn canonical_counts_dominate_raw_counts(
        texts in prop::collection::vec((0u8..3, 0u8..4).prop_map(|(c, v)| format!("k{c}#{v}")), 1..60),
        tie in any::<u64>(),
    ) {
        let raw = aggregate(&samples(&texts), &VerbatimCanonicalizer, tie).unwrap();
        let canon = aggregate(&samples(&texts), &FragmentCanonicalizer, tie).unwrap();
        for rc in raw.classes() {
            let base = rc.class.key.split('#').next().unwrap();
            let merged = canon.count_of(&CanonicalClass::new(ClassKind::Verbatim, base));
            prop_assert!(merged >= rc.count);
        }
        prop_assert!(canon.strength() >= raw.strength());
    }

    #[test]
    fn threshold_is_monotone_in_alpha(
        vals in prop::collection::vec(prop_oneof![(1u8..8).prop_map(|v| ScoreValue::finite(v as f64)), Just(ScoreValue::INFINITE)], 1..120),
        a in 1u32..98,
        b in 1u32..98,
    ) {
        let (lo, hi) = (a.min(b) as f64 / 100.0, a.max(b) as f64 / 100.0);
        let t_lo = conformal_threshold_values(&vals, lo).unwrap();
        let t_hi = conformal_threshold_values(&vals, hi).unwrap();
        prop_assert!(t_hi.m_star <= t_lo.m_star);
        prop_assert!(t_hi.k_index <= t_lo.k_index);
    }

    #[test]
    fn prediction_sets_nest_as_the_threshold_grows(
        counts in prop::collection::vec(1usize..9, 1..8),
        tie in any::<u64>(),
        m in 1u32..10,
    ) {
        let cons = RankedConsensus::from_counts(
            "q",
            counts.iter().enumerate().map(|(i, n)| (CanonicalClass::new(ClassKind::Verbatim, format!("c{i}")), *n)),
            tie,
        ).unwrap();
        let small = prediction_set(&cons, ScoreValue::finite(m as f64));
        let large = prediction_set(&cons, ScoreValue::finite(m as f64 + 1.0));
        prop_assert_eq!(small.len(), (m as usize).min(cons.num_classes()));
        prop_assert!(large.classes.starts_with(&small.classes));
        let all = prediction_set(&cons, ScoreValue::INFINITE);
        prop_assert!(all.saturated);
        prop_assert_eq!(all.len(), cons.num_classes());
    }

    #[test]
    fn dataset_lines_round_trip(
        ids in prop::collection::btree_set("[a-z][a-z0-9_-]{0,8}", 1..12),
        query in "[ -~]{0,40}",
        value in -10_000i64..10_000,
    ) {
        let items: Vec<DatasetItem> = ids.iter().map(|id| DatasetItem {
            id: id.clone(),
            query: query.clone(),
            acceptable: vec![value.to_string()],
            canonicalizer: "numeric".parse().unwrap(),
            options: None,
            metadata: Default::default(),
        }).collect();
        let text = dataset::dataset_to_jsonl(&items).unwrap();
        let back = dataset::parse_dataset(&text, std::path::Path::new("mem.jsonl")).unwrap();
        prop_assert_eq!(back, items);
    }
}
