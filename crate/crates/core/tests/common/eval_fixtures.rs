//! Hand-computed metric fixtures.

use std::collections::HashMap;

use phrasetag_core::corpus::GoldKeyphraseRecord;
use phrasetag_core::eval::{
    evaluate_keyphrase, evaluate_tagging, f1, rank_phrases_global, EvalReport, KeyphraseDoc,
    KeyphraseOptions, SpanKey,
};
use phrasetag_core::labelgen::Span;
use phrasetag_core::tagger::Prediction;
use proptest::prelude::*;

pub fn key(doc: &str, s: usize, a: usize, b: usize) -> SpanKey {
    (doc.to_string(), s, a, b)
}

pub fn pred(doc: &str, phrase: &str, logit: f64) -> Prediction {
    let words: Vec<String> = phrase.split(' ').map(String::from).collect();
    Prediction {
        doc_id: doc.into(),
        span: Span {
            sent_idx: 0,
            start: 0,
            end: words.len(),
            words,
        },
        probability: 1.0 / (1.0 + (-logit).exp()),
        logit,
    }
}

/// Two documents, three sentences: 7 predictions, 5 gold spans, 4 exact matches.
pub fn tagging_fixture() -> EvalReport {
    let gold = vec![
        key("a", 0, 0, 2),
        key("a", 0, 3, 5),
        key("a", 1, 1, 3),
        key("b", 0, 0, 3),
        key("b", 0, 4, 6),
    ];
    let predicted = vec![
        key("a", 0, 0, 2),
        key("a", 0, 3, 5),
        key("a", 1, 1, 3),
        key("b", 0, 0, 3),
        key("a", 0, 0, 3),
        key("a", 1, 2, 3),
        key("b", 0, 4, 7),
    ];
    evaluate_tagging(&predicted, &gold)
}

/// Hand values for [`tagging_fixture`]: P = 4/7, R = 4/5.
pub fn tagging_expected() -> (f64, f64, f64) {
    let (p, r) = (4.0 / 7.0, 4.0 / 5.0);
    (p, r, 2.0 * p * r / (p + r))
}

pub fn keyphrase_gold() -> Vec<GoldKeyphraseRecord> {
    vec![
        GoldKeyphraseRecord {
            id: "d1".into(),
            keyphrases: vec![
                "Heat Island".into(),
                "urban climate".into(),
                "land use".into(),
                "albedo change".into(),
            ],
        },
        GoldKeyphraseRecord {
            id: "d2".into(),
            keyphrases: vec!["coal mine".into(), "methane leak".into()],
        },
    ]
}

/// d1: gold 4, candidates hit 3, top-10 hits 2. d2: gold 2, candidates hit 1, top-10 hits 1.
pub fn keyphrase_extracted() -> Vec<KeyphraseDoc> {
    let mut d1: Vec<String> = vec!["heat island".into(), "urban climate".into()];
    d1.extend((0..8).map(|i| format!("filler {i}")));
    d1.push("land use".into());
    vec![
        KeyphraseDoc {
            doc_id: "d1".into(),
            top: d1[..10].to_vec(),
            candidates: d1,
        },
        KeyphraseDoc {
            doc_id: "d2".into(),
            candidates: vec!["coal mine".into(), "gas".into()],
            top: vec!["coal mine".into(), "gas".into()],
        },
    ]
}

pub fn keyphrase_fixture() -> EvalReport {
    evaluate_keyphrase(
        &keyphrase_extracted(),
        &keyphrase_gold(),
        KeyphraseOptions::default(),
    )
    .unwrap()
}

/// Hand values for [`keyphrase_fixture`]: recall (0.75 + 0.5) / 2, F1@10 from P = hits/10.
pub fn keyphrase_expected() -> (f64, f64) {
    let doc1 = f1(2.0 / 10.0, 2.0 / 4.0);
    let doc2 = f1(1.0 / 10.0, 1.0 / 2.0);
    (0.625, (doc1 + doc2) / 2.0)
}

pub type ScalingCase = (Vec<(usize, i32)>, i32, f64);

/// Quarter-step logits so exact ties, and the tie-break path, are common.
pub fn scaling_strategy() -> impl Strategy<Value = ScalingCase> {
    (
        prop::collection::vec((0usize..12, -20i32..20), 1..60),
        -8i32..8,
        0.01f64..100.0,
    )
}

/// Ranking order must match an integer oracle before and after scaling.
pub fn scaling_case((logits, exponent, scale): &ScalingCase) -> Result<(), String> {
    let build = |s: f64| -> Vec<Prediction> {
        logits
            .iter()
            .map(|&(p, l)| pred("d", &format!("w {p}"), l as f64 / 4.0 * s))
            .collect()
    };
    let order = |ps: &[Prediction]| -> Vec<String> {
        rank_phrases_global(ps)
            .into_iter()
            .map(|r| r.phrase)
            .collect()
    };

    // Compare sum_a / n_a against sum_b / n_b by cross-multiplying.
    let mut sums: HashMap<String, (i64, i64)> = HashMap::new();
    for &(p, l) in logits {
        let e = sums.entry(format!("w {p}")).or_default();
        e.0 += l as i64;
        e.1 += 1;
    }
    let mut oracle: Vec<(String, i64, i64)> =
        sums.into_iter().map(|(k, (s, n))| (k, s, n)).collect();
    oracle.sort_by(|x, y| {
        (y.1 * x.2)
            .cmp(&(x.1 * y.2))
            .then(y.2.cmp(&x.2))
            .then_with(|| x.0.cmp(&y.0))
    });
    let has_mean_ties = oracle
        .windows(2)
        .any(|w| w[0].1 * w[1].2 == w[1].1 * w[0].2);
    let oracle: Vec<String> = oracle.into_iter().map(|x| x.0).collect();

    if order(&build(1.0)) != oracle {
        return Err("unscaled order differs from oracle".into());
    }
    // Powers of two scale without rounding, so even ties must survive.
    if order(&build(2f64.powi(*exponent))) != oracle {
        return Err(format!("order changed under scale 2^{exponent}"));
    }
    if !has_mean_ties && order(&build(*scale)) != oracle {
        return Err(format!("order changed under scale {scale}"));
    }
    Ok(())
}
