use proptest::prelude::*;

use unlearn_core::dataset::conversation::{Dialogue, Role, Turn};
use unlearn_core::dataset::{expand, split, split_ids};
use unlearn_core::guidance::{cfg_prob_dual, normalize, GuidanceSpec, Scale, TokenScores, Variant};
use unlearn_core::lm::{LanguageModel, TabularLM, TokenId, Vocabulary};
use unlearn_core::model_arith::{apply_negation, extract_task_vector, Checkpoint, DType, NamedTensor};
use unlearn_core::orpo::{odds_ratio_loss, odds_ratio_term, OrpoConfig, ScoredCompletion};
use unlearn_core::pii::{Label, PiiDetector};

fn logit_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|v| {
        (
            prop::collection::vec(-20.0f64..20.0, v),
            prop::collection::vec(-20.0f64..20.0, v),
        )
    })
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lz = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    x.iter().map(|v| v - lz).collect()
}

proptest! {
    #[test]
    fn collapse_at_one_and_zero((p, n) in logit_pair()) {
        let pos = TokenScores::logits(p.clone()).unwrap();
        let neg = TokenScores::logits(n.clone()).unwrap();
        for variant in [Variant::DualLog, Variant::DualProb] {
            let one = GuidanceSpec::new(1.0, variant).unwrap().combine(&neg, &pos).unwrap();
            let zero = GuidanceSpec::new(0.0, variant).unwrap().combine(&neg, &pos).unwrap();
            let (lp, ln) = (log_softmax(&p), log_softmax(&n));
            let (ep, en): (Vec<f64>, Vec<f64>) = if variant == Variant::DualLog {
                (lp, ln)
            } else {
                (lp.iter().map(|x| x.exp()).collect(), ln.iter().map(|x| x.exp()).collect())
            };
            for i in 0..p.len() {
                prop_assert!((one[i] - ep[i]).abs() <= 1e-9);
                prop_assert!((zero[i] - en[i]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn prob_scores_bounded((p, n) in logit_pair(), gamma in 1.0f64..10.0) {
        let pos = TokenScores::logits(p).unwrap();
        let neg = TokenScores::logits(n).unwrap();
        for s in cfg_prob_dual(&neg, &pos, gamma).unwrap() {
            prop_assert!(s >= 1.0 - gamma && s <= gamma);
        }
    }

    #[test]
    fn normalize_is_idempotent(x in prop::collection::vec(-30.0f64..30.0, 1..50)) {
        let s = TokenScores::logits(x).unwrap();
        for target in [Scale::Probs, Scale::LogProbs] {
            let once = normalize(&s, target).unwrap();
            let twice = normalize(&once, target).unwrap();
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() <= 1e-12 || (a.is_infinite() && a == b));
            }
        }
        let probs = normalize(&s, Scale::Probs).unwrap();
        prop_assert!((probs.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn odds_ratio_monotone(c in -12.0f64..-0.01, r in -12.0f64..-0.01, d in 0.001f64..0.5) {
        let base = odds_ratio_term(c, r);
        if c + d < 0.0 {
            prop_assert!(odds_ratio_term(c + d, r) < base);
        }
        prop_assert!(odds_ratio_term(c, r - d) < base);
    }

    #[test]
    fn orpo_loss_ignores_token_order(mut xs in prop::collection::vec(-8.0f64..-0.001, 1..20), ys in prop::collection::vec(-8.0f64..-0.001, 1..20)) {
        let cfg = OrpoConfig::default();
        let r = ScoredCompletion::new(ys).unwrap();
        let a = odds_ratio_loss(&ScoredCompletion::new(xs.clone()).unwrap(), &r, &cfg).unwrap();
        xs.reverse();
        let b = odds_ratio_loss(&ScoredCompletion::new(xs).unwrap(), &r, &cfg).unwrap();
        prop_assert!((a.total - b.total).abs() < 1e-12);
    }
}

fn toy_model(rows: &[(Vec<TokenId>, Vec<f64>)]) -> TabularLM {
    let words = ["<unk>", "<eos>", "a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let vocab = Vocabulary::new(words, 1).unwrap();
    let mut m = TabularLM::new(vocab, 3, vec![0.0; 6]).unwrap();
    for (k, v) in rows {
        m.insert(k.clone(), v.clone()).unwrap();
    }
    m
}

fn table_rows() -> impl Strategy<Value = Vec<(Vec<TokenId>, Vec<f64>)>> {
    prop::collection::vec(
        (prop::collection::vec(0 as TokenId..6, 1..=3), prop::collection::vec(-5.0f64..5.0, 6)),
        0..12,
    )
}

proptest! {
    #[test]
    fn batch_transparency(rows in table_rows(), ctxs in prop::collection::vec(prop::collection::vec(0 as TokenId..6, 0..6), 1..6)) {
        let m = toy_model(&rows);
        let batched = m.score_batch(&ctxs).unwrap();
        for (ctx, b) in ctxs.iter().zip(&batched) {
            let alone = m.score_batch(std::slice::from_ref(ctx)).unwrap();
            prop_assert_eq!(alone[0].values(), b.values());
        }
    }

    #[test]
    fn table_json_round_trip(rows in table_rows()) {
        let m = toy_model(&rows);
        let back = TabularLM::from_json_str(&m.to_json_string().unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }
}

fn detector() -> PiiDetector {
    PiiDetector::builder()
        .gazetteer(Label::Person, ["Alice", "Bob"])
        .gazetteer(Label::Gpe, ["Paris"])
        .build()
        .unwrap()
}

fn text_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec!["Alice", "Bob", "Paris", "the", "café", "mail", "a@b.org", "lives", "in", "ü", "."]),
        0..15,
    )
    .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn spans_are_ordered_char_offsets(text in text_strategy()) {
        let chars: Vec<char> = text.chars().collect();
        let spans = detector().detect(&text);
        let mut prev_end = 0;
        for s in &spans {
            prop_assert!(s.start < s.end && s.end <= chars.len());
            prop_assert!(s.start >= prev_end);
            let surface: String = chars[s.start..s.end].iter().collect();
            prop_assert_eq!(&surface, &s.surface);
            prop_assert_eq!(&text[s.byte_start..s.byte_end], s.surface.as_str());
            prev_end = s.end;
        }
    }

    #[test]
    fn appending_text_never_loses_entities(a in text_strategy(), b in text_strategy()) {
        let det = detector();
        let joined = format!("{a} . {b}");
        prop_assert!(det.count(&joined) >= det.count(&a));
    }

    #[test]
    fn one_sample_per_span(answers in prop::collection::vec(text_strategy(), 1..4)) {
        let det = detector();
        let mut turns = vec![Turn::new(Role::System, "default")];
        for a in &answers {
            turns.push(Turn::new(Role::User, "q"));
            turns.push(Turn::new(Role::Assistant, a.as_str()));
        }
        let d = Dialogue::new("d", turns).unwrap();
        let expected: usize = answers.iter().map(|a| det.count(a)).sum();
        prop_assert_eq!(expand(&d, &det).len(), expected);
    }

    #[test]
    fn split_never_leaks(n in 2usize..40, seed in any::<u64>(), ratio in 0.05f64..0.95) {
        let ids: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
        let (train, test) = split_ids(ids.iter().map(String::as_str), ratio, seed).unwrap();
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), n);
        let again = split_ids(ids.iter().map(String::as_str), ratio, seed).unwrap();
        prop_assert_eq!(again, (train, test));
    }
}

#[test]
fn samples_follow_their_dialogue() {
    let det = detector();
    let dialogues: Vec<Dialogue> = (0..12)
        .map(|i| {
            Dialogue::new(
                format!("d{i}"),
                vec![
                    Turn::new(Role::System, "default"),
                    Turn::new(Role::User, "who"),
                    Turn::new(Role::Assistant, "Alice and Bob"),
                    Turn::new(Role::User, "where"),
                    Turn::new(Role::Assistant, "Paris"),
                ],
            )
            .unwrap()
        })
        .collect();
    let samples: Vec<_> = dialogues.iter().flat_map(|d| expand(d, &det)).collect();
    let (train, test) = split(samples, 0.75, 9).unwrap();
    for s in &train {
        assert!(test.iter().all(|t| t.dialogue_id != s.dialogue_id));
    }
    assert_eq!(train.len() + test.len(), 36);
}

fn checkpoint(values: &[f32]) -> Checkpoint {
    Checkpoint::new(vec![NamedTensor::from_values("w", DType::F32, vec![values.len()], values).unwrap()])
}

proptest! {
    #[test]
    fn negation_is_linear_in_alpha(
        pairs in prop::collection::vec((-4.0f32..4.0, -4.0f32..4.0), 1..30),
        alpha in 0.0f64..2.0,
    ) {
        let b: Vec<f32> = pairs.iter().map(|p| p.0).collect();
        let f: Vec<f32> = pairs.iter().map(|p| p.1).collect();
        let (base, ft) = (checkpoint(&b), checkpoint(&f));
        let tv = extract_task_vector(&base, &ft).unwrap();
        let out = apply_negation(&base, &tv, alpha).unwrap().tensor("w").unwrap().values();
        for i in 0..b.len() {
            let expected = b[i] as f64 - alpha * (f[i] as f64 - b[i] as f64);
            prop_assert!((out[i] as f64 - expected).abs() <= 1e-5 * (1.0 + expected.abs()));
        }
    }
}
