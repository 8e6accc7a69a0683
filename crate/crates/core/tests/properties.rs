use std::path::PathBuf;

use proptest::prelude::*;

use logicqa::dataset::{sample_few_shot, ImageRecord, REFERENCE_COUNT};
use logicqa::filtering::{filter_questions, FilterReport};
use logicqa::inference::{anomaly_score, assess, decide, median, vote_main};
use logicqa::metrics::{agreement, auroc, f1_at, f1_max, stable_mean};
use logicqa::prompts::{extract_test_question, Templates};
use logicqa::synthesis::{dedup_questions, normalize_question, Provenance};
use logicqa::{
    Answer, DatasetManifest, Label, Layout, MainQuestion, MainVote, QuestionSet, ScoredSample, Split,
    SubAnswer, Verdict,
};

fn answer_strategy() -> impl Strategy<Value = Answer> {
    prop_oneof![Just(Answer::Yes), Just(Answer::No), Just(Answer::Unparsed)]
}

fn sub_answers(main_index: usize) -> impl Strategy<Value = Vec<SubAnswer>> {
    prop::collection::vec((answer_strategy(), -5.0f64..=0.0), 5).prop_map(move |v| {
        v.into_iter()
            .enumerate()
            .map(|(j, (a, lp))| SubAnswer::new(main_index, j + 1, a, lp))
            .collect()
    })
}

fn samples_strategy() -> impl Strategy<Value = Vec<ScoredSample>> {
    prop::collection::vec((0u8..6, any::<bool>()), 2..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(k, (s, anomalous))| {
                let label = if anomalous { Label::Anomaly } else { Label::Normal };
                ScoredSample::new(format!("i{k}"), f64::from(s) / 5.0, label)
            })
            .collect()
    })
}

fn both_classes(s: &[ScoredSample]) -> bool {
    s.iter().any(|x| x.label == Label::Anomaly) && s.iter().any(|x| x.label == Label::Normal)
}

fn question_set(m: usize) -> QuestionSet {
    QuestionSet {
        class_name: "c".into(),
        subclass: None,
        provenance: Provenance {
            reference_ids: vec![],
            seed: 0,
            backend_id: "p".into(),
        },
        main_questions: (1..=m)
            .map(|i| MainQuestion {
                index: i,
                text: format!("q{i}?"),
                sub_questions: (1..=5).map(|j| format!("q{i}.{j}?")).collect(),
                filter_accuracy: None,
                padded: false,
            })
            .collect(),
        filter: None,
    }
}

proptest! {
    #[test]
    fn vote_follows_strict_majority(answers in sub_answers(3)) {
        let yes = answers.iter().filter(|a| a.parsed == Answer::Yes).count();
        let no = answers.iter().filter(|a| a.parsed == Answer::No).count();
        match vote_main(&answers) {
            Ok(v) => {
                prop_assert_eq!(v.vote, if no < yes { 0 } else { 1 });
                let want = if v.vote == 0 { Answer::Yes } else { Answer::No };
                let best = answers
                    .iter()
                    .filter(|a| a.parsed == want)
                    .map(|a| a.answer_logprob.unwrap())
                    .fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(v.s_i, best);
                prop_assert!(v.s_i <= 0.0);
            }
            Err(_) => prop_assert_eq!(yes + no, 0),
        }
    }

    #[test]
    fn sub_question_order_is_irrelevant(answers in sub_answers(1), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = answers.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        match (vote_main(&answers), vote_main(&shuffled)) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.vote, b.vote);
                prop_assert_eq!(a.s_i, b.s_i);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "shuffle changed definedness"),
        }
    }

    #[test]
    fn score_is_bounded_and_oriented(s in prop::collection::vec(-5.0f64..=0.0, 1..9)) {
        let votes: Vec<MainVote> = s
            .iter()
            .enumerate()
            .map(|(i, &s_i)| MainVote {
                main_index: i + 1,
                vote: 0,
                yes_count: 5,
                no_count: 0,
                s_i,
                contributing: vec![],
            })
            .collect();
        let a = anomaly_score(&votes, Verdict::Anomaly).unwrap();
        let n = anomaly_score(&votes, Verdict::Normal).unwrap();
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&n));
        let med = median(&votes.iter().map(|v| v.s_i.exp()).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(a, med);
        prop_assert!((a + n - 1.0).abs() < 1e-15);
    }

    #[test]
    fn raising_an_element_never_lowers_the_median(
        s in prop::collection::vec(-5.0f64..=0.0, 1..9),
        k in any::<prop::sample::Index>(),
        bump in 0.0f64..2.0,
    ) {
        let votes = |s: &[f64]| -> Vec<MainVote> {
            s.iter().enumerate().map(|(i, &s_i)| MainVote {
                main_index: i + 1, vote: 1, yes_count: 0, no_count: 5, s_i, contributing: vec![],
            }).collect()
        };
        let before = anomaly_score(&votes(&s), Verdict::Anomaly).unwrap();
        let mut raised = s.clone();
        let i = k.index(raised.len());
        raised[i] = (raised[i] + bump).min(0.0);
        let after = anomaly_score(&votes(&raised), Verdict::Anomaly).unwrap();
        prop_assert!(after >= before);
    }

    #[test]
    fn rationale_iff_anomaly(
        groups in prop::collection::vec(sub_answers(0), 1..5),
    ) {
        let set = question_set(groups.len());
        let answers: Vec<SubAnswer> = groups
            .into_iter()
            .enumerate()
            .flat_map(|(i, g)| g.into_iter().map(move |a| SubAnswer { main_index: i + 1, ..a }))
            .collect();
        let v = assess("img", &set.main_questions, &answers).unwrap();
        if v.indeterminate {
            prop_assert!(v.verdict.is_none());
        } else {
            prop_assert_eq!(v.verdict == Some(Verdict::Anomaly), !v.rationale.is_empty());
            prop_assert_eq!(v.verdict.unwrap(), decide(&v.votes));
            let s = v.anomaly_score.unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn auroc_flip_and_monotone_transform(samples in samples_strategy()) {
        prop_assume!(both_classes(&samples));
        let a = auroc(&samples).unwrap();
        let flipped: Vec<ScoredSample> = samples
            .iter()
            .map(|s| ScoredSample {
                label: if s.label == Label::Anomaly { Label::Normal } else { Label::Anomaly },
                ..s.clone()
            })
            .collect();
        prop_assert!((auroc(&flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
        let squashed: Vec<ScoredSample> = samples
            .iter()
            .map(|s| ScoredSample { score: (3.0 * s.score).exp() - 7.0, ..s.clone() })
            .collect();
        prop_assert_eq!(auroc(&squashed).unwrap(), a);
        prop_assert_eq!(f1_max(&squashed).unwrap().value, f1_max(&samples).unwrap().value);
    }

    #[test]
    fn f1_max_dominates_every_threshold(samples in samples_strategy(), tau in -0.5f64..1.5) {
        prop_assume!(samples.iter().any(|s| s.label == Label::Anomaly));
        let best = f1_max(&samples).unwrap();
        prop_assert!(best.value >= f1_at(&samples, tau));
        prop_assert_eq!(f1_at(&samples, best.threshold), best.value);
    }

    #[test]
    fn agreement_is_symmetric(a in prop::collection::vec(any::<bool>(), 1..60), seed in any::<u64>()) {
        let b: Vec<bool> = a.iter().enumerate().map(|(k, x)| x ^ ((seed >> (k % 64)) & 1 == 1)).collect();
        prop_assert_eq!(agreement(&a, &b).unwrap(), agreement(&b, &a).unwrap());
    }

    #[test]
    fn mean_ignores_run_order(mut v in prop::collection::vec(0.0f64..=1.0, 1..10), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let m = stable_mean(&v);
        v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(stable_mean(&v).to_bits(), m.to_bits());
    }

    #[test]
    fn filtering_is_monotone_and_order_preserving(
        acc in prop::collection::vec(0u32..=100, 1..12),
        t_hi in 1u32..=100,
        drop in 0u32..=100,
    ) {
        let t_lo = t_hi.saturating_sub(drop).max(1);
        let set = question_set(acc.len());
        let reports = |t: u32| -> Vec<FilterReport> {
            acc.iter()
                .enumerate()
                .map(|(k, &a)| FilterReport::with_accuracy(format!("q{}?", k + 1), f64::from(a) / 100.0, f64::from(t) / 100.0))
                .collect()
        };
        let kept = |t: u32| -> Vec<String> {
            filter_questions(&set, &reports(t))
                .map(|s| s.main_questions.into_iter().map(|q| q.text).collect())
                .unwrap_or_default()
        };
        let (hi, lo) = (kept(t_hi), kept(t_lo));
        for q in &hi {
            prop_assert!(lo.contains(q));
        }
        let expected: Vec<String> = acc
            .iter()
            .enumerate()
            .filter(|(_, &a)| a >= t_hi)
            .map(|(k, _)| format!("q{}?", k + 1))
            .collect();
        prop_assert_eq!(hi, expected);
    }

    #[test]
    fn test_prompt_round_trips(q in "[A-Za-z]([A-Za-z0-9 ,'?-]{0,80}[A-Za-z0-9?])?", class in "[a-z]{1,12}( [a-z]{1,8})?") {
        let t = Templates::builtin();
        let rendered = t.render_test(&q, &class).unwrap();
        prop_assert_eq!(extract_test_question(&rendered), Some(q.as_str()));
    }

    #[test]
    fn dedup_keeps_first_of_each_normal_form(qs in prop::collection::vec("[aAbB ]{1,6}", 0..20)) {
        let out = dedup_questions(qs.clone());
        let forms: Vec<String> = out.iter().map(|q| normalize_question(q)).collect();
        let mut uniq = forms.clone();
        uniq.sort();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), forms.len());
        for q in &qs {
            prop_assert!(forms.contains(&normalize_question(q)));
        }
    }

    #[test]
    fn few_shot_draw_partitions_train(n in 3usize..40, seed in any::<u64>(), cap in 0usize..60) {
        let manifest = DatasetManifest {
            category: "c".into(),
            layout: Layout::Flat,
            records: (0..n)
                .map(|i| ImageRecord {
                    id: format!("train/{i:03}.png"),
                    path: PathBuf::from(format!("/d/train/{i:03}.png")),
                    split: Split::TrainNormal,
                    label: Label::Normal,
                    subclass: None,
                })
                .collect(),
        };
        let sel = sample_few_shot(&manifest, seed, cap).unwrap();
        prop_assert_eq!(sel.reference_ids.len(), REFERENCE_COUNT);
        prop_assert_eq!(sel.validation_ids.len(), cap.min(n - REFERENCE_COUNT));
        let mut all: Vec<&String> = sel.reference_ids.iter().chain(&sel.validation_ids).collect();
        let total = all.len();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), total);
        prop_assert_eq!(sample_few_shot(&manifest, seed, cap).unwrap(), sel);
    }
}
