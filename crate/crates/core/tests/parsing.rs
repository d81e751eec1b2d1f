//! Answer extraction against a fixture corpus, plus property tests.
//!
//! `fixtures/parsing_cases.jsonl` holds one case per line:
//! `{"text": ..., "n_options": ..., "expected": "B" | null, "rule": ...}`
//! where `rule` is the id of the rule expected to decide.

use debatebench::backend::truncate_history;
use debatebench::model::{Answer, Letter, Message, Question, Role, Transcript};
use debatebench::parsing::{extract_letter, permute_question, unmap_answer, ChoicePermutation};
use debatebench::protocols::plurality;
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    text: String,
    n_options: usize,
    expected: Option<char>,
    rule: String,
}

#[test]
fn fixture_corpus() {
    let corpus = include_str!("fixtures/parsing_cases.jsonl");
    let mut n = 0;
    for line in corpus.lines().filter(|l| !l.trim().is_empty()) {
        let case: Case = serde_json::from_str(line).unwrap();
        let got = extract_letter(&case.text, case.n_options);
        let want = case.expected.map_or(Answer::Unparsed, |c| Answer::Letter(Letter::from_char(c).unwrap()));
        assert_eq!(got.value, want, "{:?}", case.text);
        assert_eq!(got.rule_id, case.rule, "{:?}", case.text);
        n += 1;
    }
    assert!(n >= 20);
}

fn arb_question() -> impl Strategy<Value = Question> {
    (2usize..=8, any::<u8>()).prop_map(|(n, g)| {
        let options: Vec<String> = (0..n).map(|i| format!("option text {i}")).collect();
        Question::new("q", "stem?", options, Letter::from_index(g as usize % n).unwrap())
    })
}

proptest! {
    #[test]
    fn extraction_stays_in_range(text in "\\PC{0,200}", n in 2usize..=26) {
        let p = extract_letter(&text, n);
        if let Answer::Letter(l) = p.value {
            prop_assert!(l.index() < n);
            prop_assert!(p.matched_span.is_some());
        }
    }

    #[test]
    fn trailing_answer_phrase_wins(prefix in "[a-z ,.]{0,80}", idx in 0usize..4) {
        let l = Letter::from_index(idx).unwrap();
        let p = extract_letter(&format!("{prefix}\nThe answer is {l}."), 4);
        prop_assert_eq!(p.value, Answer::Letter(l));
    }

    #[test]
    fn permutation_roundtrip(n in 2usize..=26, seed in any::<u64>()) {
        let perm = ChoicePermutation::from_seed(n, seed);
        for l in Letter::range(n) {
            prop_assert_eq!(perm.invert(perm.apply(l)), l);
        }
    }

    #[test]
    fn permuted_question_keeps_gold_text(q in arb_question(), seed in any::<u64>()) {
        let (pq, perm) = permute_question(&q, seed);
        prop_assert_eq!(pq.option_text(pq.gold), q.option_text(q.gold));
        prop_assert_eq!(unmap_answer(Answer::Letter(pq.gold), &perm), Answer::Letter(q.gold));
        prop_assert_eq!(unmap_answer(Answer::Unparsed, &perm), Answer::Unparsed);
    }

    #[test]
    fn plurality_picks_a_mode(xs in prop::collection::vec(0usize..5, 1..20)) {
        let answers: Vec<Answer> = xs.iter().map(|&i| if i == 4 { Answer::Unparsed } else { Answer::Letter(Letter::from_index(i).unwrap()) }).collect();
        let top = plurality(&answers);
        let count = |a: Answer| answers.iter().filter(|x| **x == a).count();
        let best = (0..4).map(|i| count(Answer::Letter(Letter::from_index(i).unwrap()))).max().unwrap();
        if best == 0 {
            prop_assert_eq!(top, Answer::Unparsed);
        } else {
            prop_assert_eq!(count(top), best);
        }
    }

    #[test]
    fn truncation_respects_limit(lens in prop::collection::vec(1usize..200, 2..12), limit in 60u64..400) {
        let mut history = vec![Message::system("a", "s".repeat(40))];
        for (i, len) in lens.iter().enumerate() {
            let role = if i % 2 == 0 { Role::User } else { Role::Assistant };
            history.push(Message::new(role, "a", 1, "x".repeat(*len)));
        }
        if let Ok((kept, removed)) = truncate_history(&history, limit) {
            prop_assert_eq!(kept.len() + removed as usize, history.len());
            prop_assert_eq!(&kept[0], &history[0]);
            prop_assert_eq!(kept.last(), history.last());
            let total: u64 = kept.iter().map(|m| debatebench::backend::estimate_tokens(&m.content)).sum();
            prop_assert!(total <= limit || kept.len() == 2);
        }
    }

    #[test]
    fn transcript_json_roundtrip(seed in 0u64..50) {
        let mut t = Transcript::empty(format!("q{seed}"), "p");
        t.gold = Letter::from_index(seed as usize % 4);
        t.final_answer = if seed % 3 == 0 { Answer::Unparsed } else { Answer::Letter(Letter::from_index(1).unwrap()) };
        t.wall_seconds = seed as f64 * 0.37;
        let back = Transcript::from_json_line(&t.to_json_line().unwrap()).unwrap();
        prop_assert_eq!(back, t);
    }
}
