//! Turning model text into answers.
//!
//! [`extract_letter`] applies three ordered rules; within a rule the last
//! in-range match wins, and the first rule that yields an in-range letter
//! decides. Matches outside the question's option range are ignored, so
//! the result is always a valid option or `Unparsed`.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{Answer, AnswerOption, JudgeMode, Letter, Question};

pub const RULE_ANSWER_PHRASE: &str = "answer_phrase";
pub const RULE_PARENTHESIZED: &str = "parenthesized";
pub const RULE_FINAL_LINE: &str = "final_line_letter";
pub const RULE_NONE: &str = "none";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub value: Answer,
    /// Character (not byte) offsets of the matched letter.
    pub matched_span: Option<(usize, usize)>,
    pub rule_id: String,
}

impl ParsedAnswer {
    fn unparsed() -> Self {
        ParsedAnswer { value: Answer::Unparsed, matched_span: None, rule_id: RULE_NONE.to_string() }
    }
}

fn answer_phrase_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // "answer is X", "answer is: (X)", "Answer: X", "Final answer: **X**"
    RE.get_or_init(|| {
        Regex::new(r"(?i:answer)(?:\s+(?i:is))?\s*:?\s*[*_]*\s*\(?\s*([A-Z])\b").unwrap()
    })
}

fn parenthesized_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([A-Z])\)").unwrap())
}

fn final_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[\s*_(\[]*([A-Z])[\s*_)\].:]*$").unwrap())
}

pub fn extract_letter(text: &str, n_options: usize) -> ParsedAnswer {
    let in_range = |c: char| Letter::from_char(c).filter(|l| l.index() < n_options);

    let last_match = |re: &Regex, haystack: &str, offset: usize| {
        re.captures_iter(haystack)
            .filter_map(|caps| {
                let m = caps.get(1)?;
                let letter = in_range(m.as_str().chars().next()?)?;
                Some((letter, offset + m.start(), offset + m.end()))
            })
            .last()
    };

    let rules: [(&str, Option<(Letter, usize, usize)>); 2] = [
        (RULE_ANSWER_PHRASE, last_match(answer_phrase_re(), text, 0)),
        (RULE_PARENTHESIZED, last_match(parenthesized_re(), text, 0)),
    ];
    for (rule, hit) in rules {
        if let Some((letter, start, end)) = hit {
            return found(text, letter, start, end, rule);
        }
    }

    if let Some(line) = text.lines().rev().find(|l| !l.trim().is_empty()) {
        let offset = line.as_ptr() as usize - text.as_ptr() as usize;
        if let Some((letter, start, end)) = last_match(final_line_re(), line, offset) {
            return found(text, letter, start, end, RULE_FINAL_LINE);
        }
    }
    ParsedAnswer::unparsed()
}

fn found(text: &str, letter: Letter, start: usize, end: usize, rule: &str) -> ParsedAnswer {
    let char_start = text[..start].chars().count();
    let char_end = char_start + text[start..end].chars().count();
    ParsedAnswer {
        value: Answer::Letter(letter),
        matched_span: Some((char_start, char_end)),
        rule_id: rule.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub preference: Option<bool>,
    pub side: Option<String>,
    pub debate_answer: Answer,
}

pub const KEY_PREFERENCE: &str = "Whether there is a preference";
pub const KEY_SIDE: &str = "Supported Side";
pub const KEY_ANSWER: &str = "debate_answer";

/// Reads the moderator's JSON verdict. Never fails: malformed output means
/// no preference and an unparsed answer, so the debate simply continues.
pub fn parse_judge_verdict(text: &str, mode: JudgeMode, n_options: usize) -> JudgeVerdict {
    let mut verdict = JudgeVerdict { preference: None, side: None, debate_answer: Answer::Unparsed };
    let as_object = |t: &str| match first_balanced_block(t).map(serde_json::from_str::<serde_json::Value>) {
        Some(Ok(serde_json::Value::Object(map))) => Some(map),
        _ => None,
    };
    let Some(map) = as_object(text).or_else(|| as_object(&text.replace("\\\"", "\""))) else {
        return verdict;
    };

    let field = |key: &str| {
        map.iter()
            .find(|(k, _)| k.trim() == key)
            .and_then(|(_, v)| v.as_str().map(|s| s.trim().to_string()))
    };

    if mode == JudgeMode::Universal {
        verdict.preference = field(KEY_PREFERENCE).and_then(|v| match v.to_ascii_lowercase().as_str() {
            "yes" => Some(true),
            "no" => Some(false),
            _ => None,
        });
    }
    verdict.side = field(KEY_SIDE).filter(|s| !s.is_empty());
    verdict.debate_answer = field(KEY_ANSWER).map_or(Answer::Unparsed, |v| extract_letter(&v, n_options).value);
    verdict
}

/// The first `{...}` block with balanced braces, honoring JSON string
/// literals and escapes.
fn first_balanced_block(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// A relabeling of a question's options. `forward[i]` is the new letter of
/// the option originally lettered `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoicePermutation {
    pub forward: Vec<Letter>,
    pub seed: u64,
}

impl ChoicePermutation {
    pub fn identity(n: usize) -> Self {
        ChoicePermutation { forward: Letter::range(n).collect(), seed: 0 }
    }

    /// Seed 0 is the identity; any other seed is a seeded uniform shuffle.
    pub fn from_seed(n: usize, seed: u64) -> Self {
        let mut forward: Vec<Letter> = Letter::range(n).collect();
        if seed != 0 {
            forward.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        ChoicePermutation { forward, seed }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn apply(&self, original: Letter) -> Letter {
        self.forward[original.index()]
    }

    pub fn invert(&self, permuted: Letter) -> Letter {
        let i = self.forward.iter().position(|&l| l == permuted).expect("letter within permutation range");
        Letter::from_index(i).unwrap()
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, l)| l.index() == i)
    }
}

pub fn permute_question(q: &Question, seed: u64) -> (Question, ChoicePermutation) {
    let perm = ChoicePermutation::from_seed(q.options.len(), seed);
    let mut options: Vec<Option<AnswerOption>> = vec![None; q.options.len()];
    for option in &q.options {
        let letter = perm.apply(option.letter);
        options[letter.index()] = Some(AnswerOption { letter, text: option.text.clone() });
    }
    let permuted = Question {
        options: options.into_iter().map(|o| o.expect("permutation is a bijection")).collect(),
        gold: perm.apply(q.gold),
        ..q.clone()
    };
    (permuted, perm)
}

pub fn unmap_answer(answer: Answer, perm: &ChoicePermutation) -> Answer {
    match answer {
        Answer::Letter(l) if l.index() < perm.len() => Answer::Letter(perm.invert(l)),
        _ => Answer::Unparsed,
    }
}
