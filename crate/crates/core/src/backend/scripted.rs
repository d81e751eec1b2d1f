//! A deterministic stand-in for a language model.
//!
//! Each agent answers correctly with probability `p`, and when it can see
//! peer answers it echoes their majority with probability `a`. Replies are
//! pure functions of the request and the model seed, so runs are
//! reproducible regardless of scheduling. The backend recognizes the
//! question by its rendered option block and looks the correct option up by
//! text in an [`AnswerKey`], which keeps it correct under option shuffling.

use std::collections::HashMap;
use std::sync::OnceLock;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{estimate_message_tokens, estimate_tokens, BackendError, ChatBackend, Completion, CompletionRequest};
use crate::model::{Letter, Question, Role, Usage};
use crate::parsing::{KEY_PREFERENCE, KEY_SIDE};
use crate::prompts::injected_agreement;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedAgentModel {
    /// Probability of answering correctly when not echoing peers.
    #[serde(alias = "accuracy")]
    pub p: f64,
    /// Probability of echoing the peers' majority when peers are visible.
    #[serde(alias = "agreement")]
    pub a: f64,
    /// A model that is not persuadable never echoes.
    #[serde(default = "yes")]
    pub persuadable: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl ScriptedAgentModel {
    pub fn new(p: f64, a: f64) -> Self {
        ScriptedAgentModel { p, a, persuadable: true, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        for (name, v) in [("p", self.p), ("a", self.a)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(BackendError::Config(format!("scripted {name}={v} not in [0, 1]")));
            }
        }
        Ok(())
    }
}

impl Default for ScriptedAgentModel {
    fn default() -> Self {
        ScriptedAgentModel::new(0.6, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EchoBranch {
    Echo,
    Own,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedReply {
    pub letter: Letter,
    pub branch: EchoBranch,
    pub text: String,
}

fn reply_text(speaker: &str, nonce: u32, letter: Letter) -> String {
    format!("[scripted {speaker} {nonce:08x}] Answer: {letter}")
}

fn reply_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[scripted (\S+) [0-9a-f]{8}\] Answer: ([A-Z])").unwrap())
}

/// Majority letter, ties broken towards the alphabetically smallest.
fn majority(letters: &[Letter]) -> Option<Letter> {
    let mut counts = [0usize; Letter::MAX_OPTIONS];
    for l in letters {
        counts[l.index()] += 1;
    }
    let best = *counts.iter().max()?;
    (best > 0).then(|| Letter::from_index(counts.iter().position(|&c| c == best).unwrap()).unwrap())
}

fn respond(
    model: &ScriptedAgentModel,
    gold: Option<Letter>,
    n_options: usize,
    peers: &[Letter],
    speaker: &str,
    rng: &mut ChaCha8Rng,
) -> ScriptedReply {
    let u_echo: f64 = rng.gen();
    let u_correct: f64 = rng.gen();
    let pick: usize = rng.gen_range(0..n_options.max(2) - 1);
    let nonce: u32 = rng.gen();

    let echoed = if model.persuadable && u_echo < model.a { majority(peers) } else { None };
    let (letter, branch) = match echoed {
        Some(l) => (l, EchoBranch::Echo),
        None => {
            let letter = match gold {
                Some(g) if u_correct < model.p => g,
                Some(g) => {
                    // uniform over the wrong letters
                    let i = if pick >= g.index() { pick + 1 } else { pick };
                    Letter::from_index(i).unwrap()
                }
                None => Letter::from_index(rng.gen_range(0..n_options.max(1))).unwrap(),
            };
            (letter, EchoBranch::Own)
        }
    };
    ScriptedReply { letter, branch, text: reply_text(speaker, nonce, letter) }
}

/// The scripted answer of `model` to `question` when it can see
/// `visible_peer_answers`. Randomness is derived from the model seed and
/// the question id.
pub fn scripted_respond(model: &ScriptedAgentModel, question: &Question, visible_peer_answers: &[Letter]) -> ScriptedReply {
    let mut h = Sha256::new();
    h.update(model.seed.to_le_bytes());
    h.update(question.id.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    respond(model, Some(question.gold), question.options.len(), visible_peer_answers, "agent", &mut rng)
}

fn normalize_option(text: &str) -> String {
    text.replace('\n', " ").trim().trim_end_matches('.').trim_end().to_string()
}

fn options_key(options: impl IntoIterator<Item = String>) -> String {
    let mut opts: Vec<String> = options.into_iter().collect();
    opts.sort();
    opts.join("\u{1f}")
}

/// Correct option text for each known question. Questions are found by
/// their option texts; the stem's last line must end the line printed
/// above the options, since templates may prefix it (`Input: ...`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnswerKey {
    entries: HashMap<String, Vec<(String, String)>>,
}

impl AnswerKey {
    pub fn from_questions<'a>(questions: impl IntoIterator<Item = &'a Question>) -> Self {
        let mut key = AnswerKey::default();
        for q in questions {
            key.insert(q);
        }
        key
    }

    pub fn insert(&mut self, q: &Question) {
        let stem_line = q.stem.trim_end().lines().last().unwrap_or("").trim().to_string();
        let k = options_key(q.options.iter().map(|o| normalize_option(&o.text)));
        if let Some(text) = q.option_text(q.gold) {
            let slot = self.entries.entry(k).or_default();
            slot.retain(|(s, _)| *s != stem_line);
            slot.push((stem_line, normalize_option(text)));
        }
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn gold_for(&self, block: &OptionBlock) -> Option<Letter> {
        let candidates = self.entries.get(&options_key(block.options.iter().cloned()))?;
        let (_, correct) = candidates
            .iter()
            .filter(|(stem, _)| block.stem_line.ends_with(stem.as_str()))
            .max_by_key(|(stem, _)| stem.len())?;
        block.options.iter().position(|o| o == correct).and_then(Letter::from_index)
    }
}

/// A rendered question as seen inside a prompt.
#[derive(Debug, Clone, PartialEq)]
struct OptionBlock {
    stem_line: String,
    options: Vec<String>,
}

fn option_line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([A-Z])\) (.*)$").unwrap())
}

/// The last lettered option block in `text`.
fn last_option_block(text: &str) -> Option<OptionBlock> {
    let lines: Vec<&str> = text.lines().collect();
    let mut found = None;
    let mut i = 0;
    while i < lines.len() {
        let starts = option_line_regex().captures(lines[i]).is_some_and(|c| &c[1] == "A");
        if !starts {
            i += 1;
            continue;
        }
        let stem_line = lines[..i].iter().rev().find(|l| !l.trim().is_empty()).map_or("", |l| l.trim());
        let mut options = Vec::new();
        let mut j = i;
        while j < lines.len() {
            match option_line_regex().captures(lines[j]) {
                Some(c) if Letter::from_char(c[1].chars().next().unwrap()).map(Letter::index) == Some(options.len()) => {
                    options.push(normalize_option(&c[2]));
                    j += 1;
                }
                _ => break,
            }
        }
        if options.len() >= 2 {
            found = Some(OptionBlock { stem_line: stem_line.to_string(), options });
        }
        i = j.max(i + 1);
    }
    found
}

fn find_question(req: &CompletionRequest) -> Option<OptionBlock> {
    req.messages.iter().find_map(|m| last_option_block(&m.content))
}

/// Latest scripted answer of every speaker quoted in `text`, in order of
/// first appearance.
fn quoted_answers(text: &str) -> IndexMap<String, Letter> {
    let mut out = IndexMap::new();
    for c in reply_regex().captures_iter(text) {
        let letter = Letter::from_char(c[2].chars().next().unwrap()).unwrap();
        let speaker = c[1].to_string();
        match out.get_mut(&speaker) {
            Some(slot) => *slot = letter,
            None => {
                out.insert(speaker, letter);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JudgeSide {
    Affirmative,
    Negative,
}

/// How a scripted moderator behaves: it states a preference from round
/// `prefer_from_round` on (never if absent) and always backs `pick`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeScript {
    #[serde(default)]
    pub prefer_from_round: Option<u32>,
    #[serde(default = "affirmative")]
    pub pick: JudgeSide,
}

fn affirmative() -> JudgeSide {
    JudgeSide::Affirmative
}

impl Default for JudgeScript {
    fn default() -> Self {
        JudgeScript { prefer_from_round: None, pick: JudgeSide::Affirmative }
    }
}

fn default_seconds_per_token() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedConfig {
    #[serde(default)]
    pub default_agent: ScriptedAgentModel,
    /// Per-agent overrides keyed by agent id.
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub agents: IndexMap<String, ScriptedAgentModel>,
    #[serde(default)]
    pub judge: JudgeScript,
    /// Synthetic latency charged per completion token.
    #[serde(default = "default_seconds_per_token")]
    pub seconds_per_token: f64,
}

impl Default for ScriptedConfig {
    fn default() -> Self {
        ScriptedConfig {
            default_agent: ScriptedAgentModel::default(),
            agents: IndexMap::new(),
            judge: JudgeScript::default(),
            seconds_per_token: default_seconds_per_token(),
        }
    }
}

impl ScriptedConfig {
    pub fn uniform(model: ScriptedAgentModel) -> Self {
        ScriptedConfig { default_agent: model, ..ScriptedConfig::default() }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        self.default_agent.validate()?;
        for m in self.agents.values() {
            m.validate()?;
        }
        if !(self.seconds_per_token >= 0.0) {
            return Err(BackendError::Config("seconds_per_token must be non-negative".into()));
        }
        Ok(())
    }
}

enum Persona {
    Answerer,
    Judge { universal: bool },
    Summarizer,
}

fn persona(req: &CompletionRequest) -> Persona {
    let system = req.messages.first().filter(|m| m.role == Role::System).map_or("", |m| m.content.as_str());
    let last = req.messages.last().map_or("", |m| m.content.as_str());
    if system.contains("You are a summarizer") || last.contains("carefully provide a summary") {
        Persona::Summarizer
    } else if last.contains(KEY_PREFERENCE) {
        Persona::Judge { universal: true }
    } else if last.contains(KEY_SIDE) {
        Persona::Judge { universal: false }
    } else {
        Persona::Answerer
    }
}

pub struct ScriptedBackend {
    config: ScriptedConfig,
    key: AnswerKey,
}

impl ScriptedBackend {
    pub fn new(config: ScriptedConfig, key: AnswerKey) -> Result<Self, BackendError> {
        config.validate()?;
        Ok(ScriptedBackend { config, key })
    }

    pub fn config(&self) -> &ScriptedConfig {
        &self.config
    }

    fn model_for(&self, req: &CompletionRequest) -> ScriptedAgentModel {
        let mut model = *self.config.agents.get(req.agent_id()).unwrap_or(&self.config.default_agent);
        let system = req.messages.first().filter(|m| m.role == Role::System);
        if let Some(x) = system.and_then(|m| injected_agreement(&m.content)) {
            model.a = f64::from(x.min(100)) / 100.0;
        }
        model
    }

    fn rng_for(&self, model: &ScriptedAgentModel, req: &CompletionRequest) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(model.seed.to_le_bytes());
        h.update(req.digest().as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn answer(&self, req: &CompletionRequest) -> String {
        let model = self.model_for(req);
        let mut rng = self.rng_for(&model, req);
        let block = find_question(req);
        let n_options = block.as_ref().map_or(4, |b| b.options.len());
        let gold = block.as_ref().and_then(|b| self.key.gold_for(b));
        if gold.is_none() {
            log::debug!("scripted backend does not know the question; answering at random");
        }
        let me = req.agent_id();
        let latest_user = req.messages.iter().rev().find(|m| m.role == Role::User).map_or("", |m| m.content.as_str());
        let peers: Vec<Letter> =
            quoted_answers(latest_user).into_iter().filter(|(who, _)| who != me).map(|(_, l)| l).collect();
        respond(&model, gold, n_options, &peers, me, &mut rng).text
    }

    fn judge(&self, req: &CompletionRequest, universal: bool) -> String {
        let round = 1 + req.messages.iter().filter(|m| m.role == Role::Assistant).count() as u32;
        let latest = req.messages.last().map_or("", |m| m.content.as_str());
        let sides: Vec<Letter> = quoted_answers(latest).into_values().collect();
        let script = self.config.judge;
        let (side, answer) = match script.pick {
            JudgeSide::Affirmative => ("Affirmative", sides.first()),
            JudgeSide::Negative => ("Negative", sides.get(1).or(sides.first())),
        };
        let answer = answer.map(|l| l.to_string()).unwrap_or_default();
        let reason = format!("scripted verdict for round {round}");
        if universal {
            let prefer = script.prefer_from_round.is_some_and(|r| round >= r);
            serde_json::json!({
                KEY_PREFERENCE: if prefer { "Yes" } else { "No" },
                KEY_SIDE: side,
                "Reason": reason,
                "debate_answer": answer,
            })
            .to_string()
        } else {
            serde_json::json!({KEY_SIDE: side, "Reason": reason, "debate_answer": answer}).to_string()
        }
    }

    fn summarize(&self, req: &CompletionRequest) -> String {
        let latest = req.messages.last().map_or("", |m| m.content.as_str());
        let mut out = String::from("Summary of the positions so far:");
        for c in reply_regex().captures_iter(latest) {
            out.push('\n');
            out.push_str(&c[0]);
        }
        out
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        req.validate()?;
        let text = match persona(req) {
            Persona::Answerer => self.answer(req),
            Persona::Judge { universal } => self.judge(req, universal),
            Persona::Summarizer => self.summarize(req),
        };
        let usage = Usage::new(estimate_message_tokens(&req.messages), estimate_tokens(&text));
        let latency_seconds = usage.completion_tokens as f64 * self.config.seconds_per_token;
        Ok(Completion { text, usage, latency_seconds })
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Answers every question with the option whose text hashes lowest, so
/// the chosen option text never depends on how the options are ordered.
#[derive(Debug, Clone, Default)]
pub struct OptionTextBackend;

impl ChatBackend for OptionTextBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        req.validate()?;
        let block = find_question(req).ok_or_else(|| BackendError::InvalidRequest("no lettered options".into()))?;
        let best = block
            .options
            .iter()
            .enumerate()
            .min_by_key(|(_, text)| Sha256::digest(format!("{}\u{1f}{}", block.stem_line, text)))
            .map(|(i, _)| Letter::from_index(i).unwrap())
            .unwrap();
        let text = reply_text(req.agent_id(), 0, best);
        let usage = Usage::new(estimate_message_tokens(&req.messages), estimate_tokens(&text));
        Ok(Completion { text, usage, latency_seconds: 0.0 })
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}
