//! Domain types shared by every other module: questions, chat messages,
//! token usage, sampling parameters and protocol transcripts.
//!
//! All values are plain data. The only behavior here is validation and
//! (de)serialization.

use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Schema tag written into every persisted transcript line.
pub const TRANSCRIPT_SCHEMA: &str = "transcript/1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("option letters must be contiguous starting at A (found {found} at position {position})")]
    NonContiguousLetters { position: usize, found: Letter },
    #[error("gold answer {gold} is not one of the option letters")]
    GoldNotInOptions { gold: Letter },
    #[error("a question needs at least 2 options, got {0}")]
    TooFewOptions(usize),
    #[error("invalid letter {0:?}")]
    InvalidLetter(String),
    #[error("{field}: {reason}")]
    OutOfRange { field: &'static str, reason: String },
    #[error("transcript serialization failed: {0}")]
    SerializationFailure(String),
}

/// A capital option letter `A..=Z`, stored as its zero-based index.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Letter(u8);

impl Letter {
    pub const MAX_OPTIONS: usize = 26;

    pub fn from_index(index: usize) -> Option<Self> {
        (index < Self::MAX_OPTIONS).then_some(Letter(index as u8))
    }

    pub fn from_char(c: char) -> Option<Self> {
        c.is_ascii_uppercase().then(|| Letter(c as u8 - b'A'))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_char(self) -> char {
        (b'A' + self.0) as char
    }

    /// Letters `A..` for a question with `n` options.
    pub fn range(n: usize) -> impl Iterator<Item = Letter> {
        (0..n.min(Self::MAX_OPTIONS)).map(|i| Letter(i as u8))
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl fmt::Debug for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Letter({})", self.as_char())
    }
}

impl FromStr for Letter {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Letter::from_char(c).ok_or_else(|| ModelError::InvalidLetter(s.into())),
            _ => Err(ModelError::InvalidLetter(s.into())),
        }
    }
}

impl Serialize for Letter {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_char(self.as_char())
    }
}

impl<'de> Deserialize<'de> for Letter {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A parsed answer. `Unparsed` is a real value: it is stored, counted and
/// reported, never dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Answer {
    Letter(Letter),
    #[default]
    Unparsed,
}

impl Answer {
    pub fn letter(self) -> Option<Letter> {
        match self {
            Answer::Letter(l) => Some(l),
            Answer::Unparsed => None,
        }
    }

    pub fn is_parsed(self) -> bool {
        matches!(self, Answer::Letter(_))
    }

    pub fn is(self, gold: Letter) -> bool {
        self == Answer::Letter(gold)
    }
}

impl From<Letter> for Answer {
    fn from(l: Letter) -> Self {
        Answer::Letter(l)
    }
}

impl From<Option<Letter>> for Answer {
    fn from(l: Option<Letter>) -> Self {
        l.map_or(Answer::Unparsed, Answer::Letter)
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Letter(l) => write!(f, "{l}"),
            Answer::Unparsed => f.write_str("UNPARSED"),
        }
    }
}

impl Serialize for Answer {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Answer::Letter(l) => l.serialize(s),
            Answer::Unparsed => s.serialize_str("UNPARSED"),
        }
    }
}

impl<'de> Deserialize<'de> for Answer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "UNPARSED" {
            Ok(Answer::Unparsed)
        } else {
            s.parse().map(Answer::Letter).map_err(serde::de::Error::custom)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub letter: Letter,
    pub text: String,
}

/// One multiple-choice item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub stem: String,
    pub options: Vec<AnswerOption>,
    pub gold: Letter,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default)]
    pub dataset_tag: String,
}

impl Question {
    /// Builds a question from option texts, lettering them `A..` in order.
    pub fn new(
        id: impl Into<String>,
        stem: impl Into<String>,
        options: impl IntoIterator<Item = impl Into<String>>,
        gold: Letter,
    ) -> Self {
        let options = options
            .into_iter()
            .enumerate()
            .map(|(i, text)| AnswerOption {
                letter: Letter::from_index(i).expect("at most 26 options"),
                text: text.into(),
            })
            .collect();
        Question {
            id: id.into(),
            stem: stem.into(),
            options,
            gold,
            context: None,
            dataset_tag: String::new(),
        }
    }

    pub fn n_options(&self) -> usize {
        self.options.len()
    }

    pub fn option_text(&self, letter: Letter) -> Option<&str> {
        self.options.iter().find(|o| o.letter == letter).map(|o| o.text.as_str())
    }
}

pub fn validate_question(q: &Question) -> Result<(), ModelError> {
    if q.options.len() < 2 {
        return Err(ModelError::TooFewOptions(q.options.len()));
    }
    for (position, option) in q.options.iter().enumerate() {
        if option.letter.index() != position {
            return Err(ModelError::NonContiguousLetters { position, found: option.letter });
        }
    }
    if q.gold.index() >= q.options.len() {
        return Err(ModelError::GoldNotInOptions { gold: q.gold });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Usage { prompt_tokens, completion_tokens }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl Add for Usage {
    type Output = Usage;

    fn add(self, rhs: Usage) -> Usage {
        Usage {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
        }
    }
}

impl AddAssign for Usage {
    fn add_assign(&mut self, rhs: Usage) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for Usage {
    fn sum<I: Iterator<Item = Usage>>(iter: I) -> Usage {
        iter.fold(Usage::default(), Add::add)
    }
}

/// One chat message. Assistant messages produced by a backend carry the
/// call's usage, its latency and how many history messages were truncated
/// away before the call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub agent_id: String,
    pub round: u32,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub messages_removed: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_seconds: Option<f64>,
}

fn is_zero(n: &u32) -> bool {
    *n == 0
}

impl Message {
    pub fn new(role: Role, agent_id: impl Into<String>, round: u32, content: impl Into<String>) -> Self {
        Message {
            role,
            agent_id: agent_id.into(),
            round,
            content: content.into(),
            usage: None,
            messages_removed: 0,
            latency_seconds: None,
        }
    }

    pub fn system(agent_id: impl Into<String>, content: impl Into<String>) -> Self {
        Message::new(Role::System, agent_id, 0, content)
    }

    pub fn user(agent_id: impl Into<String>, round: u32, content: impl Into<String>) -> Self {
        Message::new(Role::User, agent_id, round, content)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams { temperature: 0.7, top_p: 1.0, max_tokens: 1024, seed: None }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ModelError::OutOfRange {
                field: "temperature",
                reason: format!("{} not in [0, 2]", self.temperature),
            });
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ModelError::OutOfRange {
                field: "top_p",
                reason: format!("{} not in (0, 1]", self.top_p),
            });
        }
        if self.max_tokens == 0 {
            return Err(ModelError::OutOfRange { field: "max_tokens", reason: "must be > 0".into() });
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub name: String,
    pub system_template_id: String,
    pub sampling: SamplingParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement_intensity: Option<u8>,
}

impl AgentSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.sampling.validate()?;
        if let Some(x) = self.agreement_intensity {
            if x > 100 {
                return Err(ModelError::OutOfRange {
                    field: "agreement_intensity",
                    reason: format!("{x} not in [0, 100]"),
                });
            }
        }
        Ok(())
    }
}

/// What a participant does in a protocol run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticipantKind {
    /// Answers the question (single agent, debater, sample, ensemble member).
    Answerer,
    Judge,
    Summarizer,
    /// Ensemble-refinement second stage: reads every first-stage reasoning.
    Aggregator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub id: String,
    pub kind: ParticipantKind,
    /// Digest of the participant's system prompt, if it has one. Lets
    /// transcripts show whether agents were prompted asymmetrically.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_digest: Option<String>,
    /// Debating stance for protocols that assign one (e.g. affirmative).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    Universal,
    Final,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRecord {
    pub mode: JudgeMode,
    pub preference: Option<bool>,
    pub supported_side: Option<String>,
    pub debate_answer: Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub messages: Vec<Message>,
    /// Parsed answer of every answering participant that spoke this round.
    pub answers: IndexMap<String, Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeRecord>,
}

impl RoundRecord {
    pub fn new(round: u32) -> Self {
        RoundRecord { round, messages: Vec::new(), answers: IndexMap::new(), judge: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallFailure {
    pub round: u32,
    pub agent_id: String,
    pub error: String,
}

/// Complete record of one protocol run on one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub schema: String,
    pub question_id: String,
    pub protocol_name: String,
    pub config_digest: String,
    #[serde(default)]
    pub model_id: String,
    pub participants: Vec<Participant>,
    /// Round-0 system and setup messages.
    #[serde(default)]
    pub setup: Vec<Message>,
    pub rounds: Vec<RoundRecord>,
    pub final_answer: Answer,
    pub per_agent_final: IndexMap<String, Answer>,
    pub wall_seconds: f64,
    pub api_calls: u64,
    pub total_usage: Usage,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<CallFailure>,
    /// Set when the run as a whole failed; the question then counts as
    /// answered incorrectly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Attached by the experiment runner after orchestration finishes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Letter>,
}

impl Transcript {
    pub fn empty(question_id: impl Into<String>, protocol_name: impl Into<String>) -> Self {
        Transcript {
            schema: TRANSCRIPT_SCHEMA.to_string(),
            question_id: question_id.into(),
            protocol_name: protocol_name.into(),
            config_digest: String::new(),
            model_id: String::new(),
            participants: Vec::new(),
            setup: Vec::new(),
            rounds: Vec::new(),
            final_answer: Answer::Unparsed,
            per_agent_final: IndexMap::new(),
            wall_seconds: 0.0,
            api_calls: 0,
            total_usage: Usage::default(),
            failures: Vec::new(),
            error: None,
            gold: None,
        }
    }

    pub fn all_messages(&self) -> impl Iterator<Item = &Message> {
        self.setup.iter().chain(self.rounds.iter().flat_map(|r| r.messages.iter()))
    }

    /// Assistant messages, i.e. one per successful backend call.
    pub fn calls(&self) -> impl Iterator<Item = &Message> {
        self.all_messages().filter(|m| m.role == Role::Assistant)
    }

    pub fn answerers(&self) -> impl Iterator<Item = &Participant> {
        self.participants.iter().filter(|p| p.kind == ParticipantKind::Answerer)
    }

    pub fn verdict(&self, gold: Letter) -> Verdict {
        Verdict {
            answer: self.final_answer,
            consensus_fraction: consensus_fraction(self.per_agent_final.values().copied()),
            correct: self.final_answer.is(gold),
        }
    }

    pub fn to_json_line(&self) -> Result<String, ModelError> {
        serde_json::to_string(self).map_err(|e| ModelError::SerializationFailure(e.to_string()))
    }

    pub fn from_json_line(line: &str) -> Result<Self, ModelError> {
        let t: Transcript =
            serde_json::from_str(line).map_err(|e| ModelError::SerializationFailure(e.to_string()))?;
        if t.schema != TRANSCRIPT_SCHEMA {
            return Err(ModelError::SerializationFailure(format!("unsupported schema {:?}", t.schema)));
        }
        Ok(t)
    }
}

/// Serialize then deserialize; equal to the input for any valid transcript.
pub fn transcript_roundtrip(t: &Transcript) -> Result<Transcript, ModelError> {
    Transcript::from_json_line(&t.to_json_line()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub answer: Answer,
    pub consensus_fraction: f64,
    pub correct: bool,
}

/// Count of the most common parsed answer divided by the number of agents
/// (parsed or not). Zero agents gives zero.
pub fn consensus_fraction(answers: impl IntoIterator<Item = Answer>) -> f64 {
    let mut counts = [0usize; Letter::MAX_OPTIONS];
    let mut agents = 0usize;
    for a in answers {
        agents += 1;
        if let Answer::Letter(l) = a {
            counts[l.index()] += 1;
        }
    }
    if agents == 0 {
        return 0.0;
    }
    *counts.iter().max().unwrap_or(&0) as f64 / agents as f64
}
