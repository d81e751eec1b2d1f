//! Debate- and agent-level metrics computed from transcripts, experiment
//! summaries, the first-agent improvement analysis and k-fold
//! configuration selection.
//!
//! Definitions, for one transcript and one answering agent:
//!
//! * an agent's *answers* are its parsed answers in round order, one per
//!   round it answered in; its *final* answer is the last of them;
//! * *changed* means its answers take at least two distinct values;
//! * *relied on other*: its parsed final answer equals an answer another
//!   agent gave in a round strictly before the agent's final round;
//! * *bullied by other* counts the rounds in which the agent moved from a
//!   correct answer to an incorrect parsed one that another agent had given
//!   in an earlier round.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{cost_of, PriceError, PriceTable};
use crate::model::{Answer, Letter, Message, ParticipantKind, Transcript};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("transcript {0} has no gold answer attached")]
    MissingGold(String),
    #[error(transparent)]
    Price(#[from] PriceError),
    #[error("no transcripts to summarize")]
    Empty,
    #[error("accuracy table has no entry for config {config:?} on dataset {dataset:?}")]
    IncompleteTable { config: String, dataset: String },
    #[error("k-fold selection needs at least two datasets in the group, got {0}")]
    GroupTooSmall(usize),
    #[error("csv error: {0}")]
    Csv(String),
}

/// Agents whose answers are scored: answerers and aggregators.
fn scored_agents(t: &Transcript) -> Vec<String> {
    let mut ids: Vec<String> = t
        .participants
        .iter()
        .filter(|p| matches!(p.kind, ParticipantKind::Answerer | ParticipantKind::Aggregator))
        .map(|p| p.id.clone())
        .collect();
    for r in &t.rounds {
        for id in r.answers.keys() {
            if !ids.contains(id) {
                ids.push(id.clone());
            }
        }
    }
    ids
}

/// `(round, answer)` pairs of one agent in round order.
fn answers_of(t: &Transcript, agent: &str) -> Vec<(u32, Answer)> {
    t.rounds.iter().filter_map(|r| r.answers.get(agent).map(|a| (r.round, *a))).collect()
}

fn distinct(answers: impl IntoIterator<Item = Answer>) -> usize {
    answers.into_iter().collect::<BTreeSet<_>>().len()
}

fn modal_count(answers: &[Answer]) -> usize {
    let mut counts = [0usize; Letter::MAX_OPTIONS];
    for a in answers {
        if let Answer::Letter(l) = a {
            counts[l.index()] += 1;
        }
    }
    counts.into_iter().max().unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DebateMetrics {
    pub final_round_consensus: f64,
    pub final_round_correctly_parsed_consensus: f64,
    pub any_correct_answer: f64,
    pub how_many_agents_changed: f64,
    pub how_many_agents_changed_correctly_parsed: f64,
    pub number_of_rounds: f64,
    pub unique_first_answers: f64,
    pub unique_first_correctly_parsed_answers: f64,
}

impl DebateMetrics {
    pub const NAMES: [&'static str; 8] = [
        "final_round_consensus",
        "final_round_correctly_parsed_consensus",
        "any_correct_answer",
        "how_many_agents_changed",
        "how_many_agents_changed_correctly_parsed",
        "number_of_rounds",
        "unique_first_answers",
        "unique_first_correctly_parsed_answers",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.final_round_consensus,
            self.final_round_correctly_parsed_consensus,
            self.any_correct_answer,
            self.how_many_agents_changed,
            self.how_many_agents_changed_correctly_parsed,
            self.number_of_rounds,
            self.unique_first_answers,
            self.unique_first_correctly_parsed_answers,
        ]
    }

    pub fn to_map(&self) -> IndexMap<&'static str, f64> {
        Self::NAMES.into_iter().zip(self.values()).collect()
    }
}

/// Consensus counts over the agents that answered in the final round.
/// With no parsed answers the correctly-parsed consensus is 0.
pub fn debate_metrics(t: &Transcript, gold: Letter) -> DebateMetrics {
    let agents = scored_agents(t);
    let final_answers: Vec<Answer> = t.rounds.last().map(|r| r.answers.values().copied().collect()).unwrap_or_default();
    let parsed: Vec<Answer> = final_answers.iter().copied().filter(|a| a.is_parsed()).collect();
    let modal = modal_count(&final_answers);
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };

    let per_agent: Vec<Vec<Answer>> =
        agents.iter().map(|a| answers_of(t, a).into_iter().map(|(_, x)| x).collect()).collect();
    let changed = per_agent.iter().filter(|xs| distinct(xs.iter().copied()) > 1).count();
    let changed_parsed = per_agent
        .iter()
        .filter(|xs| !xs.is_empty() && xs.iter().all(|a| a.is_parsed()) && distinct(xs.iter().copied()) > 1)
        .count();
    let firsts: Vec<Answer> = per_agent.iter().filter_map(|xs| xs.first().copied()).collect();

    DebateMetrics {
        final_round_consensus: ratio(modal, final_answers.len()),
        final_round_correctly_parsed_consensus: ratio(modal, parsed.len()),
        any_correct_answer: if per_agent.iter().flatten().any(|a| a.is(gold)) { 1.0 } else { 0.0 },
        how_many_agents_changed: changed as f64,
        how_many_agents_changed_correctly_parsed: changed_parsed as f64,
        number_of_rounds: t.rounds.len() as f64,
        unique_first_answers: distinct(firsts.iter().copied()) as f64,
        unique_first_correctly_parsed_answers: distinct(firsts.iter().copied().filter(|a| a.is_parsed())) as f64,
    }
}

/// Whether the agent's final answer was taken from another agent's earlier
/// round.
pub fn relied_on_other(t: &Transcript, agent: &str) -> bool {
    let mine = answers_of(t, agent);
    let Some(&(final_round, Answer::Letter(final_letter))) = mine.last() else {
        return false;
    };
    t.rounds
        .iter()
        .filter(|r| r.round < final_round)
        .any(|r| r.answers.iter().any(|(who, a)| who != agent && a.letter() == Some(final_letter)))
}

/// Number of rounds in which the agent abandoned a correct answer for an
/// incorrect one another agent had given earlier.
pub fn bullied_by_other(t: &Transcript, agent: &str, gold: Letter) -> u32 {
    let mine = answers_of(t, agent);
    let mut count = 0;
    for pair in mine.windows(2) {
        let ((_, before), (round, after)) = (pair[0], pair[1]);
        let Answer::Letter(now) = after else { continue };
        if !before.is(gold) || now == gold {
            continue;
        }
        let copied = t
            .rounds
            .iter()
            .filter(|r| r.round < round)
            .any(|r| r.answers.iter().any(|(who, a)| who != agent && a.letter() == Some(now)));
        count += u32::from(copied);
    }
    count
}

/// Per-question values of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentQuestionMetrics {
    pub agent: String,
    pub answered_correctly: bool,
    pub changed_answer: bool,
    pub first_correct_round: Option<u32>,
    pub num_correct_rounds: u32,
    pub rounds_answered: u32,
    pub relied_on_other: bool,
    pub bullied_by_other: u32,
    pub calls: u32,
    pub prompt_tokens: u64,
    pub response_tokens: u64,
    pub response_chars: u64,
    pub messages_removed: u64,
    pub cost_usd: f64,
    pub seconds: f64,
    pub incorrectly_parsed_final_answer: bool,
    pub any_incorrectly_parsed_answer: bool,
    pub number_of_answers: u32,
}

fn agent_calls<'a>(t: &'a Transcript, agent: &'a str) -> impl Iterator<Item = &'a Message> + 'a {
    t.calls().filter(move |m| m.agent_id == agent)
}

pub fn agent_question_metrics(
    t: &Transcript,
    agent: &str,
    gold: Letter,
    prices: &PriceTable,
) -> Result<AgentQuestionMetrics, MetricsError> {
    let answers = answers_of(t, agent);
    let values: Vec<Answer> = answers.iter().map(|(_, a)| *a).collect();
    let final_answer = values.last().copied().unwrap_or(Answer::Unparsed);
    let mut m = AgentQuestionMetrics {
        agent: agent.to_string(),
        answered_correctly: final_answer.is(gold),
        changed_answer: distinct(values.iter().copied()) > 1,
        first_correct_round: answers.iter().find(|(_, a)| a.is(gold)).map(|(r, _)| *r),
        num_correct_rounds: values.iter().filter(|a| a.is(gold)).count() as u32,
        rounds_answered: values.len() as u32,
        relied_on_other: relied_on_other(t, agent),
        bullied_by_other: bullied_by_other(t, agent, gold),
        calls: 0,
        prompt_tokens: 0,
        response_tokens: 0,
        response_chars: 0,
        messages_removed: 0,
        cost_usd: 0.0,
        seconds: 0.0,
        incorrectly_parsed_final_answer: !final_answer.is_parsed(),
        any_incorrectly_parsed_answer: values.is_empty() || values.iter().any(|a| !a.is_parsed()),
        number_of_answers: distinct(values.iter().copied()) as u32,
    };
    for call in agent_calls(t, agent) {
        let usage = call.usage.unwrap_or_default();
        m.calls += 1;
        m.prompt_tokens += usage.prompt_tokens;
        m.response_tokens += usage.completion_tokens;
        m.response_chars += call.content.chars().count() as u64;
        m.messages_removed += u64::from(call.messages_removed);
        m.cost_usd += cost_of(usage, &t.model_id, prices)?;
        m.seconds += call.latency_seconds.unwrap_or(0.0);
    }
    Ok(m)
}

/// Aggregate agent metrics over the questions an agent took part in.
/// Rates are fractions in [0, 1]; "when correct" values average over the
/// questions in which the agent gave the correct answer at least once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentReport {
    pub agent_name: String,
    pub agent_engine: String,
    pub questions: u64,
    pub answered_correctly: f64,
    pub any_incorrectly_parsed_answer: f64,
    pub avg_messages_removed: f64,
    pub avg_prompt_tokens: f64,
    pub avg_response_length: f64,
    pub avg_response_tokens: f64,
    pub avg_round_cost: f64,
    pub bullied_by_other: f64,
    pub changed_answer: f64,
    pub cost_per_question: f64,
    pub first_correct_round_when_correct: f64,
    pub incorrectly_parsed_final_answer: f64,
    pub num_correct_rounds_when_correct: f64,
    pub number_of_answers: f64,
    pub percentage_of_correct_rounds_when_correct: f64,
    pub relied_on_other: f64,
    pub time_per_question: f64,
    pub total_prompt_tokens: u64,
    pub total_response_tokens: u64,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut sum = 0.0;
    for x in xs {
        n += 1;
        sum += x;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn per(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn report_from(name: &str, engine: &str, rows: &[AgentQuestionMetrics]) -> AgentReport {
    let b = |x: bool| if x { 1.0 } else { 0.0 };
    let calls: u64 = rows.iter().map(|r| u64::from(r.calls)).sum();
    let rounds: u64 = rows.iter().map(|r| u64::from(r.rounds_answered)).sum();
    let total_prompt: u64 = rows.iter().map(|r| r.prompt_tokens).sum();
    let total_response: u64 = rows.iter().map(|r| r.response_tokens).sum();
    let chars: u64 = rows.iter().map(|r| r.response_chars).sum();
    let removed: u64 = rows.iter().map(|r| r.messages_removed).sum();
    let cost: f64 = rows.iter().map(|r| r.cost_usd).sum();
    let seconds: f64 = rows.iter().map(|r| r.seconds).sum();
    let when_correct: Vec<&AgentQuestionMetrics> = rows.iter().filter(|r| r.first_correct_round.is_some()).collect();
    AgentReport {
        agent_name: name.to_string(),
        agent_engine: engine.to_string(),
        questions: rows.len() as u64,
        answered_correctly: mean(rows.iter().map(|r| b(r.answered_correctly))),
        any_incorrectly_parsed_answer: mean(rows.iter().map(|r| b(r.any_incorrectly_parsed_answer))),
        avg_messages_removed: per(removed as f64, calls as f64),
        avg_prompt_tokens: per(total_prompt as f64, calls as f64),
        avg_response_length: per(chars as f64, calls as f64),
        avg_response_tokens: per(total_response as f64, calls as f64),
        avg_round_cost: per(cost, rounds as f64),
        bullied_by_other: mean(rows.iter().map(|r| f64::from(r.bullied_by_other))),
        changed_answer: mean(rows.iter().map(|r| b(r.changed_answer))),
        cost_per_question: per(cost, rows.len() as f64),
        first_correct_round_when_correct: mean(when_correct.iter().map(|r| f64::from(r.first_correct_round.unwrap()))),
        incorrectly_parsed_final_answer: mean(rows.iter().map(|r| b(r.incorrectly_parsed_final_answer))),
        num_correct_rounds_when_correct: mean(when_correct.iter().map(|r| f64::from(r.num_correct_rounds))),
        number_of_answers: mean(rows.iter().map(|r| f64::from(r.number_of_answers))),
        percentage_of_correct_rounds_when_correct: mean(
            when_correct.iter().map(|r| per(f64::from(r.num_correct_rounds), f64::from(r.rounds_answered))),
        ),
        relied_on_other: mean(rows.iter().map(|r| b(r.relied_on_other))),
        time_per_question: per(seconds, rows.len() as f64),
        total_prompt_tokens: total_prompt,
        total_response_tokens: total_response,
    }
}

/// Report for every scored agent of a single transcript.
pub fn agent_metrics(t: &Transcript, gold: Letter, prices: &PriceTable) -> Result<Vec<AgentReport>, MetricsError> {
    scored_agents(t)
        .iter()
        .map(|a| Ok(report_from(a, &t.model_id, &[agent_question_metrics(t, a, gold, prices)?])))
        .collect()
}

fn gold_of(t: &Transcript) -> Result<Letter, MetricsError> {
    t.gold.ok_or_else(|| MetricsError::MissingGold(t.question_id.clone()))
}

fn sorted(transcripts: &[Transcript]) -> Vec<&Transcript> {
    let mut v: Vec<&Transcript> = transcripts.iter().collect();
    v.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    v
}

/// Agent reports over a whole experiment, one per agent id in order of
/// first appearance (after sorting transcripts by question id).
pub fn agent_reports(transcripts: &[Transcript], prices: &PriceTable) -> Result<Vec<AgentReport>, MetricsError> {
    let mut rows: IndexMap<String, (String, Vec<AgentQuestionMetrics>)> = IndexMap::new();
    for t in sorted(transcripts) {
        let gold = gold_of(t)?;
        for agent in scored_agents(t) {
            let m = agent_question_metrics(t, &agent, gold, prices)?;
            rows.entry(agent).or_insert_with(|| (t.model_id.clone(), Vec::new())).1.push(m);
        }
    }
    Ok(rows.iter().map(|(name, (engine, rs))| report_from(name, engine, rs)).collect())
}

/// Cost of every call in a transcript, summed call by call.
pub fn transcript_cost(t: &Transcript, prices: &PriceTable) -> Result<f64, MetricsError> {
    let mut total = 0.0;
    for call in t.calls() {
        total += cost_of(call.usage.unwrap_or_default(), &t.model_id, prices)?;
    }
    Ok(total)
}

/// One experiment's aggregate. Column order is part of the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub system: String,
    pub config_label: String,
    pub dataset: String,
    pub model_id: String,
    pub questions: u64,
    pub correct: u64,
    pub errored: u64,
    pub accuracy: f64,
    pub total_cost_usd: f64,
    pub avg_cost_usd: f64,
    pub avg_seconds: f64,
    pub avg_tokens: f64,
    pub avg_prompt_tokens: f64,
    pub avg_completion_tokens: f64,
    pub avg_api_calls: f64,
    pub final_round_consensus: f64,
    pub final_round_correctly_parsed_consensus: f64,
    pub any_correct_answer: f64,
    pub how_many_agents_changed: f64,
    pub how_many_agents_changed_correctly_parsed: f64,
    pub number_of_rounds: f64,
    pub unique_first_answers: f64,
    pub unique_first_correctly_parsed_answers: f64,
    pub answered_correctly: f64,
    pub any_incorrectly_parsed_answer: f64,
    pub avg_messages_removed: f64,
    pub avg_agent_prompt_tokens: f64,
    pub avg_response_length: f64,
    pub avg_response_tokens: f64,
    pub avg_round_cost: f64,
    pub bullied_by_other: f64,
    pub changed_answer: f64,
    pub cost_per_question_per_agent: f64,
    pub first_correct_round_when_correct: f64,
    pub incorrectly_parsed_final_answer: f64,
    pub num_correct_rounds_when_correct: f64,
    pub number_of_answers: f64,
    pub percentage_of_correct_rounds_when_correct: f64,
    pub relied_on_other: f64,
    pub time_per_question_per_agent: f64,
}

impl SummaryRow {
    /// Column names in file order.
    pub const COLUMNS: [&'static str; 40] = [
        "system",
        "config_label",
        "dataset",
        "model_id",
        "questions",
        "correct",
        "errored",
        "accuracy",
        "total_cost_usd",
        "avg_cost_usd",
        "avg_seconds",
        "avg_tokens",
        "avg_prompt_tokens",
        "avg_completion_tokens",
        "avg_api_calls",
        "final_round_consensus",
        "final_round_correctly_parsed_consensus",
        "any_correct_answer",
        "how_many_agents_changed",
        "how_many_agents_changed_correctly_parsed",
        "number_of_rounds",
        "unique_first_answers",
        "unique_first_correctly_parsed_answers",
        "answered_correctly",
        "any_incorrectly_parsed_answer",
        "avg_messages_removed",
        "avg_agent_prompt_tokens",
        "avg_response_length",
        "avg_response_tokens",
        "avg_round_cost",
        "bullied_by_other",
        "changed_answer",
        "cost_per_question_per_agent",
        "first_correct_round_when_correct",
        "incorrectly_parsed_final_answer",
        "num_correct_rounds_when_correct",
        "number_of_answers",
        "percentage_of_correct_rounds_when_correct",
        "relied_on_other",
        "time_per_question_per_agent",
    ];
}

/// Identifies the experiment a summary row belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowLabels {
    pub system: String,
    pub config_label: String,
    pub dataset: String,
}

/// Aggregates an experiment's transcripts. Errored transcripts count as
/// incorrect. Transcripts are processed in question-id order so the
/// floating-point results do not depend on completion order.
pub fn summarize(labels: &RowLabels, transcripts: &[Transcript], prices: &PriceTable) -> Result<SummaryRow, MetricsError> {
    if transcripts.is_empty() {
        return Err(MetricsError::Empty);
    }
    let ts = sorted(transcripts);
    let n = ts.len() as f64;
    let mut correct = 0u64;
    let mut errored = 0u64;
    let mut total_cost = 0.0;
    let mut seconds = 0.0;
    let mut prompt = 0u64;
    let mut completion = 0u64;
    let mut calls = 0u64;
    let mut debate = [0.0f64; 8];
    for t in &ts {
        let gold = gold_of(t)?;
        correct += u64::from(t.final_answer.is(gold));
        errored += u64::from(t.error.is_some());
        total_cost += transcript_cost(t, prices)?;
        seconds += t.wall_seconds;
        prompt += t.total_usage.prompt_tokens;
        completion += t.total_usage.completion_tokens;
        calls += t.api_calls;
        for (acc, v) in debate.iter_mut().zip(debate_metrics(t, gold).values()) {
            *acc += v;
        }
    }
    let debate = debate.map(|v| v / n);

    let mut all_rows = Vec::new();
    for t in &ts {
        let gold = gold_of(t)?;
        for agent in scored_agents(t) {
            all_rows.push(agent_question_metrics(t, &agent, gold, prices)?);
        }
    }
    let agents = report_from("*", "", &all_rows);

    Ok(SummaryRow {
        system: labels.system.clone(),
        config_label: labels.config_label.clone(),
        dataset: labels.dataset.clone(),
        model_id: ts[0].model_id.clone(),
        questions: ts.len() as u64,
        correct,
        errored,
        accuracy: correct as f64 / n,
        total_cost_usd: total_cost,
        avg_cost_usd: total_cost / n,
        avg_seconds: seconds / n,
        avg_tokens: (prompt + completion) as f64 / n,
        avg_prompt_tokens: prompt as f64 / n,
        avg_completion_tokens: completion as f64 / n,
        avg_api_calls: calls as f64 / n,
        final_round_consensus: debate[0],
        final_round_correctly_parsed_consensus: debate[1],
        any_correct_answer: debate[2],
        how_many_agents_changed: debate[3],
        how_many_agents_changed_correctly_parsed: debate[4],
        number_of_rounds: debate[5],
        unique_first_answers: debate[6],
        unique_first_correctly_parsed_answers: debate[7],
        answered_correctly: agents.answered_correctly,
        any_incorrectly_parsed_answer: agents.any_incorrectly_parsed_answer,
        avg_messages_removed: agents.avg_messages_removed,
        avg_agent_prompt_tokens: agents.avg_prompt_tokens,
        avg_response_length: agents.avg_response_length,
        avg_response_tokens: agents.avg_response_tokens,
        avg_round_cost: agents.avg_round_cost,
        bullied_by_other: agents.bullied_by_other,
        changed_answer: agents.changed_answer,
        cost_per_question_per_agent: agents.cost_per_question,
        first_correct_round_when_correct: agents.first_correct_round_when_correct,
        incorrectly_parsed_final_answer: agents.incorrectly_parsed_final_answer,
        num_correct_rounds_when_correct: agents.num_correct_rounds_when_correct,
        number_of_answers: agents.number_of_answers,
        percentage_of_correct_rounds_when_correct: agents.percentage_of_correct_rounds_when_correct,
        relied_on_other: agents.relied_on_other,
        time_per_question_per_agent: agents.time_per_question,
    })
}

/// Writes rows as CSV with a header line in [`SummaryRow::COLUMNS`] order.
pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| MetricsError::Csv(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record(SummaryRow::COLUMNS).map_err(|e| MetricsError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| MetricsError::Csv(e.to_string()))
}

pub fn read_summary_csv<R: std::io::Read>(input: R) -> Result<Vec<SummaryRow>, MetricsError> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| MetricsError::Csv(e.to_string()))
}

/// Accuracy of the first agent in its first and last round, against the
/// accuracy of the protocol's final answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeImprovement {
    pub questions: u64,
    pub first_round_first_agent_acc: f64,
    pub last_round_first_agent_acc: f64,
    pub final_answer_acc: f64,
}

impl RelativeImprovement {
    /// Final-answer accuracy minus first-round first-agent accuracy, in
    /// percentage points.
    pub fn debate_gain_pp(&self) -> f64 {
        100.0 * (self.final_answer_acc - self.first_round_first_agent_acc)
    }

    pub fn last_round_gain_pp(&self) -> f64 {
        100.0 * (self.last_round_first_agent_acc - self.first_round_first_agent_acc)
    }
}

/// The first agent is the lowest-indexed answering participant.
pub fn relative_improvement(transcripts: &[Transcript]) -> Result<RelativeImprovement, MetricsError> {
    let ts = sorted(transcripts);
    let (mut first, mut last, mut fin) = (0u64, 0u64, 0u64);
    for t in &ts {
        let gold = gold_of(t)?;
        let agent = t.answerers().next().map(|p| p.id.clone()).or_else(|| scored_agents(t).into_iter().next());
        let answers = agent.map(|a| answers_of(t, &a)).unwrap_or_default();
        first += u64::from(answers.first().is_some_and(|(_, a)| a.is(gold)));
        last += u64::from(answers.last().is_some_and(|(_, a)| a.is(gold)));
        fin += u64::from(t.final_answer.is(gold));
    }
    let n = ts.len().max(1) as f64;
    Ok(RelativeImprovement {
        questions: ts.len() as u64,
        first_round_first_agent_acc: first as f64 / n,
        last_round_first_agent_acc: last as f64 / n,
        final_answer_acc: fin as f64 / n,
    })
}

/// For each dataset in `group`, the config with the highest mean accuracy
/// over the other datasets of the group. Ties go to the lexicographically
/// smallest config label. `table` maps (config, dataset) to accuracy.
pub fn kfold_select(
    table: &BTreeMap<(String, String), f64>,
    group: &[String],
) -> Result<BTreeMap<String, String>, MetricsError> {
    let datasets: BTreeSet<&String> = group.iter().collect();
    if datasets.len() < 2 {
        return Err(MetricsError::GroupTooSmall(datasets.len()));
    }
    let configs: BTreeSet<&String> = table.keys().map(|(c, _)| c).collect();
    for c in &configs {
        for d in &datasets {
            if !table.contains_key(&((*c).clone(), (*d).clone())) {
                return Err(MetricsError::IncompleteTable { config: (*c).clone(), dataset: (*d).clone() });
            }
        }
    }
    let mut out = BTreeMap::new();
    for held in &datasets {
        let mut best: Option<(&String, f64)> = None;
        for c in &configs {
            let others: Vec<f64> =
                datasets.iter().filter(|d| *d != held).map(|d| table[&((*c).clone(), (*d).clone())]).collect();
            let score = others.iter().sum::<f64>() / others.len() as f64;
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((c, score));
            }
        }
        if let Some((c, _)) = best {
            out.insert((*held).clone(), c.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Participant, Role, RoundRecord, Usage};

    fn l(c: char) -> Letter {
        Letter::from_char(c).unwrap()
    }

    fn ans(c: char) -> Answer {
        if c == '?' {
            Answer::Unparsed
        } else {
            Answer::Letter(l(c))
        }
    }

    /// Transcript from per-round answer strings: `["AB", "AC"]` means two
    /// rounds where agent_0 said A then A and agent_1 said B then C.
    fn debate(rounds: &[&str]) -> Transcript {
        let mut t = Transcript::empty("q", "test");
        let n = rounds[0].len();
        for i in 0..n {
            t.participants.push(Participant {
                id: format!("agent_{i}"),
                kind: ParticipantKind::Answerer,
                system_digest: None,
                persona: None,
            });
        }
        for (r, answers) in rounds.iter().enumerate() {
            let mut rec = RoundRecord::new(r as u32 + 1);
            for (i, c) in answers.chars().enumerate() {
                rec.answers.insert(format!("agent_{i}"), ans(c));
            }
            t.rounds.push(rec);
        }
        t
    }

    #[test]
    fn unanimity() {
        let m = debate_metrics(&debate(&["AAA"]), l('A'));
        assert_eq!(m.final_round_consensus, 1.0);
    }

    #[test]
    fn consensus_with_unparsed() {
        let m = debate_metrics(&debate(&["AAB?"]), l('C'));
        assert_eq!(m.final_round_consensus, 0.5);
        assert!((m.final_round_correctly_parsed_consensus - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn any_correct_counts_earlier_rounds() {
        let m = debate_metrics(&debate(&["AB", "BB"]), l('A'));
        assert_eq!(m.any_correct_answer, 1.0);
        assert_eq!(m.how_many_agents_changed, 1.0);
        assert_eq!(m.unique_first_answers, 2.0);
        assert_eq!(m.number_of_rounds, 2.0);
    }

    #[test]
    fn single_agent_has_no_peers() {
        let t = debate(&["A"]);
        assert!(!relied_on_other(&t, "agent_0"));
        assert_eq!(bullied_by_other(&t, "agent_0", l('A')), 0);
    }

    #[test]
    fn bullied_and_relied() {
        let t = debate(&["AB", "BB"]);
        assert_eq!(bullied_by_other(&t, "agent_0", l('A')), 1);
        assert!(relied_on_other(&t, "agent_0"));
        assert!(!relied_on_other(&t, "agent_1"));
        // moving to a wrong answer nobody gave before is not bullying
        let t = debate(&["AB", "CB"]);
        assert_eq!(bullied_by_other(&t, "agent_0", l('A')), 0);
    }

    #[test]
    fn messages_removed_average() {
        let mut t = debate(&["A"]);
        t.model_id = "m".into();
        for removed in [1, 2, 3] {
            let mut m = Message::new(Role::Assistant, "agent_0", 1, "x");
            m.usage = Some(Usage::new(10, 1));
            m.messages_removed = removed;
            t.rounds[0].messages.push(m);
        }
        let prices = PriceTable::new().with("m", 0.0, 0.0);
        let r = agent_metrics(&t, l('A'), &prices).unwrap();
        assert_eq!(r[0].avg_messages_removed, 2.0);
    }

    fn table(cells: &[(&str, &str, f64)]) -> BTreeMap<(String, String), f64> {
        cells.iter().map(|(c, d, v)| ((c.to_string(), d.to_string()), *v)).collect()
    }

    fn group(ds: &[&str]) -> Vec<String> {
        ds.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn kfold_dominance() {
        let t = table(&[("a", "x", 0.9), ("a", "y", 0.9), ("a", "z", 0.9), ("b", "x", 0.1), ("b", "y", 0.1), ("b", "z", 0.1)]);
        let sel = kfold_select(&t, &group(&["x", "y", "z"])).unwrap();
        assert!(sel.values().all(|c| c == "a"));
    }

    #[test]
    fn kfold_uses_held_out_mean() {
        // "b" wins on x itself, but "a" is better on y and z
        let t = table(&[("a", "x", 0.1), ("a", "y", 0.8), ("a", "z", 0.8), ("b", "x", 0.99), ("b", "y", 0.5), ("b", "z", 0.5)]);
        let sel = kfold_select(&t, &group(&["x", "y", "z"])).unwrap();
        assert_eq!(sel["x"], "a");
    }

    #[test]
    fn kfold_guards() {
        let t = table(&[("a", "x", 0.1), ("a", "y", 0.2), ("b", "x", 0.3)]);
        assert!(matches!(kfold_select(&t, &group(&["x", "y"])), Err(MetricsError::IncompleteTable { .. })));
        assert!(matches!(kfold_select(&t, &group(&["x"])), Err(MetricsError::GroupTooSmall(1))));
        let tie = table(&[("b", "x", 0.5), ("b", "y", 0.5), ("a", "x", 0.5), ("a", "y", 0.5)]);
        assert!(kfold_select(&tie, &group(&["x", "y"])).unwrap().values().all(|c| c == "a"));
    }
}
