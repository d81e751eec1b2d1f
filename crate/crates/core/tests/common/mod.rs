//! Shared fixtures for the integration tests and the acceptance gate.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use debatebench::backend::{ScriptedAgentModel, ScriptedConfig};
use debatebench::datasets::DatasetManifest;
use debatebench::model::{Answer, Letter, Message, Participant, ParticipantKind, Question, Role, RoundRecord, Transcript, Usage};
use debatebench::prompts::{Exemplar, ExemplarSet};
use debatebench::protocols::ProtocolConfig;
use debatebench::runner::{BackendSpec, ExperimentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn letter(c: char) -> Letter {
    Letter::from_char(c).unwrap()
}

/// Synthetic questions with distinct stems and option texts.
pub fn questions(n: usize, n_options: usize, seed: u64) -> Vec<Question> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let options: Vec<String> = (0..n_options).map(|k| format!("choice {k} of item {i}")).collect();
            let gold = Letter::from_index(rng.gen_range(0..n_options)).unwrap();
            Question::new(format!("q{i:04}"), format!("Synthetic item {i}: which choice is right?"), options, gold)
        })
        .collect()
}

pub fn write_dataset(dir: &Path, name: &str, qs: &[Question]) -> PathBuf {
    let path = dir.join(format!("{name}.jsonl"));
    let mut text = String::new();
    for q in qs {
        let options: Vec<&str> = q.options.iter().map(|o| o.text.as_str()).collect();
        let rec = serde_json::json!({"id": q.id, "question": q.stem, "options": options, "answer_idx": q.gold.to_string()});
        text.push_str(&rec.to_string());
        text.push('\n');
    }
    fs::write(&path, text).unwrap();
    path
}

pub fn exemplars() -> ExemplarSet {
    ExemplarSet::new(
        (0..3)
            .map(|i| Exemplar {
                question: Question::new(format!("ex{i}"), format!("Worked example {i}?"), ["yes", "no"], letter('A')),
                answer: letter('A'),
                explanation: Some(format!("Example {i} is answered by the first choice.")),
            })
            .collect(),
    )
}

pub fn scripted(p: f64, a: f64) -> ScriptedConfig {
    ScriptedConfig::uniform(ScriptedAgentModel::new(p, a))
}

/// A scripted experiment over a freshly written dataset.
pub fn experiment(dir: &Path, protocol: ProtocolConfig, qs: &[Question], backend: ScriptedConfig) -> ExperimentConfig {
    let data = write_dataset(dir, "synthetic", qs);
    let mut cfg = ExperimentConfig::new(
        protocol,
        DatasetManifest::new("synthetic", data),
        BackendSpec::Scripted(backend),
        dir.join("run"),
    );
    cfg.model_id = "scripted-model".into();
    cfg.prices = Some(debatebench::backend::PriceTable::new().with("scripted-model", 0.0015, 0.002));
    cfg
}

/// Random transcript with gaps, unparsed answers and usage on every call.
pub fn random_transcript(seed: u64) -> Transcript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_agents = rng.gen_range(1..=4);
    let n_rounds = rng.gen_range(1..=4);
    let n_options = rng.gen_range(2..=4);
    let mut t = Transcript::empty(format!("t{seed:03}"), "random");
    t.model_id = "m".into();
    t.gold = Some(Letter::from_index(rng.gen_range(0..n_options)).unwrap());
    for i in 0..n_agents {
        t.participants.push(Participant {
            id: format!("a{i}"),
            kind: ParticipantKind::Answerer,
            system_digest: None,
            persona: None,
        });
    }
    for r in 1..=n_rounds {
        let mut rec = RoundRecord::new(r);
        for i in 0..n_agents {
            if r > 1 && rng.gen_bool(0.15) {
                continue;
            }
            let agent = format!("a{i}");
            let ans = if rng.gen_bool(0.15) {
                Answer::Unparsed
            } else {
                Answer::Letter(Letter::from_index(rng.gen_range(0..n_options)).unwrap())
            };
            rec.messages.push(Message::user(&agent, r, "prompt"));
            let mut reply = Message::new(Role::Assistant, &agent, r, "x".repeat(rng.gen_range(1..60)));
            reply.usage = Some(Usage::new(rng.gen_range(0..500), rng.gen_range(0..200)));
            reply.messages_removed = rng.gen_range(0..3);
            reply.latency_seconds = Some(rng.gen_range(0.0..2.0));
            rec.messages.push(reply);
            rec.answers.insert(agent, ans);
        }
        t.rounds.push(rec);
    }
    let last: Vec<Answer> = t.rounds.last().unwrap().answers.values().copied().collect();
    t.final_answer = last.first().copied().unwrap_or(Answer::Unparsed);
    for p in &t.participants {
        let fin = t.rounds.iter().rev().find_map(|r| r.answers.get(&p.id)).copied().unwrap_or(Answer::Unparsed);
        t.per_agent_final.insert(p.id.clone(), fin);
    }
    t.api_calls = t.calls().count() as u64;
    t.total_usage = t.calls().fold(Usage::default(), |acc, m| {
        let u = m.usage.unwrap();
        Usage::new(acc.prompt_tokens + u.prompt_tokens, acc.completion_tokens + u.completion_tokens)
    });
    t
}

/// Brute-force recount working on an agent x round grid.
pub struct Grid {
    pub agents: Vec<String>,
    /// `cells[agent][round]`, `None` when the agent did not answer.
    pub cells: Vec<Vec<Option<Answer>>>,
    pub gold: Letter,
}

impl Grid {
    pub fn of(t: &Transcript) -> Self {
        let agents: Vec<String> = t.participants.iter().map(|p| p.id.clone()).collect();
        let cells = agents
            .iter()
            .map(|a| t.rounds.iter().map(|r| r.answers.get(a).copied()).collect())
            .collect();
        Grid { agents, cells, gold: t.gold.unwrap() }
    }

    fn row(&self, i: usize) -> Vec<(usize, Answer)> {
        self.cells[i].iter().enumerate().filter_map(|(r, a)| a.map(|a| (r, a))).collect()
    }

    fn key(a: Answer) -> i32 {
        a.letter().map_or(-1, |l| l.index() as i32)
    }

    fn count_distinct(xs: &[Answer]) -> usize {
        let mut keys: Vec<i32> = xs.iter().map(|a| Self::key(*a)).collect();
        keys.sort();
        keys.dedup();
        keys.len()
    }

    pub fn consensus(&self) -> (f64, f64) {
        let last = self.cells[0].len() - 1;
        let fin: Vec<Answer> = self.cells.iter().filter_map(|row| row[last]).collect();
        let mut best = 0;
        for x in &fin {
            if x.is_parsed() {
                best = best.max(fin.iter().filter(|y| *y == x).count());
            }
        }
        let parsed = fin.iter().filter(|a| a.is_parsed()).count();
        let f = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        (f(best, fin.len()), f(best, parsed))
    }

    pub fn any_correct(&self) -> bool {
        self.cells.iter().flatten().any(|a| *a == Some(Answer::Letter(self.gold)))
    }

    pub fn changed(&self, i: usize) -> bool {
        let xs: Vec<Answer> = self.row(i).into_iter().map(|(_, a)| a).collect();
        Self::count_distinct(&xs) > 1
    }

    pub fn changed_parsed(&self, i: usize) -> bool {
        let xs: Vec<Answer> = self.row(i).into_iter().map(|(_, a)| a).collect();
        !xs.is_empty() && xs.iter().all(|a| a.is_parsed()) && Self::count_distinct(&xs) > 1
    }

    pub fn unique_first(&self, parsed_only: bool) -> usize {
        let firsts: Vec<Answer> = (0..self.agents.len())
            .filter_map(|i| self.row(i).first().map(|(_, a)| *a))
            .filter(|a| !parsed_only || a.is_parsed())
            .collect();
        Self::count_distinct(&firsts)
    }

    fn someone_else_said_before(&self, i: usize, round: usize, l: Letter) -> bool {
        (0..self.agents.len())
            .filter(|&j| j != i)
            .any(|j| (0..round).any(|r| self.cells[j][r] == Some(Answer::Letter(l))))
    }

    pub fn relied(&self, i: usize) -> bool {
        match self.row(i).last() {
            Some(&(r, Answer::Letter(l))) => self.someone_else_said_before(i, r, l),
            _ => false,
        }
    }

    pub fn bullied(&self, i: usize) -> u32 {
        let row = self.row(i);
        let mut n = 0;
        for k in 1..row.len() {
            let (_, prev) = row[k - 1];
            let (r, now) = row[k];
            if prev == Answer::Letter(self.gold) {
                if let Answer::Letter(l) = now {
                    if l != self.gold && self.someone_else_said_before(i, r, l) {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    pub fn final_answer(&self, i: usize) -> Answer {
        self.row(i).last().map_or(Answer::Unparsed, |(_, a)| *a)
    }

    pub fn first_correct_round(&self, i: usize) -> Option<u32> {
        let gold = Answer::Letter(self.gold);
        self.row(i).into_iter().find(|(_, a)| *a == gold).map(|(r, _)| r as u32 + 1)
    }

    pub fn correct_rounds(&self, i: usize) -> u32 {
        let gold = Answer::Letter(self.gold);
        self.row(i).into_iter().filter(|(_, a)| *a == gold).count() as u32
    }

    pub fn number_of_answers(&self, i: usize) -> u32 {
        let xs: Vec<Answer> = self.row(i).into_iter().map(|(_, a)| a).collect();
        Self::count_distinct(&xs) as u32
    }
}

/// Relative closeness used for recomputed means.
pub fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// Every library metric of `t` that disagrees with the grid recount.
pub fn recount_mismatches(t: &Transcript, prices: &debatebench::backend::PriceTable) -> Vec<String> {
    use debatebench::metrics::{agent_question_metrics, debate_metrics, transcript_cost};
    let g = Grid::of(t);
    let mut bad = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            bad.push(format!("{}: {name}", t.question_id));
        }
    };
    let d = debate_metrics(t, g.gold);
    let (cons, cons_parsed) = g.consensus();
    let n = g.agents.len();
    check("final_round_consensus", close(d.final_round_consensus, cons));
    check("final_round_correctly_parsed_consensus", close(d.final_round_correctly_parsed_consensus, cons_parsed));
    check("any_correct_answer", d.any_correct_answer == f64::from(u8::from(g.any_correct())));
    check("how_many_agents_changed", d.how_many_agents_changed == (0..n).filter(|&i| g.changed(i)).count() as f64);
    check(
        "how_many_agents_changed_correctly_parsed",
        d.how_many_agents_changed_correctly_parsed == (0..n).filter(|&i| g.changed_parsed(i)).count() as f64,
    );
    check("number_of_rounds", d.number_of_rounds == g.cells[0].len() as f64);
    check("unique_first_answers", d.unique_first_answers == g.unique_first(false) as f64);
    check("unique_first_correctly_parsed_answers", d.unique_first_correctly_parsed_answers == g.unique_first(true) as f64);

    let price = prices.get(&t.model_id).unwrap();
    let mut total_cost = 0.0;
    for (i, agent) in g.agents.iter().enumerate() {
        let m = agent_question_metrics(t, agent, g.gold, prices).unwrap();
        let calls: Vec<&Message> = t.calls().filter(|c| &c.agent_id == agent).collect();
        let prompt: u64 = calls.iter().map(|c| c.usage.unwrap().prompt_tokens).sum();
        let response: u64 = calls.iter().map(|c| c.usage.unwrap().completion_tokens).sum();
        let cost: f64 = calls
            .iter()
            .map(|c| {
                let u = c.usage.unwrap();
                u.prompt_tokens as f64 * price.usd_per_1k_prompt_tokens / 1000.0
                    + u.completion_tokens as f64 * price.usd_per_1k_completion_tokens / 1000.0
            })
            .sum();
        total_cost += cost;
        let fin = g.final_answer(i);
        check("answered_correctly", m.answered_correctly == (fin == Answer::Letter(g.gold)));
        check("changed_answer", m.changed_answer == g.changed(i));
        check("first_correct_round", m.first_correct_round == g.first_correct_round(i));
        check("num_correct_rounds", m.num_correct_rounds == g.correct_rounds(i));
        check("relied_on_other", m.relied_on_other == g.relied(i));
        check("bullied_by_other", m.bullied_by_other == g.bullied(i));
        check("calls", m.calls as usize == calls.len());
        check("prompt_tokens", m.prompt_tokens == prompt);
        check("response_tokens", m.response_tokens == response);
        check("response_chars", m.response_chars == calls.iter().map(|c| c.content.len() as u64).sum::<u64>());
        check("messages_removed", m.messages_removed == calls.iter().map(|c| u64::from(c.messages_removed)).sum::<u64>());
        check("cost_usd", (m.cost_usd - cost).abs() <= 1e-12);
        check("incorrectly_parsed_final_answer", m.incorrectly_parsed_final_answer == !fin.is_parsed());
        check(
            "any_incorrectly_parsed_answer",
            m.any_incorrectly_parsed_answer == g.cells[i].iter().flatten().any(|a| !a.is_parsed()) || g.cells[i].iter().all(Option::is_none),
        );
        check("number_of_answers", m.number_of_answers == g.number_of_answers(i));
    }
    check("transcript_cost", (transcript_cost(t, prices).unwrap() - total_cost).abs() <= 1e-12);
    bad
}
