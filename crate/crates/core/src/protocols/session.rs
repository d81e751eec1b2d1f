//! Shared bookkeeping for protocol runs: issuing calls, recording
//! messages and answers, and timing.

use std::thread;
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::{ProtocolConfig, ProtocolContext};
use crate::backend::{truncate_history, CompletionRequest};
use crate::model::{
    Answer, CallFailure, Message, Participant, ParticipantKind, Question, Role, RoundRecord, SamplingParams,
    Transcript, Usage,
};
use crate::parsing::extract_letter;

/// One backend call to make.
#[derive(Debug, Clone)]
pub(crate) struct Call {
    pub agent_id: String,
    pub round: u32,
    pub messages: Vec<Message>,
    pub sampling: SamplingParams,
}

impl Call {
    pub fn new(agent_id: &str, round: u32, messages: Vec<Message>, sampling: SamplingParams) -> Self {
        Call { agent_id: agent_id.to_string(), round, messages, sampling }
    }
}

pub(crate) struct Session<'a> {
    pub ctx: &'a ProtocolContext<'a>,
    pub cfg: &'a ProtocolConfig,
    pub question: &'a Question,
    pub t: Transcript,
    started: Instant,
    simulated_seconds: f64,
}

impl<'a> Session<'a> {
    pub fn new(q: &'a Question, cfg: &'a ProtocolConfig, ctx: &'a ProtocolContext<'a>) -> Self {
        let mut t = Transcript::empty(q.id.clone(), cfg.protocol.name());
        t.config_digest = cfg.digest();
        t.model_id = ctx.model_id.to_string();
        Session { ctx, cfg, question: q, t, started: Instant::now(), simulated_seconds: 0.0 }
    }

    pub fn n_options(&self) -> usize {
        self.question.options.len()
    }

    pub fn participant(&mut self, id: &str, kind: ParticipantKind, system: Option<&str>) {
        let system_digest = system.map(|s| hex::encode(Sha256::digest(s.as_bytes())));
        self.t.participants.push(Participant { id: id.to_string(), kind, system_digest, persona: None });
    }

    pub fn set_persona(&mut self, id: &str, persona: &str) {
        if let Some(p) = self.t.participants.iter_mut().find(|p| p.id == id) {
            p.persona = Some(persona.to_string());
        }
    }

    /// Adds a round-0 system message for `agent_id` and returns it.
    pub fn setup_system(&mut self, agent_id: &str, content: String) -> Message {
        let m = Message::system(agent_id, content);
        self.t.setup.push(m.clone());
        m
    }

    /// Sampling for the `i`-th draw of one question. Every draw gets a
    /// distinct seed so repeated identical prompts stay distinguishable.
    pub fn sampling(&self, i: u64) -> SamplingParams {
        let base = self.cfg.sampling.seed.unwrap_or(0);
        self.cfg.sampling.with_seed(base.wrapping_add(i))
    }

    fn round_mut(&mut self, round: u32) -> &mut RoundRecord {
        while self.t.rounds.len() < round as usize {
            let next = self.t.rounds.len() as u32 + 1;
            self.t.rounds.push(RoundRecord::new(next));
        }
        &mut self.t.rounds[round as usize - 1]
    }

    /// Issues the calls, concurrently when `parallel`, and records each
    /// call's final prompt message and reply in its round. Results come
    /// back in call order.
    pub fn run(&mut self, calls: Vec<Call>, parallel: bool) -> Vec<Option<Message>> {
        let limit = self.cfg.context_token_limit;
        let ctx = self.ctx;
        let results: Vec<Result<Message, String>> = if parallel && calls.len() > 1 {
            thread::scope(|s| {
                let handles: Vec<_> = calls.iter().map(|c| s.spawn(move || execute(ctx, c, limit))).collect();
                handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err("call panicked".into()))).collect()
            })
        } else {
            calls.iter().map(|c| execute(ctx, c, limit)).collect()
        };

        let latency = |r: &Result<Message, String>| r.as_ref().ok().and_then(|m| m.latency_seconds).unwrap_or(0.0);
        if parallel {
            self.simulated_seconds += results.iter().map(latency).fold(0.0, f64::max);
        } else {
            self.simulated_seconds += results.iter().map(latency).sum::<f64>();
        }

        let mut out = Vec::with_capacity(calls.len());
        for (call, result) in calls.into_iter().zip(results) {
            let round = call.round;
            let prompt = call.messages.last().filter(|m| m.role != Role::System).cloned();
            let record = self.round_mut(round);
            if let Some(p) = prompt {
                record.messages.push(p);
            }
            match result {
                Ok(reply) => {
                    record.messages.push(reply.clone());
                    out.push(Some(reply));
                }
                Err(error) => {
                    self.t.failures.push(CallFailure { round, agent_id: call.agent_id, error });
                    out.push(None);
                }
            }
        }
        out
    }

    pub fn run_one(&mut self, call: Call) -> Option<Message> {
        self.run(vec![call], false).pop().flatten()
    }

    /// Parses a reply and records it as the agent's answer for its round.
    pub fn record_answer(&mut self, reply: &Message) -> Answer {
        let answer = extract_letter(&reply.content, self.n_options()).value;
        self.record_parsed(reply.round, &reply.agent_id, answer);
        answer
    }

    pub fn record_parsed(&mut self, round: u32, agent_id: &str, answer: Answer) {
        self.round_mut(round).answers.insert(agent_id.to_string(), answer);
    }

    /// Sets everything derived from the recorded rounds and returns the
    /// transcript.
    pub fn finish(mut self, final_answer: Answer) -> Transcript {
        let t = &mut self.t;
        t.final_answer = final_answer;
        for r in &t.rounds {
            for (agent, answer) in &r.answers {
                t.per_agent_final.insert(agent.clone(), *answer);
            }
        }
        t.api_calls = t.calls().count() as u64;
        t.total_usage = t.calls().filter_map(|m| m.usage).sum::<Usage>();
        t.wall_seconds = if self.ctx.backend.is_deterministic() {
            self.simulated_seconds
        } else {
            self.started.elapsed().as_secs_f64()
        };
        self.t
    }

    /// Ends the run as failed: no final answer.
    pub fn fail(mut self, error: impl Into<String>) -> Transcript {
        self.t.error = Some(error.into());
        self.finish(Answer::Unparsed)
    }
}

fn execute(ctx: &ProtocolContext<'_>, call: &Call, limit: Option<u64>) -> Result<Message, String> {
    let (messages, removed) = match limit {
        Some(l) => truncate_history(&call.messages, l).map_err(|e| e.to_string())?,
        None => (call.messages.clone(), 0),
    };
    let req = CompletionRequest::new(ctx.model_id, messages, call.sampling);
    let c = ctx.backend.complete(&req).map_err(|e| e.to_string())?;
    let mut m = Message::new(Role::Assistant, call.agent_id.clone(), call.round, c.text);
    m.usage = Some(c.usage);
    m.latency_seconds = Some(c.latency_seconds);
    m.messages_removed = removed;
    Ok(m)
}
