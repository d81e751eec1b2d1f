use super::session::{Call, Session};
use super::{plurality_by_agent_order, ProtocolConfig, ProtocolContext};
use crate::model::{Answer, Message, ParticipantKind, Question, Transcript};
use crate::prompts::{inject_agreement, Bindings, PromptError, TemplateRegistry};

const SUMMARIZER: &str = "summarizer";

struct Separators {
    prefix: String,
    suffix: String,
    summary_prefix: String,
    summary_suffix: String,
}

impl Separators {
    fn load(reg: &TemplateRegistry) -> Result<Self, PromptError> {
        let none = Bindings::new();
        Ok(Separators {
            prefix: reg.render("som_prefix", &none)?,
            suffix: reg.render("som_suffix", &none)?,
            summary_prefix: reg.render("som_summary_prefix", &none)?,
            summary_suffix: reg.render("som_summary_suffix", &none)?,
        })
    }
}

fn wrap(reg: &TemplateRegistry, response: &str) -> Result<String, PromptError> {
    reg.render("som_agent_response", &Bindings::new().with("response", response))
}

/// Every agent answers, then in each later round sees the other agents'
/// previous solutions (or a summary of them) and updates its answer.
pub fn run_society_of_minds(q: &Question, cfg: &ProtocolConfig, ctx: &ProtocolContext<'_>) -> Transcript {
    let mut s = Session::new(q, cfg, ctx);
    let reg = ctx.registry;
    let prepared = (|| {
        let seps = Separators::load(reg)?;
        let turn = cfg.agent_prompt().render_turn(reg, q, ctx.exemplars)?;
        let system = cfg.agreement_intensity.map(|x| inject_agreement("", x)).transpose()?;
        Ok::<_, PromptError>((seps, turn, system))
    })();
    let (seps, turn, system) = match prepared {
        Ok(p) => p,
        Err(e) => return s.fail(format!("prompt rendering failed: {e}")),
    };

    let n = cfg.num_agents() as usize;
    let ids: Vec<String> = (0..n).map(|i| format!("agent_{i}")).collect();
    let mut histories: Vec<Vec<Message>> = Vec::with_capacity(n);
    for id in &ids {
        s.participant(id, ParticipantKind::Answerer, system.as_deref());
        let mut h = Vec::new();
        if let Some(sys) = &system {
            h.push(s.setup_system(id, sys.clone()));
        }
        histories.push(h);
    }
    if cfg.summarize() {
        s.participant(SUMMARIZER, ParticipantKind::Summarizer, None);
    }

    let mut previous: Vec<Option<Message>> = vec![None; n];
    let mut last_answers: Vec<Answer> = Vec::new();
    for round in 1..=cfg.num_rounds() {
        let mut prompts: Vec<String> = Vec::with_capacity(n);
        if round == 1 {
            prompts = vec![turn.clone(); n];
        } else if cfg.summarize() {
            let mut all = seps.prefix.clone();
            for reply in previous.iter().flatten() {
                match wrap(reg, &reply.content) {
                    Ok(w) => all.push_str(&w),
                    Err(e) => return s.fail(e.to_string()),
                }
            }
            all.push_str(&seps.summary_suffix);
            let call = Call::new(SUMMARIZER, round, vec![Message::user(SUMMARIZER, round, all)], s.sampling(0));
            let summary = s.run_one(call).map(|m| m.content).unwrap_or_default();
            prompts = vec![format!("{}{summary}{}", seps.summary_prefix, seps.suffix); n];
        } else {
            for i in 0..n {
                let mut p = seps.prefix.clone();
                for (j, reply) in previous.iter().enumerate() {
                    if let (true, Some(reply)) = (i != j, reply) {
                        match wrap(reg, &reply.content) {
                            Ok(w) => p.push_str(&w),
                            Err(e) => return s.fail(e.to_string()),
                        }
                    }
                }
                p.push_str(&seps.suffix);
                prompts.push(p);
            }
        }

        let mut calls = Vec::with_capacity(n);
        for (i, prompt) in prompts.into_iter().enumerate() {
            histories[i].push(Message::user(&ids[i], round, prompt));
            let seed = u64::from(round - 1) * n as u64 + i as u64;
            calls.push(Call::new(&ids[i], round, histories[i].clone(), s.sampling(seed)));
        }
        let replies = s.run(calls, cfg.parallel_within_round);
        last_answers.clear();
        for (i, reply) in replies.iter().enumerate() {
            if let Some(r) = reply {
                last_answers.push(s.record_answer(r));
                histories[i].push(r.clone());
            }
        }
        previous = replies;
    }

    if previous.iter().all(Option::is_none) {
        let error = s.t.failures.last().map(|f| f.error.clone()).unwrap_or_default();
        return s.fail(error);
    }
    s.finish(plurality_by_agent_order(&last_answers))
}
