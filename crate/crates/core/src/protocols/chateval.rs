use super::session::{Call, Session};
use super::{plurality_by_agent_order, ChatEvalMode, ProtocolConfig, ProtocolContext};
use crate::model::{Answer, Message, ParticipantKind, Question, Transcript};
use crate::prompts::{inject_agreement, render_question, Bindings, PromptError};

const SUMMARIZER: &str = "summarizer";

/// Renders the debate history visible to a speaker.
fn history_block(history: &[(String, String)]) -> String {
    if history.is_empty() {
        return String::new();
    }
    let mut out = String::from("Debate so far:");
    for (speaker, text) in history {
        out.push_str(&format!("\n\n[{speaker}]: {text}"));
    }
    out.push_str("\n\n");
    out
}

/// Debaters share one visible history. In one-by-one mode each speaker
/// sees everything said before it, including earlier speakers of the same
/// round; in the simultaneous modes speakers only see earlier rounds, and
/// with a summarizer the history is replaced by a summary after every
/// round.
pub fn run_chateval(q: &Question, cfg: &ProtocolConfig, ctx: &ProtocolContext<'_>) -> Transcript {
    let mut s = Session::new(q, cfg, ctx);
    let reg = ctx.registry;
    let mode = cfg.chateval_mode();
    let prepared = (|| {
        let mut debater = reg.render("ce_debater_system", &Bindings::new())?;
        if let Some(x) = cfg.agreement_intensity {
            debater = inject_agreement(&debater, x)?;
        }
        let summarizer = reg.render("ce_summarizer_system", &Bindings::new())?;
        let turn = cfg.agent_prompt().render_turn(reg, q, ctx.exemplars)?;
        Ok::<_, PromptError>((debater, summarizer, turn))
    })();
    let (debater_sys, summarizer_sys, turn) = match prepared {
        Ok(p) => p,
        Err(e) => return s.fail(format!("prompt rendering failed: {e}")),
    };

    let n = cfg.num_agents() as usize;
    let ids: Vec<String> = (0..n).map(|i| format!("debater_{i}")).collect();
    let mut systems = Vec::with_capacity(n);
    for id in &ids {
        s.participant(id, ParticipantKind::Answerer, Some(&debater_sys));
        systems.push(s.setup_system(id, debater_sys.clone()));
    }
    let summarize = mode == ChatEvalMode::SimultaneousTalkWithSummarizer;
    let summarizer_system = summarize.then(|| {
        s.participant(SUMMARIZER, ParticipantKind::Summarizer, Some(&summarizer_sys));
        s.setup_system(SUMMARIZER, summarizer_sys.clone())
    });

    let mut history: Vec<(String, String)> = Vec::new();
    let mut final_answers: Vec<Answer> = Vec::new();
    let mut any_final = false;
    for round in 1..=cfg.num_rounds() {
        final_answers.clear();
        any_final = false;
        let prompt_for = |i: usize, history: &[(String, String)]| {
            vec![systems[i].clone(), Message::user(&ids[i], round, format!("{}{turn}", history_block(history)))]
        };
        let seed = |i: usize| u64::from(round - 1) * (n as u64 + 1) + i as u64;

        if mode == ChatEvalMode::OneByOne {
            for i in 0..n {
                let call = Call::new(&ids[i], round, prompt_for(i, &history), s.sampling(seed(i)));
                if let Some(r) = s.run_one(call) {
                    final_answers.push(s.record_answer(&r));
                    any_final = true;
                    history.push((ids[i].clone(), r.content));
                }
            }
        } else {
            let calls = (0..n).map(|i| Call::new(&ids[i], round, prompt_for(i, &history), s.sampling(seed(i)))).collect();
            let replies = s.run(calls, cfg.parallel_within_round);
            for (i, reply) in replies.into_iter().enumerate() {
                if let Some(r) = reply {
                    final_answers.push(s.record_answer(&r));
                    any_final = true;
                    history.push((ids[i].clone(), r.content));
                }
            }
        }

        if let Some(sys) = &summarizer_system {
            let user = Message::user(SUMMARIZER, round, format!("{}{}", history_block(&history), render_question(q)));
            let call = Call::new(SUMMARIZER, round, vec![sys.clone(), user], s.sampling(seed(n)));
            if let Some(summary) = s.run_one(call) {
                history = vec![(SUMMARIZER.to_string(), summary.content)];
            }
        }
    }

    if !any_final {
        let error = s.t.failures.last().map(|f| f.error.clone()).unwrap_or_default();
        return s.fail(error);
    }
    s.finish(plurality_by_agent_order(&final_answers))
}
