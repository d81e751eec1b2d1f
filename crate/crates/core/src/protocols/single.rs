use super::session::{Call, Session};
use super::{ProtocolConfig, ProtocolContext};
use crate::model::{Message, ParticipantKind, Question, Transcript};

const AGENT: &str = "agent_0";

fn one_shot(q: &Question, cfg: &ProtocolConfig, ctx: &ProtocolContext<'_>) -> Transcript {
    let mut s = Session::new(q, cfg, ctx);
    s.participant(AGENT, ParticipantKind::Answerer, None);
    let prompt = match cfg.agent_prompt().render_turn(ctx.registry, q, ctx.exemplars) {
        Ok(p) => p,
        Err(e) => return s.fail(format!("prompt rendering failed: {e}")),
    };
    let call = Call::new(AGENT, 1, vec![Message::user(AGENT, 1, prompt)], s.sampling(0));
    match s.run_one(call) {
        Some(reply) => {
            let answer = s.record_answer(&reply);
            s.finish(answer)
        }
        None => {
            let error = s.t.failures.last().map(|f| f.error.clone()).unwrap_or_default();
            s.fail(error)
        }
    }
}

/// One call with the agent prompt; the answer is parsed from the reply.
pub fn run_single_agent(q: &Question, cfg: &ProtocolConfig, ctx: &ProtocolContext<'_>) -> Transcript {
    one_shot(q, cfg, ctx)
}

/// Solo performance prompting: one call in which the model plays every
/// persona itself.
pub fn run_spp(q: &Question, cfg: &ProtocolConfig, ctx: &ProtocolContext<'_>) -> Transcript {
    one_shot(q, cfg, ctx)
}

