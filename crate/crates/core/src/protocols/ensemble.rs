//! Protocols built from independent samples: self-consistency, ensemble
//! refinement and the Medprompt subset.

use sha2::{Digest, Sha256};

use super::session::{Call, Session};
use super::{plurality, ProtocolConfig, ProtocolContext};
use crate::model::{Answer, Message, ParticipantKind, Question, Transcript};
use crate::parsing::{extract_letter, permute_question, unmap_answer};
use crate::prompts::{AgentPrompt, Bindings, DebatePrompt};

fn reasoning_templates(cfg: &ProtocolConfig) -> (&'static str, &'static str) {
    match cfg.debate_prompt() {
        Some(DebatePrompt::EnsembleRefinementCot) => ("er_cot_reasoning", "er_cot_aggregation"),
        _ => ("er_reasoning", "er_aggregation"),
    }
}

fn all_failed(s: Session<'_>) -> Transcript {
    let error = s.t.failures.last().map(|f| f.error.clone()).unwrap_or_else(|| "no calls succeeded".into());
    s.fail(error)
}

/// `num_samples` independent draws of the same prompt; the most frequent
/// parsed letter wins.
pub fn run_self_consistency(q: &Question, cfg: &ProtocolConfig, ctx: &ProtocolContext<'_>) -> Transcript {
    let mut s = Session::new(q, cfg, ctx);
    let (system_id, _) = reasoning_templates(cfg);
    let rendered = ctx
        .registry
        .render(system_id, &Bindings::new())
        .map_err(|e| e.to_string())
        .and_then(|sys| cfg.agent_prompt().render_turn(ctx.registry, q, ctx.exemplars).map(|u| (sys, u)).map_err(|e| e.to_string()));
    let (system, turn) = match rendered {
        Ok(r) => r,
        Err(e) => return s.fail(format!("prompt rendering failed: {e}")),
    };

    let k = cfg.num_samples();
    let mut calls = Vec::new();
    for i in 0..k {
        let id = format!("sample_{i}");
        s.participant(&id, ParticipantKind::Answerer, Some(&system));
        let sys = s.setup_system(&id, system.clone());
        calls.push(Call::new(&id, 1, vec![sys, Message::user(&id, 1, turn.clone())], s.sampling(u64::from(i))));
    }
    let replies = s.run(calls, cfg.parallel_within_round);
    if replies.iter().all(Option::is_none) {
        return all_failed(s);
    }
    let answers: Vec<Answer> = replies.iter().flatten().map(|r| s.record_answer(r)).collect();
    s.finish(plurality(&answers))
}

/// Stage one samples `num_reasoning` reasonings; stage two runs
/// `num_aggregation` calls that each read all of them as student
/// reasonings. The plurality of stage-two answers wins.
pub fn run_ensemble_refinement(q: &Question, cfg: &ProtocolConfig, ctx: &ProtocolContext<'_>) -> Transcript {
    let mut s = Session::new(q, cfg, ctx);
    let (reason_id, aggregate_id) = reasoning_templates(cfg);
    let rendered = (|| {
        let reason_sys = ctx.registry.render(reason_id, &Bindings::new())?;
        let aggregate_sys = ctx.registry.render(aggregate_id, &Bindings::new())?;
        let turn = cfg.agent_prompt().render_turn(ctx.registry, q, ctx.exemplars)?;
        Ok::<_, crate::prompts::PromptError>((reason_sys, aggregate_sys, turn))
    })();
    let (reason_sys, aggregate_sys, turn) = match rendered {
        Ok(r) => r,
        Err(e) => return s.fail(format!("prompt rendering failed: {e}")),
    };

    let n_reason = cfg.num_reasoning();
    let mut calls = Vec::new();
    for i in 0..n_reason {
        let id = format!("reasoner_{i}");
        s.participant(&id, ParticipantKind::Answerer, Some(&reason_sys));
        let sys = s.setup_system(&id, reason_sys.clone());
        calls.push(Call::new(&id, 1, vec![sys, Message::user(&id, 1, turn.clone())], s.sampling(u64::from(i))));
    }
    let reasonings = s.run(calls, cfg.parallel_within_round);
    let mut student = String::from("\n\nStudent reasonings:");
    for (i, r) in reasonings.iter().enumerate() {
        if let Some(r) = r {
            s.record_answer(r);
            student.push_str(&format!("\n\nReasoning {}: {}", i + 1, r.content));
        }
    }
    if reasonings.iter().all(Option::is_none) {
        return all_failed(s);
    }

    let mut calls = Vec::new();
    for j in 0..cfg.num_aggregation() {
        let id = format!("aggregator_{j}");
        s.participant(&id, ParticipantKind::Aggregator, Some(&aggregate_sys));
        let sys = s.setup_system(&id, aggregate_sys.clone());
        let user = Message::user(&id, 2, format!("{turn}{student}"));
        calls.push(Call::new(&id, 2, vec![sys, user], s.sampling(u64::from(n_reason + j))));
    }
    let aggregated = s.run(calls, cfg.parallel_within_round);
    if aggregated.iter().all(Option::is_none) {
        return all_failed(s);
    }
    let answers: Vec<Answer> = aggregated.iter().flatten().map(|r| s.record_answer(r)).collect();
    s.finish(plurality(&answers))
}

/// Seed of the option shuffle for ensemble member `i`. Never zero, since
/// seed zero means "no shuffle".
fn shuffle_seed(base: u64, question_id: &str, i: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(question_id.as_bytes());
    h.update(i.to_le_bytes());
    let bytes: [u8; 8] = h.finalize()[..8].try_into().unwrap();
    u64::from_le_bytes(bytes).max(1)
}

/// Question randomization with chain-of-thought ensembling: every member
/// sees the options in a different order, and votes are mapped back to the
/// original letters before the plurality vote.
pub fn run_medprompt_subset(q: &Question, cfg: &ProtocolConfig, ctx: &ProtocolContext<'_>) -> Transcript {
    let mut s = Session::new(q, cfg, ctx);
    let system = match ctx.registry.render("medprompt_system", &Bindings::new()) {
        Ok(sys) => sys,
        Err(e) => return s.fail(format!("prompt rendering failed: {e}")),
    };
    let exemplars = ctx.exemplars.filter(|e| !e.is_empty());
    if cfg.agent_prompt() == AgentPrompt::FewShotCot && exemplars.is_none() {
        return s.fail("FS + CoT requires an exemplar set");
    }

    let base = cfg.sampling.seed.unwrap_or(0);
    let mut calls = Vec::new();
    let mut perms = Vec::new();
    for i in 0..cfg.num_samples() {
        let id = format!("member_{i}");
        let (permuted, perm) = permute_question(q, shuffle_seed(base, &q.id, i));
        let rendered = match exemplars {
            Some(set) => AgentPrompt::FewShotCot.render_turn(ctx.registry, &permuted, Some(set)),
            None => ctx.registry.render("er_cot", &Bindings::question(&permuted)),
        };
        let turn = match rendered {
            Ok(t) => t,
            Err(e) => return s.fail(format!("prompt rendering failed: {e}")),
        };
        s.participant(&id, ParticipantKind::Answerer, Some(&system));
        let sys = s.setup_system(&id, system.clone());
        calls.push(Call::new(&id, 1, vec![sys, Message::user(&id, 1, turn)], s.sampling(u64::from(i))));
        perms.push(perm);
    }
    let replies = s.run(calls, cfg.parallel_within_round);
    if replies.iter().all(Option::is_none) {
        return all_failed(s);
    }
    let mut answers = Vec::new();
    for (reply, perm) in replies.iter().zip(&perms) {
        if let Some(r) = reply {
            let answer = unmap_answer(extract_letter(&r.content, q.options.len()).value, perm);
            s.record_parsed(1, &r.agent_id, answer);
            answers.push(answer);
        }
    }
    s.finish(plurality(&answers))
}
