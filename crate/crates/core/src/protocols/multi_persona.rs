use super::session::{Call, Session};
use super::{ProtocolConfig, ProtocolContext};
use crate::model::{Answer, JudgeMode, JudgeRecord, Message, ParticipantKind, Question, Transcript};
use crate::parsing::parse_judge_verdict;
use crate::prompts::{inject_agreement, Bindings, PromptError};

const ANGEL: &str = "angel";
const DEVIL: &str = "devil";
const JUDGE: &str = "judge";

struct Prompts {
    debater_system: String,
    devil_system: String,
    judge_system: String,
    angel_opening: String,
    devil_opening: String,
    suffix: String,
    universal: String,
    final_mode: String,
}

fn prompts(q: &Question, cfg: &ProtocolConfig, ctx: &ProtocolContext<'_>) -> Result<Prompts, PromptError> {
    let reg = ctx.registry;
    let with_q = Bindings::question(q);
    let none = Bindings::new();
    let debater_system = reg.render("mp_agent_system", &with_q)?;
    let devil_system = match cfg.agreement_intensity {
        Some(x) => inject_agreement(&debater_system, x)?,
        None => debater_system.clone(),
    };
    Ok(Prompts {
        devil_system,
        debater_system,
        judge_system: reg.render("mp_judge_system", &with_q)?,
        angel_opening: reg.render("mp_angel", &with_q)?,
        devil_opening: reg.render("mp_devil", &none)?,
        suffix: reg.render("mp_suffix", &none)?,
        universal: reg.render("mp_judge_universal", &none)?,
        final_mode: reg.render("mp_judge_final", &none)?,
    })
}

/// An affirmative debater (angel) answers, a negative debater (devil)
/// disputes it, and a judge decides after every round whether to end the
/// debate. At `max_rounds` the judge must decide.
pub fn run_multi_persona(q: &Question, cfg: &ProtocolConfig, ctx: &ProtocolContext<'_>) -> Transcript {
    let mut s = Session::new(q, cfg, ctx);
    let p = match prompts(q, cfg, ctx) {
        Ok(p) => p,
        Err(e) => return s.fail(format!("prompt rendering failed: {e}")),
    };
    s.participant(ANGEL, ParticipantKind::Answerer, Some(&p.debater_system));
    s.participant(DEVIL, ParticipantKind::Answerer, Some(&p.devil_system));
    s.participant(JUDGE, ParticipantKind::Judge, Some(&p.judge_system));
    s.set_persona(ANGEL, "affirmative");
    s.set_persona(DEVIL, "negative");
    let mut angel = vec![s.setup_system(ANGEL, p.debater_system.clone())];
    let mut devil = vec![s.setup_system(DEVIL, p.devil_system.clone())];
    let mut judge = vec![s.setup_system(JUDGE, p.judge_system.clone())];

    let max_rounds = cfg.max_rounds();
    let mut last_devil = String::new();
    for round in 1..=max_rounds {
        let seed = u64::from(round - 1) * 3;

        let angel_turn = if round == 1 { p.angel_opening.clone() } else { format!("{last_devil}{}", p.suffix) };
        angel.push(Message::user(ANGEL, round, angel_turn));
        let Some(a) = s.run_one(Call::new(ANGEL, round, angel.clone(), s.sampling(seed))) else {
            let error = s.t.failures.last().map(|f| f.error.clone()).unwrap_or_default();
            return s.fail(error);
        };
        s.record_answer(&a);
        angel.push(a.clone());

        let devil_turn =
            if round == 1 { format!("{}\n\n{}", a.content, p.devil_opening) } else { format!("{}{}", a.content, p.suffix) };
        devil.push(Message::user(DEVIL, round, devil_turn));
        let Some(d) = s.run_one(Call::new(DEVIL, round, devil.clone(), s.sampling(seed + 1))) else {
            let error = s.t.failures.last().map(|f| f.error.clone()).unwrap_or_default();
            return s.fail(error);
        };
        s.record_answer(&d);
        devil.push(d.clone());
        last_devil = d.content.clone();

        let mode = if round == max_rounds { JudgeMode::Final } else { JudgeMode::Universal };
        let template = if mode == JudgeMode::Final { &p.final_mode } else { &p.universal };
        let judge_turn = format!(
            "Affirmative side arguing:\n{}\n\nNegative side arguing:\n{}\n\n{template}",
            a.content, d.content
        );
        judge.push(Message::user(JUDGE, round, judge_turn));
        let verdict = match s.run_one(Call::new(JUDGE, round, judge.clone(), s.sampling(seed + 2))) {
            Some(j) => {
                let v = parse_judge_verdict(&j.content, mode, q.options.len());
                judge.push(j);
                Some(v)
            }
            None => None,
        };
        if let Some(v) = &verdict {
            let record = JudgeRecord {
                mode,
                preference: v.preference,
                supported_side: v.side.clone(),
                debate_answer: v.debate_answer,
            };
            if let Some(r) = s.t.rounds.get_mut(round as usize - 1) {
                r.judge = Some(record);
            }
        }
        match (mode, verdict) {
            (JudgeMode::Final, v) => return s.finish(v.map_or(Answer::Unparsed, |v| v.debate_answer)),
            (JudgeMode::Universal, Some(v)) if v.preference == Some(true) => return s.finish(v.debate_answer),
            _ => {}
        }
    }
    unreachable!("the final round always returns")
}
