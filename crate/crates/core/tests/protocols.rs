mod common;

use common::{exemplars, questions, scripted};
use debatebench::backend::{AnswerKey, JudgeScript, JudgeSide, OptionTextBackend, ScriptedBackend, ScriptedConfig};
use debatebench::model::{JudgeMode, Question, Role, Transcript};
use debatebench::parsing::permute_question;
use debatebench::prompts::TemplateRegistry;
use debatebench::protocols::{
    observed_features, preset, presets, run_protocol, ChatEvalMode, ProtocolConfig, ProtocolContext, ProtocolKind,
};

fn run_all(qs: &[Question], cfg: &ProtocolConfig, backend: &ScriptedBackend) -> Vec<Transcript> {
    let reg = TemplateRegistry::builtin();
    let ex = exemplars();
    let ctx = ProtocolContext::new(backend, &reg, "m").with_exemplars(Some(&ex));
    qs.iter().map(|q| run_protocol(q, cfg, &ctx)).collect()
}

fn backend(qs: &[Question], cfg: ScriptedConfig) -> ScriptedBackend {
    ScriptedBackend::new(cfg, AnswerKey::from_questions(qs)).unwrap()
}

#[test]
fn every_preset_matches_its_call_formula() {
    let qs = questions(5, 4, 11);
    let b = backend(&qs, scripted(0.6, 0.3));
    let all = presets();
    assert!(all.len() >= 30);
    for p in all {
        for t in run_all(&qs, &p.config, &b) {
            assert!(t.error.is_none(), "{}: {:?}", p.name, t.error);
            assert_eq!(t.api_calls, p.config.expected_api_calls(), "{}", p.name);
            assert_eq!(t.api_calls as usize, t.calls().count(), "{}", p.name);
        }
    }
}

#[test]
fn named_preset_call_counts() {
    for (name, calls) in [
        ("SoM 3 agents, 2 rounds, summarized", 7),
        ("ER reasoning=3, aggregation=9 (ER MAD, SIMPLE)", 12),
        ("Multi-Persona 3 rounds max", 9),
    ] {
        let p = preset(name).unwrap_or_else(|| panic!("missing preset {name}"));
        assert_eq!(p.config.expected_api_calls(), calls, "{name}");
    }
}

fn replies(t: &Transcript, round: u32, agent: &str) -> Vec<String> {
    t.rounds[round as usize - 1]
        .messages
        .iter()
        .filter(|m| m.role == Role::Assistant && m.agent_id == agent)
        .map(|m| m.content.clone())
        .collect()
}

fn prompt(t: &Transcript, round: u32, agent: &str) -> String {
    t.rounds[round as usize - 1]
        .messages
        .iter()
        .filter(|m| m.role == Role::User && m.agent_id == agent)
        .map(|m| m.content.clone())
        .collect()
}

fn same_round_containment(mode: ChatEvalMode) -> Vec<bool> {
    let qs = questions(20, 4, 12);
    let b = backend(&qs, scripted(0.6, 0.3));
    let mut cfg = ProtocolConfig::new(ProtocolKind::Chateval);
    cfg.chateval_mode = Some(mode);
    cfg.num_rounds = Some(2);
    let mut seen = Vec::new();
    for t in run_all(&qs, &cfg, &b) {
        for round in 1..=2 {
            let earlier = replies(&t, round, "debater_0");
            let later = prompt(&t, round, "debater_1");
            seen.push(earlier.iter().all(|r| later.contains(r.as_str())));
        }
    }
    seen
}

#[test]
fn one_by_one_sees_the_same_round() {
    assert!(same_round_containment(ChatEvalMode::OneByOne).iter().all(|x| *x));
}

#[test]
fn simultaneous_talk_does_not_see_the_same_round() {
    assert!(same_round_containment(ChatEvalMode::SimultaneousTalk).iter().all(|x| !*x));
}

fn features_of(kind: ProtocolKind) -> [bool; 6] {
    let qs = questions(4, 4, 13);
    let b = backend(&qs, scripted(0.6, 0.3));
    let mut ts = Vec::new();
    for rounds in [2, 3] {
        let mut cfg = ProtocolConfig::new(kind);
        match kind {
            ProtocolKind::SocietyOfMinds | ProtocolKind::Chateval => cfg.num_rounds = Some(rounds),
            ProtocolKind::MultiPersona => cfg.max_rounds = Some(rounds),
            _ => {}
        }
        if kind == ProtocolKind::Chateval {
            cfg.chateval_mode = Some(ChatEvalMode::SimultaneousTalkWithSummarizer);
        }
        ts.extend(run_all(&qs, &cfg, &b));
    }
    observed_features(&ts).as_array()
}

/// Matrix cells that a transcript cannot show: ChatEval's judge is not part
/// of the debate loop, Medprompt's members never read each other, and SPP
/// simulates its personas inside one completion.
const UNOBSERVABLE: &[(ProtocolKind, usize)] = &[
    (ProtocolKind::Chateval, 1),
    (ProtocolKind::MedpromptSubset, 3),
    (ProtocolKind::Spp, 0),
    (ProtocolKind::Spp, 3),
    (ProtocolKind::Spp, 5),
];

#[test]
fn feature_matrix_matches_behaviour() {
    for kind in ProtocolKind::ALL {
        let declared = kind.features().as_array();
        let observed = features_of(kind);
        for i in 0..6 {
            if UNOBSERVABLE.contains(&(kind, i)) {
                continue;
            }
            assert_eq!(observed[i], declared[i], "{} {}", kind.name(), debatebench::protocols::Features::NAMES[i]);
        }
    }
}

#[test]
fn medprompt_votes_ignore_choice_order() {
    let qs = questions(100, 4, 14);
    let reg = TemplateRegistry::builtin();
    let ctx = ProtocolContext::new(&OptionTextBackend, &reg, "m");
    for q in &qs {
        let mut texts = Vec::new();
        for shuffle in [0u64, 1, 2, 99] {
            let (pq, _) = permute_question(q, shuffle);
            let mut cfg = ProtocolConfig::new(ProtocolKind::MedpromptSubset);
            cfg.sampling.seed = Some(shuffle * 1000);
            let t = run_protocol(&pq, &cfg, &ctx);
            let letter = t.final_answer.letter().expect("parsed vote");
            texts.push(pq.option_text(letter).unwrap().to_string());
        }
        assert!(texts.windows(2).all(|w| w[0] == w[1]), "{}: {texts:?}", q.id);
    }
}

fn multi_persona(max_rounds: u32, prefer_from_round: Option<u32>) -> Vec<Transcript> {
    let qs = questions(6, 4, 15);
    let b = backend(&qs, ScriptedConfig { judge: JudgeScript { prefer_from_round, pick: JudgeSide::Affirmative }, ..scripted(0.6, 0.0) });
    let mut cfg = ProtocolConfig::new(ProtocolKind::MultiPersona);
    cfg.max_rounds = Some(max_rounds);
    run_all(&qs, &cfg, &b)
}

#[test]
fn multi_persona_stops_when_the_judge_prefers() {
    for r in [1, 2] {
        for t in multi_persona(4, Some(r)) {
            assert_eq!(t.rounds.len(), r as usize);
            let judge = t.rounds.last().unwrap().judge.as_ref().unwrap();
            assert_eq!((judge.mode, judge.preference), (JudgeMode::Universal, Some(true)));
            assert_eq!(t.api_calls, 3 * u64::from(r));
        }
    }
}

#[test]
fn multi_persona_runs_to_max_rounds_without_preference() {
    for max in [2, 3, 4] {
        for t in multi_persona(max, None) {
            assert_eq!(t.rounds.len(), max as usize);
            assert_eq!(t.rounds.last().unwrap().judge.as_ref().unwrap().mode, JudgeMode::Final);
            assert!(t.final_answer.is_parsed());
        }
    }
}

#[test]
fn devil_prompt_carries_agreement_intensity() {
    let qs = questions(1, 4, 16);
    let b = backend(&qs, scripted(0.6, 0.0));
    let mut cfg = ProtocolConfig::new(ProtocolKind::MultiPersona);
    cfg.agreement_intensity = Some(90);
    let t = &run_all(&qs, &cfg, &b)[0];
    let devil = t.setup.iter().find(|m| m.agent_id == "devil" && m.role == Role::System).unwrap();
    assert!(devil.content.contains("agree with the other agents 90% of the time"));
    let angel = t.setup.iter().find(|m| m.agent_id == "angel" && m.role == Role::System).unwrap();
    assert!(!angel.content.contains("% of the time"));
}

#[test]
fn perfect_agents_are_always_right_under_every_preset() {
    let qs = questions(4, 5, 17);
    let b = backend(&qs, scripted(1.0, 0.0));
    for p in presets() {
        for (q, t) in qs.iter().zip(run_all(&qs, &p.config, &b)) {
            assert!(t.final_answer.is(q.gold), "{}: {:?} vs {}", p.name, t.final_answer, q.gold);
            for r in &t.rounds {
                assert!(r.answers.values().all(|a| a.is(q.gold)), "{} round {}", p.name, r.round);
            }
        }
    }
}
