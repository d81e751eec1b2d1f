//! The experiment grid as named, ready-to-run configurations.

use serde::Serialize;

use super::{ChatEvalMode, ProtocolConfig, ProtocolKind};
use crate::prompts::{AgentPrompt, DebatePrompt};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Preset {
    pub name: String,
    pub system: &'static str,
    pub debate_prompt: Option<DebatePrompt>,
    pub agent_prompt: AgentPrompt,
    /// Configuration label as written in the experiment table.
    pub debate_config: String,
    pub config: ProtocolConfig,
}

fn make(
    name: String,
    kind: ProtocolKind,
    debate_prompt: Option<DebatePrompt>,
    agent_prompt: AgentPrompt,
    debate_config: &str,
    tweak: impl FnOnce(&mut ProtocolConfig),
) -> Preset {
    let mut config = ProtocolConfig::new(kind);
    config.agent_prompt = Some(agent_prompt);
    config.debate_prompt = debate_prompt;
    tweak(&mut config);
    Preset {
        name,
        system: kind.system_name(),
        debate_prompt,
        agent_prompt,
        debate_config: debate_config.to_string(),
        config,
    }
}

/// Every preset, in a stable order.
pub fn presets() -> Vec<Preset> {
    use AgentPrompt::*;
    use DebatePrompt as D;
    let mut out = Vec::new();

    for ap in [Simple, Cot, FewShotSimple, FewShotCot] {
        out.push(make(format!("Single Agent {ap}"), ProtocolKind::SingleAgent, None, ap, "", |_| {}));
    }

    for rounds in [2u32, 3] {
        for (label, mode) in [
            ("simultaneous, summarized", ChatEvalMode::SimultaneousTalkWithSummarizer),
            ("simultaneous talk", ChatEvalMode::SimultaneousTalk),
            ("one by one", ChatEvalMode::OneByOne),
        ] {
            let dc = format!("{rounds} rounds, {label}");
            out.push(make(format!("ChatEval {dc}"), ProtocolKind::Chateval, Some(D::ChatEval), Cot, &dc, |c| {
                c.num_agents = Some(2);
                c.num_rounds = Some(rounds);
                c.chateval_mode = Some(mode);
            }));
        }
    }

    for (dp, ap) in [
        (D::EnsembleRefinement, FewShotSimple),
        (D::EnsembleRefinement, Simple),
        (D::EnsembleRefinementCot, Cot),
        (D::EnsembleRefinementCot, FewShotCot),
    ] {
        for aggregation in [1u32, 9] {
            let dc = format!("reasoning=3, aggregation={aggregation}");
            out.push(make(format!("ER {dc} ({dp}, {ap})"), ProtocolKind::EnsembleRefinement, Some(dp), ap, &dc, |c| {
                c.num_reasoning = Some(3);
                c.num_aggregation = Some(aggregation);
            }));
        }
        out.push(make(format!("Self-Consistency ({dp}, {ap})"), ProtocolKind::SelfConsistency, Some(dp), ap, "", |c| {
            c.num_samples = Some(5)
        }));
    }

    for max in [2u32, 3, 4] {
        let dc = format!("{max} rounds max");
        out.push(make(format!("Multi-Persona {dc}"), ProtocolKind::MultiPersona, Some(D::MultiPersona), AngelDevil, &dc, |c| {
            c.max_rounds = Some(max)
        }));
    }

    for (temp, top_p) in [(0.5, 0.8), (0.7, 0.8), (0.7, 0.5), (0.5, 0.5)] {
        let dc = format!("temp: {temp}, top p: {top_p}");
        out.push(make(format!("Medprompt {dc}"), ProtocolKind::MedpromptSubset, Some(D::Medprompt), Cot, &dc, |c| {
            c.num_samples = Some(5);
            c.sampling.temperature = temp;
            c.sampling.top_p = top_p;
        }));
    }

    for agents in [2u32, 3, 4] {
        for rounds in [2u32, 3] {
            for summarized in [false, true] {
                let dc = format!("{agents} agents, {rounds} rounds{}", if summarized { ", summarized" } else { "" });
                out.push(make(format!("SoM {dc}"), ProtocolKind::SocietyOfMinds, Some(D::SocietyOfMinds), Cot, &dc, |c| {
                    c.num_agents = Some(agents);
                    c.num_rounds = Some(rounds);
                    c.summarize = Some(summarized);
                }));
            }
        }
    }

    out.push(make("SPP".into(), ProtocolKind::Spp, None, Spp, "", |_| {}));
    out
}

pub fn preset(name: &str) -> Option<Preset> {
    presets().into_iter().find(|p| p.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_are_unique() {
        let all = presets();
        let mut names: Vec<_> = all.iter().map(|p| p.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), all.len());
        for p in &all {
            p.config.validate().unwrap_or_else(|e| panic!("{}: {e}", p.name));
        }
    }

    #[test]
    fn named_presets_exist() {
        assert_eq!(preset("SoM 3 agents, 2 rounds, summarized").unwrap().config.expected_api_calls(), 7);
        assert_eq!(
            preset("ER reasoning=3, aggregation=9 (ER MAD, SIMPLE)").unwrap().config.expected_api_calls(),
            12
        );
        assert_eq!(preset("Multi-Persona 3 rounds max").unwrap().config.expected_api_calls(), 9);
        let med = preset("Medprompt temp: 0.5, top p: 0.5").unwrap();
        assert_eq!((med.config.sampling.temperature, med.config.sampling.top_p), (0.5, 0.5));
    }
}
