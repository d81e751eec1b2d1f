//! The eight question-answering protocols, from a single prompt to
//! multi-round debates, each mapping a question to a [`Transcript`].

mod chateval;
mod ensemble;
mod features;
mod multi_persona;
mod presets;
mod session;
mod single;
mod society;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::ChatBackend;
use crate::model::{Answer, Letter, Question, SamplingParams, Transcript};
use crate::prompts::{AgentPrompt, DebatePrompt, ExemplarSet, TemplateRegistry};

pub use chateval::run_chateval;
pub use ensemble::{run_ensemble_refinement, run_medprompt_subset, run_self_consistency};
pub use features::{observed_features, Features};
pub use multi_persona::run_multi_persona;
pub use presets::{preset, presets, Preset};
pub use single::{run_single_agent, run_spp};
pub use society::run_society_of_minds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    SingleAgent,
    SelfConsistency,
    EnsembleRefinement,
    SocietyOfMinds,
    MultiPersona,
    Chateval,
    MedpromptSubset,
    Spp,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 8] = [
        ProtocolKind::SingleAgent,
        ProtocolKind::SelfConsistency,
        ProtocolKind::EnsembleRefinement,
        ProtocolKind::SocietyOfMinds,
        ProtocolKind::MultiPersona,
        ProtocolKind::Chateval,
        ProtocolKind::MedpromptSubset,
        ProtocolKind::Spp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::SingleAgent => "single_agent",
            ProtocolKind::SelfConsistency => "self_consistency",
            ProtocolKind::EnsembleRefinement => "ensemble_refinement",
            ProtocolKind::SocietyOfMinds => "society_of_minds",
            ProtocolKind::MultiPersona => "multi_persona",
            ProtocolKind::Chateval => "chateval",
            ProtocolKind::MedpromptSubset => "medprompt_subset",
            ProtocolKind::Spp => "spp",
        }
    }

    /// Human-readable system name, as used in result tables.
    pub fn system_name(self) -> &'static str {
        match self {
            ProtocolKind::SingleAgent => "Single Agent",
            ProtocolKind::SelfConsistency => "Self-Consistency",
            ProtocolKind::EnsembleRefinement => "Ensemble Refinement",
            ProtocolKind::SocietyOfMinds => "Society of Mind",
            ProtocolKind::MultiPersona => "Multi-Persona",
            ProtocolKind::Chateval => "ChatEval",
            ProtocolKind::MedpromptSubset => "Medprompt",
            ProtocolKind::Spp => "Solo Performance Prompting",
        }
    }

    fn default_agent_prompt(self) -> AgentPrompt {
        match self {
            ProtocolKind::SingleAgent => AgentPrompt::Simple,
            ProtocolKind::MultiPersona => AgentPrompt::AngelDevil,
            ProtocolKind::Spp => AgentPrompt::Spp,
            _ => AgentPrompt::Cot,
        }
    }

    fn allowed_agent_prompts(self) -> &'static [AgentPrompt] {
        use AgentPrompt::*;
        match self {
            ProtocolKind::MultiPersona => &[AngelDevil],
            ProtocolKind::Spp => &[Spp, SppExpert, SppJudge],
            ProtocolKind::MedpromptSubset => &[Cot, FewShotCot],
            _ => &[Simple, Cot, FewShotSimple, FewShotCot],
        }
    }

    fn allowed_debate_prompts(self) -> &'static [DebatePrompt] {
        use DebatePrompt::*;
        match self {
            ProtocolKind::SelfConsistency | ProtocolKind::EnsembleRefinement => {
                &[EnsembleRefinement, EnsembleRefinementCot]
            }
            ProtocolKind::SocietyOfMinds => &[SocietyOfMinds],
            ProtocolKind::MultiPersona => &[MultiPersona],
            ProtocolKind::Chateval => &[ChatEval],
            ProtocolKind::MedpromptSubset => &[Medprompt],
            ProtocolKind::SingleAgent | ProtocolKind::Spp => &[],
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProtocolKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ConfigError::new("protocol", format!("unknown protocol {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatEvalMode {
    OneByOne,
    SimultaneousTalk,
    SimultaneousTalkWithSummarizer,
}

/// A configuration problem, located by a dotted field path.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError { path: path.into(), message: message.into() }
    }

    /// Nests the error under a parent field.
    pub fn under(mut self, parent: &str) -> Self {
        self.path = if self.path.is_empty() { parent.to_string() } else { format!("{parent}.{}", self.path) };
        self
    }
}

/// Which protocol to run and how. Fields that do not apply to the chosen
/// protocol must be left unset; unset applicable fields take the
/// protocol's default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub protocol: ProtocolKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_prompt: Option<AgentPrompt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub debate_prompt: Option<DebatePrompt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_agents: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_rounds: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_samples: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_reasoning: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_aggregation: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chateval_mode: Option<ChatEvalMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summarize: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rounds: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement_intensity: Option<u32>,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default)]
    pub parallel_within_round: bool,
    /// Prompt budget in estimated tokens; older history is dropped to fit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_token_limit: Option<u64>,
}

impl ProtocolConfig {
    pub fn new(protocol: ProtocolKind) -> Self {
        ProtocolConfig {
            protocol,
            agent_prompt: None,
            debate_prompt: None,
            num_agents: None,
            num_rounds: None,
            num_samples: None,
            num_reasoning: None,
            num_aggregation: None,
            chateval_mode: None,
            summarize: None,
            max_rounds: None,
            agreement_intensity: None,
            sampling: SamplingParams::default(),
            parallel_within_round: false,
            context_token_limit: None,
        }
    }

    pub fn agent_prompt(&self) -> AgentPrompt {
        self.agent_prompt.unwrap_or(self.protocol.default_agent_prompt())
    }

    pub fn debate_prompt(&self) -> Option<DebatePrompt> {
        self.debate_prompt.or_else(|| self.protocol.allowed_debate_prompts().first().copied())
    }

    pub fn num_agents(&self) -> u32 {
        self.num_agents.unwrap_or(match self.protocol {
            ProtocolKind::SocietyOfMinds => 3,
            ProtocolKind::Chateval | ProtocolKind::MultiPersona => 2,
            _ => 1,
        })
    }

    pub fn num_rounds(&self) -> u32 {
        self.num_rounds.unwrap_or(match self.protocol {
            ProtocolKind::SocietyOfMinds | ProtocolKind::Chateval => 2,
            _ => 1,
        })
    }

    pub fn num_samples(&self) -> u32 {
        self.num_samples.unwrap_or(5)
    }

    pub fn num_reasoning(&self) -> u32 {
        self.num_reasoning.unwrap_or(3)
    }

    pub fn num_aggregation(&self) -> u32 {
        self.num_aggregation.unwrap_or(1)
    }

    pub fn chateval_mode(&self) -> ChatEvalMode {
        self.chateval_mode.unwrap_or(ChatEvalMode::OneByOne)
    }

    pub fn summarize(&self) -> bool {
        self.summarize.unwrap_or(false)
    }

    pub fn max_rounds(&self) -> u32 {
        self.max_rounds.unwrap_or(3)
    }

    /// Checks per-protocol field applicability and ranges.
    pub fn validate(&self) -> Result<(), ConfigError> {
        use ProtocolKind::*;
        let p = self.protocol;
        let only = |field: &str, set: bool, allowed: &[ProtocolKind]| -> Result<(), ConfigError> {
            if set && !allowed.contains(&p) {
                Err(ConfigError::new(field, format!("not applicable to protocol {p}")))
            } else {
                Ok(())
            }
        };
        let at_least = |field: &str, v: Option<u32>, min: u32| -> Result<(), ConfigError> {
            match v {
                Some(x) if x < min => Err(ConfigError::new(field, format!("must be at least {min}, got {x}"))),
                _ => Ok(()),
            }
        };

        only("num_agents", self.num_agents.is_some(), &[SingleAgent, SocietyOfMinds, Chateval, MultiPersona])?;
        only("num_rounds", self.num_rounds.is_some(), &[SingleAgent, SocietyOfMinds, Chateval])?;
        only("num_samples", self.num_samples.is_some(), &[SelfConsistency, MedpromptSubset])?;
        only("num_reasoning", self.num_reasoning.is_some(), &[EnsembleRefinement])?;
        only("num_aggregation", self.num_aggregation.is_some(), &[EnsembleRefinement])?;
        only("chateval_mode", self.chateval_mode.is_some(), &[Chateval])?;
        only("summarize", self.summarize.is_some(), &[SocietyOfMinds])?;
        only("max_rounds", self.max_rounds.is_some(), &[MultiPersona])?;
        only("agreement_intensity", self.agreement_intensity.is_some(), &[SocietyOfMinds, Chateval, MultiPersona])?;

        match p {
            SingleAgent => {
                if self.num_agents() != 1 || self.num_rounds() != 1 {
                    return Err(ConfigError::new("num_agents", "single_agent uses exactly one agent and one round"));
                }
            }
            SocietyOfMinds | Chateval => at_least("num_agents", self.num_agents, 2)?,
            MultiPersona => {
                if self.num_agents() != 2 {
                    return Err(ConfigError::new("num_agents", "multi_persona uses exactly two debaters plus a judge"));
                }
            }
            _ => {}
        }
        at_least("num_rounds", self.num_rounds, 1)?;
        at_least("num_samples", self.num_samples, 1)?;
        at_least("num_reasoning", self.num_reasoning, 1)?;
        at_least("num_aggregation", self.num_aggregation, 1)?;
        at_least("max_rounds", self.max_rounds, 1)?;
        if let Some(x) = self.agreement_intensity {
            if x > 100 {
                return Err(ConfigError::new("agreement_intensity", format!("{x} not in [0, 100]")));
            }
        }
        if let Some(ap) = self.agent_prompt {
            if !p.allowed_agent_prompts().contains(&ap) {
                return Err(ConfigError::new("agent_prompt", format!("{ap} is not usable with protocol {p}")));
            }
        }
        if let Some(dp) = self.debate_prompt {
            if !p.allowed_debate_prompts().contains(&dp) {
                return Err(ConfigError::new("debate_prompt", format!("{dp} is not usable with protocol {p}")));
            }
        }
        if self.context_token_limit == Some(0) {
            return Err(ConfigError::new("context_token_limit", "must be positive"));
        }
        self.sampling.validate().map_err(|e| match e {
            crate::model::ModelError::OutOfRange { field, reason } => ConfigError::new(format!("sampling.{field}"), reason),
            other => ConfigError::new("sampling", other.to_string()),
        })?;
        if matches!(p, SelfConsistency | MedpromptSubset) && self.sampling.temperature == 0.0 {
            log::warn!("{p} with temperature 0 draws identical samples from most live models");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("protocol config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Closed-form API-call count for one question, assuming every call
    /// succeeds and, for Multi-Persona, that the judge never ends the
    /// debate early.
    pub fn expected_api_calls(&self) -> u64 {
        let n = u64::from(self.num_agents());
        let r = u64::from(self.num_rounds());
        match self.protocol {
            ProtocolKind::SingleAgent | ProtocolKind::Spp => 1,
            ProtocolKind::SelfConsistency | ProtocolKind::MedpromptSubset => u64::from(self.num_samples()),
            ProtocolKind::EnsembleRefinement => u64::from(self.num_reasoning() + self.num_aggregation()),
            ProtocolKind::SocietyOfMinds => n * r + if self.summarize() { r - 1 } else { 0 },
            ProtocolKind::MultiPersona => 3 * u64::from(self.max_rounds()),
            ProtocolKind::Chateval => {
                n * r + if self.chateval_mode() == ChatEvalMode::SimultaneousTalkWithSummarizer { r } else { 0 }
            }
        }
    }
}

/// Everything a protocol run needs besides the question and config.
#[derive(Clone, Copy)]
pub struct ProtocolContext<'a> {
    pub backend: &'a dyn ChatBackend,
    pub registry: &'a TemplateRegistry,
    pub model_id: &'a str,
    pub exemplars: Option<&'a ExemplarSet>,
}

impl<'a> ProtocolContext<'a> {
    pub fn new(backend: &'a dyn ChatBackend, registry: &'a TemplateRegistry, model_id: &'a str) -> Self {
        ProtocolContext { backend, registry, model_id, exemplars: None }
    }

    pub fn with_exemplars(mut self, exemplars: Option<&'a ExemplarSet>) -> Self {
        self.exemplars = exemplars;
        self
    }
}

/// Runs the configured protocol. The question's gold letter is never read.
pub fn run_protocol(q: &Question, cfg: &ProtocolConfig, ctx: &ProtocolContext<'_>) -> Transcript {
    match cfg.protocol {
        ProtocolKind::SingleAgent => run_single_agent(q, cfg, ctx),
        ProtocolKind::SelfConsistency => run_self_consistency(q, cfg, ctx),
        ProtocolKind::EnsembleRefinement => run_ensemble_refinement(q, cfg, ctx),
        ProtocolKind::SocietyOfMinds => run_society_of_minds(q, cfg, ctx),
        ProtocolKind::MultiPersona => run_multi_persona(q, cfg, ctx),
        ProtocolKind::Chateval => run_chateval(q, cfg, ctx),
        ProtocolKind::MedpromptSubset => run_medprompt_subset(q, cfg, ctx),
        ProtocolKind::Spp => run_spp(q, cfg, ctx),
    }
}

fn counts(answers: &[Answer]) -> [usize; Letter::MAX_OPTIONS] {
    let mut counts = [0usize; Letter::MAX_OPTIONS];
    for a in answers {
        if let Answer::Letter(l) = a {
            counts[l.index()] += 1;
        }
    }
    counts
}

/// Most frequent parsed letter; ties go to the alphabetically smallest.
/// Unparsed answers do not vote.
pub fn plurality(answers: &[Answer]) -> Answer {
    let counts = counts(answers);
    let best = counts.iter().copied().max().unwrap_or(0);
    if best == 0 {
        return Answer::Unparsed;
    }
    Answer::Letter(Letter::from_index(counts.iter().position(|&c| c == best).unwrap()).unwrap())
}

/// Most frequent parsed letter; ties go to the letter of the
/// lowest-indexed agent among the tied ones.
pub fn plurality_by_agent_order(answers: &[Answer]) -> Answer {
    let counts = counts(answers);
    let best = counts.iter().copied().max().unwrap_or(0);
    if best == 0 {
        return Answer::Unparsed;
    }
    answers
        .iter()
        .copied()
        .find(|a| a.letter().is_some_and(|l| counts[l.index()] == best))
        .unwrap_or(Answer::Unparsed)
}
