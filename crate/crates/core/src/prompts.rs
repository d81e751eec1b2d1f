//! Prompt template registry.
//!
//! Every built-in template body lives in `templates/<id>.txt` and is
//! embedded at compile time. A directory of `<id>.txt` files can override
//! or extend the built-ins at runtime.
//!
//! Slots are written `{name}`; only the names in [`SLOTS`] are allowed.
//! Literal braces that do not enclose a bare lowercase identifier (for
//! example the JSON skeletons in the judge prompts) are left alone.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Letter, Question};

/// Slot names a template body may reference.
pub const SLOTS: &[&str] = &["question", "k_shot", "agreement_sentence", "response"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {template:?} references slot {{{slot}}} but no value was bound")]
    UnboundSlot { template: String, slot: String },
    #[error("template {template:?} uses undeclared slot {{{slot}}}")]
    UndeclaredSlot { template: String, slot: String },
    #[error("agreement sentence already present")]
    AlreadyInjected,
    #[error("agreement intensity {0} is outside 0..=100")]
    OutOfRange(u32),
    #[error("exemplar set is empty")]
    EmptyExemplarSet,
    #[error("unknown prompt name {0:?}")]
    UnknownPromptName(String),
    #[error("reading templates from {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    AgentSystem,
    AgentTurn,
    DebateControl,
    Judge,
    Summarizer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    pub body: String,
    pub kind: TemplateKind,
}

impl Template {
    pub fn new(id: impl Into<String>, body: impl Into<String>, kind: TemplateKind) -> Result<Self, PromptError> {
        let t = Template { id: id.into(), body: body.into(), kind };
        for slot in t.slots() {
            if !SLOTS.contains(&slot) {
                return Err(PromptError::UndeclaredSlot { template: t.id.clone(), slot: slot.to_string() });
            }
        }
        Ok(t)
    }

    /// Slot names referenced by the body, in order of appearance.
    pub fn slots(&self) -> impl Iterator<Item = &str> {
        slot_regex().captures_iter(&self.body).map(|c| c.get(1).unwrap().as_str())
    }

    pub fn render(&self, bindings: &Bindings) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len());
        let mut last = 0;
        for caps in slot_regex().captures_iter(&self.body) {
            let whole = caps.get(0).unwrap();
            let name = caps.get(1).unwrap().as_str();
            let value = bindings.get(name).ok_or_else(|| PromptError::UnboundSlot {
                template: self.id.clone(),
                slot: name.to_string(),
            })?;
            out.push_str(&self.body[last..whole.start()]);
            out.push_str(value);
            last = whole.end();
        }
        out.push_str(&self.body[last..]);
        Ok(out)
    }
}

fn slot_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").unwrap())
}

/// Slot values for one render call.
#[derive(Debug, Clone, Default)]
pub struct Bindings(BTreeMap<String, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, slot: &str, value: impl Into<String>) -> Self {
        self.0.insert(slot.to_string(), value.into());
        self
    }

    pub fn question(q: &Question) -> Self {
        Self::new().with("question", render_question(q))
    }

    pub fn get(&self, slot: &str) -> Option<&str> {
        self.0.get(slot).map(String::as_str)
    }
}

macro_rules! builtin {
    ($($id:literal => $kind:ident),* $(,)?) => {
        &[$(($id, include_str!(concat!("../templates/", $id, ".txt")), TemplateKind::$kind)),*]
    };
}

const BUILTIN: &[(&str, &str, TemplateKind)] = builtin! {
    "simple" => AgentTurn,
    "cot" => AgentTurn,
    "few_shot" => AgentTurn,
    "fs_simple" => AgentTurn,
    "fs_cot" => AgentTurn,
    "er_cot" => AgentTurn,
    "spp_original" => AgentTurn,
    "spp_expert" => AgentTurn,
    "spp_judge" => AgentTurn,
    "er_reasoning" => AgentSystem,
    "er_aggregation" => Summarizer,
    "er_cot_reasoning" => AgentSystem,
    "er_cot_aggregation" => Summarizer,
    "som_prefix" => DebateControl,
    "som_suffix" => DebateControl,
    "som_summary_prefix" => DebateControl,
    "som_summary_suffix" => Summarizer,
    "som_agent_response" => DebateControl,
    "mp_agent_system" => AgentSystem,
    "mp_judge_system" => Judge,
    "mp_suffix" => DebateControl,
    "mp_angel" => AgentTurn,
    "mp_devil" => AgentTurn,
    "mp_judge_universal" => Judge,
    "mp_judge_final" => Judge,
    "ce_debater_system" => AgentSystem,
    "ce_summarizer_system" => Summarizer,
    "medprompt_system" => AgentSystem,
};

/// Immutable after construction; cheap to share behind an `Arc`.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: HashMap<String, Template>,
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(id, body, kind)| {
                let body = body.strip_suffix('\n').unwrap_or(body);
                let t = Template::new(*id, body, *kind).expect("built-in templates declare valid slots");
                (t.id.clone(), t)
            })
            .collect();
        TemplateRegistry { templates }
    }

    /// Built-ins overridden by every `<id>.txt` file in `dir`. Files with
    /// unknown ids are added as agent-turn templates.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut registry = Self::builtin();
        let io_err = |e: std::io::Error| PromptError::Io { path: dir.to_path_buf(), message: e.to_string() };
        let mut entries: Vec<_> = fs::read_dir(dir).map_err(io_err)?.collect::<Result<_, _>>().map_err(io_err)?;
        entries.sort_by_key(|e| e.path());
        for entry in entries {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let body = fs::read_to_string(&path)
                .map_err(|e| PromptError::Io { path: path.clone(), message: e.to_string() })?;
            let body = body.strip_suffix('\n').unwrap_or(&body);
            let kind = registry.templates.get(id).map_or(TemplateKind::AgentTurn, |t| t.kind);
            registry.insert(Template::new(id, body, kind)?);
        }
        Ok(registry)
    }

    pub fn insert(&mut self, template: Template) {
        self.templates.insert(template.id.clone(), template);
    }

    pub fn get(&self, id: &str) -> Result<&Template, PromptError> {
        self.templates.get(id).ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.templates.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn render(&self, id: &str, bindings: &Bindings) -> Result<String, PromptError> {
        self.get(id)?.render(bindings)
    }
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Canonical rendering of a question: optional context paragraph, the
/// stem, a blank line, then one `X) text` line per option.
pub fn render_question(q: &Question) -> String {
    let mut out = String::new();
    if let Some(ctx) = q.context.as_deref().filter(|c| !c.trim().is_empty()) {
        out.push_str("Context: ");
        out.push_str(ctx.trim());
        out.push_str("\n\n");
    }
    out.push_str(q.stem.trim_end());
    out.push('\n');
    for o in &q.options {
        out.push('\n');
        out.push_str(&format!("{}) {}", o.letter, o.text.replace('\n', " ")));
    }
    out
}

fn agreement_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)agree with the other agents \d+% of the time").unwrap())
}

pub fn agreement_sentence(intensity: u32) -> Result<String, PromptError> {
    if intensity > 100 {
        return Err(PromptError::OutOfRange(intensity));
    }
    Ok(format!("You should agree with the other agents {intensity}% of the time."))
}

/// Appends the agreement-intensity sentence as the last sentence of a
/// system prompt.
pub fn inject_agreement(system_text: &str, intensity: u32) -> Result<String, PromptError> {
    let sentence = agreement_sentence(intensity)?;
    if agreement_regex().is_match(system_text) {
        return Err(PromptError::AlreadyInjected);
    }
    let base = system_text.trim_end();
    if base.is_empty() {
        Ok(sentence)
    } else {
        Ok(format!("{base} {sentence}"))
    }
}

/// Reads the intensity back out of a prompt, if one was injected.
pub fn injected_agreement(text: &str) -> Option<u32> {
    let m = agreement_regex().find(text)?;
    let digits: String = m.as_str().chars().filter(char::is_ascii_digit).collect();
    digits.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub question: Question,
    pub answer: Letter,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

/// Worked examples for few-shot prompts. The crate ships none; users
/// supply their own as JSONL.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub exemplars: Vec<Exemplar>,
}

impl ExemplarSet {
    pub fn new(exemplars: Vec<Exemplar>) -> Self {
        ExemplarSet { exemplars }
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }
}

pub fn format_exemplars(set: &ExemplarSet, with_explanations: bool) -> Result<String, PromptError> {
    if set.is_empty() {
        return Err(PromptError::EmptyExemplarSet);
    }
    let mut out = String::new();
    for ex in &set.exemplars {
        out.push_str("\n\nQuestion: ");
        out.push_str(&render_question(&ex.question));
        if with_explanations {
            if let Some(expl) = ex.explanation.as_deref() {
                out.push_str("\n\nExplanation: ");
                out.push_str(expl.trim());
            }
        }
        out.push_str(&format!("\n\nAnswer: ({})", ex.answer));
    }
    Ok(out)
}

/// Agent-level prompt names as they appear in experiment tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentPrompt {
    #[serde(rename = "SIMPLE")]
    Simple,
    #[serde(rename = "CoT")]
    Cot,
    #[serde(rename = "FS + SIMPLE", alias = "FS+SIMPLE")]
    FewShotSimple,
    #[serde(rename = "FS + CoT", alias = "FS+CoT")]
    FewShotCot,
    #[serde(rename = "ANGEL + DEVIL", alias = "ANGEL+DEVIL")]
    AngelDevil,
    #[serde(rename = "SPP")]
    Spp,
    #[serde(rename = "SPP EXPERT")]
    SppExpert,
    #[serde(rename = "SPP JUDGE")]
    SppJudge,
}

impl AgentPrompt {
    pub const ALL: [AgentPrompt; 8] = [
        AgentPrompt::Simple,
        AgentPrompt::Cot,
        AgentPrompt::FewShotSimple,
        AgentPrompt::FewShotCot,
        AgentPrompt::AngelDevil,
        AgentPrompt::Spp,
        AgentPrompt::SppExpert,
        AgentPrompt::SppJudge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AgentPrompt::Simple => "SIMPLE",
            AgentPrompt::Cot => "CoT",
            AgentPrompt::FewShotSimple => "FS + SIMPLE",
            AgentPrompt::FewShotCot => "FS + CoT",
            AgentPrompt::AngelDevil => "ANGEL + DEVIL",
            AgentPrompt::Spp => "SPP",
            AgentPrompt::SppExpert => "SPP EXPERT",
            AgentPrompt::SppJudge => "SPP JUDGE",
        }
    }

    pub fn template_ids(self) -> &'static [&'static str] {
        match self {
            AgentPrompt::Simple => &["simple"],
            AgentPrompt::Cot => &["cot"],
            AgentPrompt::FewShotSimple => &["fs_simple"],
            AgentPrompt::FewShotCot => &["fs_cot"],
            AgentPrompt::AngelDevil => &["mp_angel", "mp_devil", "mp_judge_universal", "mp_judge_final"],
            AgentPrompt::Spp => &["spp_original"],
            AgentPrompt::SppExpert => &["spp_expert"],
            AgentPrompt::SppJudge => &["spp_judge"],
        }
    }

    /// The template used for a single question turn.
    pub fn turn_template(self) -> &'static str {
        self.template_ids()[0]
    }

    pub fn needs_exemplars(self) -> bool {
        matches!(self, AgentPrompt::FewShotSimple | AgentPrompt::FewShotCot)
    }

    /// Renders the question turn, inserting exemplars when the prompt is
    /// few-shot.
    pub fn render_turn(
        self,
        registry: &TemplateRegistry,
        question: &Question,
        exemplars: Option<&ExemplarSet>,
    ) -> Result<String, PromptError> {
        let mut bindings = Bindings::question(question);
        if self.needs_exemplars() {
            let set = exemplars.ok_or(PromptError::EmptyExemplarSet)?;
            bindings = bindings.with("k_shot", format_exemplars(set, self == AgentPrompt::FewShotCot)?);
        }
        registry.render(self.turn_template(), &bindings)
    }
}

impl fmt::Display for AgentPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentPrompt {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = normalize_name(s);
        AgentPrompt::ALL
            .into_iter()
            .find(|p| normalize_name(p.name()) == norm)
            .ok_or_else(|| PromptError::UnknownPromptName(s.to_string()))
    }
}

/// Debate-level prompt sets as they appear in experiment tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DebatePrompt {
    #[serde(rename = "CE MAD")]
    ChatEval,
    #[serde(rename = "ER MAD")]
    EnsembleRefinement,
    #[serde(rename = "ER MAD CoT")]
    EnsembleRefinementCot,
    #[serde(rename = "SoM MAD")]
    SocietyOfMinds,
    #[serde(rename = "MP MAD")]
    MultiPersona,
    #[serde(rename = "Medprompt")]
    Medprompt,
}

impl DebatePrompt {
    pub const ALL: [DebatePrompt; 6] = [
        DebatePrompt::ChatEval,
        DebatePrompt::EnsembleRefinement,
        DebatePrompt::EnsembleRefinementCot,
        DebatePrompt::SocietyOfMinds,
        DebatePrompt::MultiPersona,
        DebatePrompt::Medprompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DebatePrompt::ChatEval => "CE MAD",
            DebatePrompt::EnsembleRefinement => "ER MAD",
            DebatePrompt::EnsembleRefinementCot => "ER MAD CoT",
            DebatePrompt::SocietyOfMinds => "SoM MAD",
            DebatePrompt::MultiPersona => "MP MAD",
            DebatePrompt::Medprompt => "Medprompt",
        }
    }

    pub fn template_ids(self) -> &'static [&'static str] {
        match self {
            DebatePrompt::ChatEval => &["ce_debater_system", "ce_summarizer_system"],
            DebatePrompt::EnsembleRefinement => &["er_reasoning", "er_aggregation"],
            DebatePrompt::EnsembleRefinementCot => &["er_cot_reasoning", "er_cot_aggregation"],
            DebatePrompt::SocietyOfMinds => &[
                "som_prefix",
                "som_suffix",
                "som_summary_prefix",
                "som_summary_suffix",
                "som_agent_response",
            ],
            DebatePrompt::MultiPersona => &["mp_agent_system", "mp_judge_system", "mp_suffix"],
            DebatePrompt::Medprompt => &["medprompt_system"],
        }
    }
}

impl fmt::Display for DebatePrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DebatePrompt {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = normalize_name(s);
        DebatePrompt::ALL
            .into_iter()
            .find(|p| normalize_name(p.name()) == norm)
            .ok_or_else(|| PromptError::UnknownPromptName(s.to_string()))
    }
}

fn normalize_name(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).flat_map(char::to_lowercase).collect()
}
