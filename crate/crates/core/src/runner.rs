//! Experiment execution: a protocol configuration applied to a dataset
//! through one backend, with bounded concurrency, crash-safe transcript
//! checkpointing and resume.
//!
//! An experiment directory holds:
//!
//! | file | content |
//! |------|---------|
//! | `config.json` | `{"digest": ..., "config": ...}` snapshot of the resolved config |
//! | `transcripts.jsonl` | one transcript per processed question, appended as it completes |
//! | `summary.csv` | a single [`SummaryRow`] |
//! | `agents.jsonl` | one [`AgentReport`] per agent |
//!
//! The digest covers everything except `workers` and `output_dir`, so a
//! run may be resumed with a different worker count or from a moved
//! directory.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    AnswerKey, BackendError, ChatBackend, LiveBackend, LiveConfig, PriceTable, RecordingBackend, ReplayBackend,
    ScriptedBackend, ScriptedConfig,
};
use crate::datasets::{self, DatasetError, DatasetManifest};
use crate::metrics::{self, AgentReport, MetricsError, RowLabels, SummaryRow};
use crate::model::{Question, Transcript};
use crate::prompts::{ExemplarSet, TemplateRegistry};
use crate::protocols::{run_protocol, ConfigError, ProtocolConfig, ProtocolContext};

pub const CONFIG_FILE: &str = "config.json";
pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const AGENTS_FILE: &str = "agents.jsonl";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("backend setup failed: {0}")]
    Backend(#[from] BackendError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}:{line}: corrupt transcript line: {message}")]
    CorruptTranscript { path: PathBuf, line: usize, message: String },
    #[error("config digest {found} does not match the checkpointed digest {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |e| RunError::Io { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Live(LiveConfig),
    Scripted(ScriptedConfig),
    /// Serves completions previously captured with `record`.
    Replay { store: PathBuf },
}

impl BackendSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            BackendSpec::Live(_) => "live",
            BackendSpec::Scripted(_) => "scripted",
            BackendSpec::Replay { .. } => "replay",
        }
    }
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label of the configuration, e.g. a preset name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub protocol: ProtocolConfig,
    pub dataset: DatasetManifest,
    /// Subsample size; the whole dataset when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_questions: Option<usize>,
    #[serde(default)]
    pub subsample_seed: u64,
    pub backend: BackendSpec,
    /// Also append every completion to this replay store.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<PathBuf>,
    pub model_id: String,
    /// Inline price table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prices: Option<PriceTable>,
    /// Price table file, used when `prices` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prices_path: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Overrides the live backend's request rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_minute: Option<u32>,
    pub output_dir: PathBuf,
    /// Few-shot exemplar file for the FS prompt styles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplars: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(protocol: ProtocolConfig, dataset: DatasetManifest, backend: BackendSpec, output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            label: None,
            protocol,
            dataset,
            n_questions: None,
            subsample_seed: 0,
            backend,
            record: None,
            model_id: "model".into(),
            prices: None,
            prices_path: None,
            workers: 1,
            requests_per_minute: None,
            output_dir: output_dir.into(),
            exemplars: None,
        }
    }

    /// Reads a TOML file, or JSON when the extension is `.json`. Input
    /// paths are resolved against the file's directory; `output_dir` is
    /// taken as given.
    pub fn from_file(path: &Path) -> Result<Self, RunError> {
        Self::from_value(read_config_value(path)?, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_value(value: Value, base: &Path) -> Result<Self, RunError> {
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| ConfigError::new("", e.to_string()))?;
        Ok(cfg.resolved(base))
    }

    pub fn resolved(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.dataset = self.dataset.resolved(base);
        self.record.as_mut().map(fix);
        self.prices_path.as_mut().map(fix);
        self.exemplars.as_mut().map(fix);
        if let BackendSpec::Replay { store } = &mut self.backend {
            fix(store);
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.protocol.validate().map_err(|e| e.under("protocol"))?;
        self.dataset.validate().map_err(|e| ConfigError::new("dataset", e.to_string()))?;
        if self.workers == 0 {
            return Err(ConfigError::new("workers", "must be at least 1"));
        }
        if self.n_questions == Some(0) {
            return Err(ConfigError::new("n_questions", "must be at least 1"));
        }
        if self.model_id.trim().is_empty() {
            return Err(ConfigError::new("model_id", "must not be empty"));
        }
        if self.requests_per_minute == Some(0) {
            return Err(ConfigError::new("requests_per_minute", "must be at least 1"));
        }
        if let BackendSpec::Scripted(s) = &self.backend {
            s.validate().map_err(|e| ConfigError::new("backend", e.to_string()))?;
        }
        if let Some(p) = &self.prices {
            p.validate().map_err(|e| ConfigError::new("prices", e.to_string()))?;
        }
        if self.protocol.agent_prompt().needs_exemplars() && self.exemplars.is_none() {
            log::warn!("few-shot prompt style without an exemplar file");
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.protocol.protocol.name().to_string())
    }

    /// Hash of the canonical JSON form without `workers` and `output_dir`.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("experiment config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("workers");
            map.remove("output_dir");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn price_table(&self) -> Result<PriceTable, RunError> {
        if let Some(p) = &self.prices {
            return Ok(p.clone());
        }
        if let Some(path) = &self.prices_path {
            return PriceTable::from_file(path).map_err(|e| RunError::Io { path: path.clone(), message: e.to_string() });
        }
        log::info!("no price table configured; costs are reported as zero");
        Ok(PriceTable::new().with(&self.model_id, 0.0, 0.0))
    }

    /// The questions this experiment covers, in dataset order.
    pub fn questions(&self) -> Result<Vec<Question>, RunError> {
        let all = datasets::load(&self.dataset)?;
        Ok(match self.n_questions {
            Some(n) => datasets::subsample(&all, n, self.subsample_seed)?,
            None => all,
        })
    }

    pub fn build_backend(&self, questions: &[Question]) -> Result<Box<dyn ChatBackend>, RunError> {
        let inner: Box<dyn ChatBackend> = match &self.backend {
            BackendSpec::Live(live) => {
                let mut live = live.clone();
                if self.requests_per_minute.is_some() {
                    live.requests_per_minute = self.requests_per_minute;
                }
                Box::new(LiveBackend::new(live)?)
            }
            BackendSpec::Scripted(s) => Box::new(ScriptedBackend::new(s.clone(), AnswerKey::from_questions(questions))?),
            BackendSpec::Replay { store } => Box::new(ReplayBackend::from_file(store)?),
        };
        Ok(match &self.record {
            Some(path) => Box::new(RecordingBackend::new(inner, path)?),
            None => inner,
        })
    }
}

/// Parses a config file into a JSON value, TOML unless the extension is
/// `.json`.
pub fn read_config_value(path: &Path) -> Result<Value, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        serde_json::from_str(&text).map_err(|e| ConfigError::new("", e.to_string()).into())
    } else {
        let v: toml::Value = toml::from_str(&text).map_err(|e| ConfigError::new("", e.to_string()))?;
        serde_json::to_value(v).map_err(|e| ConfigError::new("", e.to_string()).into())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Snapshot {
    digest: String,
    config: ExperimentConfig,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop after this many newly processed questions, leaving the
    /// experiment resumable.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub total: usize,
    pub already_done: usize,
    pub processed: usize,
    /// Present when every question has a transcript.
    pub summary: Option<SummaryRow>,
}

impl RunOutcome {
    pub fn complete(&self) -> bool {
        self.summary.is_some()
    }
}

/// Reads a transcript file. A final line without a newline that does not
/// parse is treated as an interrupted write and cut off.
pub fn read_transcripts(path: &Path) -> Result<Vec<Transcript>, RunError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    let text = String::from_utf8_lossy(&bytes);
    let mut out = Vec::new();
    let mut offset = 0usize;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let complete = line.ends_with('\n');
        if !line.trim().is_empty() {
            match Transcript::from_json_line(line.trim_end()) {
                Ok(t) => out.push(t),
                Err(_) if !complete => {
                    log::warn!("{}: dropping partial last line", path.display());
                    OpenOptions::new()
                        .write(true)
                        .open(path)
                        .and_then(|f| f.set_len(offset as u64))
                        .map_err(io_err(path))?;
                    break;
                }
                Err(e) => {
                    return Err(RunError::CorruptTranscript { path: path.into(), line: i + 1, message: e.to_string() })
                }
            }
        }
        offset += line.len();
    }
    Ok(out)
}

fn check_unique(ts: &[Transcript], path: &Path) -> Result<HashSet<String>, RunError> {
    let mut ids = HashSet::new();
    for (i, t) in ts.iter().enumerate() {
        if !ids.insert(t.question_id.clone()) {
            return Err(RunError::CorruptTranscript {
                path: path.into(),
                line: i + 1,
                message: format!("duplicate question id {}", t.question_id),
            });
        }
    }
    Ok(ids)
}

fn write_snapshot(cfg: &ExperimentConfig, dir: &Path) -> Result<String, RunError> {
    let digest = cfg.digest();
    let path = dir.join(CONFIG_FILE);
    if path.exists() {
        let existing = load_snapshot(&path)?;
        if existing.digest != digest {
            return Err(RunError::DigestMismatch { expected: existing.digest, found: digest });
        }
        return Ok(digest);
    }
    let snap = Snapshot { digest: digest.clone(), config: cfg.clone() };
    let text = serde_json::to_string_pretty(&snap).expect("snapshot serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(digest)
}

fn load_snapshot(path: &Path) -> Result<Snapshot, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let snap: Snapshot =
        serde_json::from_str(&text).map_err(|e| RunError::Io { path: path.into(), message: e.to_string() })?;
    let found = snap.config.digest();
    if found != snap.digest {
        return Err(RunError::DigestMismatch { expected: snap.digest, found });
    }
    Ok(snap)
}

/// Runs every question of the experiment that has no transcript yet.
/// Starting over an existing directory continues it, provided the config
/// digest matches the snapshot.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    let questions = cfg.questions()?;
    let prices = cfg.price_table()?;
    let exemplars = match &cfg.exemplars {
        Some(p) => Some(datasets::load_exemplars(p)?),
        None => None,
    };
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_snapshot(cfg, &dir)?;

    let tpath = dir.join(TRANSCRIPTS_FILE);
    let existing = read_transcripts(&tpath)?;
    let done = check_unique(&existing, &tpath)?;
    let pending: Vec<&Question> = questions.iter().filter(|q| !done.contains(&q.id)).collect();
    let limit = opts.stop_after.map_or(pending.len(), |n| n.min(pending.len()));
    log::info!("{} questions, {} already done, running {}", questions.len(), done.len(), limit);

    let processed = if limit > 0 {
        let backend = cfg.build_backend(&questions)?;
        process(cfg, &pending[..limit], backend.as_ref(), exemplars.as_ref(), &tpath)?
    } else {
        0
    };

    let summary = if done.len() + processed == questions.len() {
        Some(write_reports(cfg, &dir, &prices)?)
    } else {
        None
    };
    Ok(RunOutcome { output_dir: dir, total: questions.len(), already_done: done.len(), processed, summary })
}

fn process(
    cfg: &ExperimentConfig,
    pending: &[&Question],
    backend: &dyn ChatBackend,
    exemplars: Option<&ExemplarSet>,
    tpath: &Path,
) -> Result<usize, RunError> {
    let registry = TemplateRegistry::builtin();
    let ctx = ProtocolContext::new(backend, &registry, &cfg.model_id).with_exemplars(exemplars);
    let mut out = OpenOptions::new().create(true).append(true).open(tpath).map_err(io_err(tpath))?;
    let next = AtomicUsize::new(0);
    let workers = cfg.workers.min(pending.len()).max(1);
    let (tx, rx) = mpsc::channel::<Transcript>();

    std::thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, ctx) = (&next, &ctx);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(q) = pending.get(i) else { break };
                let mut t = run_protocol(q, &cfg.protocol, ctx);
                t.gold = Some(q.gold);
                if let Some(e) = &t.error {
                    log::warn!("question {} failed: {e}", q.id);
                }
                if tx.send(t).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut written = 0usize;
        for t in rx {
            let mut line = t.to_json_line().map_err(|e| RunError::Io { path: tpath.into(), message: e.to_string() })?;
            line.push('\n');
            out.write_all(line.as_bytes()).and_then(|_| out.flush()).map_err(io_err(tpath))?;
            written += 1;
        }
        Ok(written)
    })
}

fn write_reports(cfg: &ExperimentConfig, dir: &Path, prices: &PriceTable) -> Result<SummaryRow, RunError> {
    let ts = read_transcripts(&dir.join(TRANSCRIPTS_FILE))?;
    let labels = RowLabels {
        system: cfg.protocol.protocol.system_name().to_string(),
        config_label: cfg.label(),
        dataset: cfg.dataset.name.clone(),
    };
    let row = metrics::summarize(&labels, &ts, prices)?;
    let agents = metrics::agent_reports(&ts, prices)?;
    write_outputs(dir, &row, &agents)?;
    Ok(row)
}

pub fn write_outputs(dir: &Path, row: &SummaryRow, agents: &[AgentReport]) -> Result<(), RunError> {
    let spath = dir.join(SUMMARY_FILE);
    let file = File::create(&spath).map_err(io_err(&spath))?;
    metrics::write_summary_csv(file, std::slice::from_ref(row))?;
    let apath = dir.join(AGENTS_FILE);
    let mut text = String::new();
    for a in agents {
        text.push_str(&serde_json::to_string(a).expect("agent report serializes"));
        text.push('\n');
    }
    fs::write(&apath, text).map_err(io_err(&apath))
}

/// Loads the checkpointed config of an experiment directory, checking its
/// digest.
pub fn load_checkpoint(dir: &Path) -> Result<ExperimentConfig, RunError> {
    let mut cfg = load_snapshot(&dir.join(CONFIG_FILE))?.config;
    cfg.output_dir = dir.to_path_buf();
    Ok(cfg)
}

/// Continues an interrupted experiment from its directory.
pub fn resume(dir: &Path, workers: Option<usize>, opts: RunOptions) -> Result<RunOutcome, RunError> {
    let mut cfg = load_checkpoint(dir)?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    run_experiment(&cfg, opts)
}

/// Reports recomputed from persisted files alone.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub summary: SummaryRow,
    pub agents: Vec<AgentReport>,
    pub relative_improvement: metrics::RelativeImprovement,
}

pub fn report(dir: &Path) -> Result<Report, RunError> {
    let cfg = load_checkpoint(dir)?;
    let prices = cfg.price_table()?;
    let ts = read_transcripts(&dir.join(TRANSCRIPTS_FILE))?;
    let labels = RowLabels {
        system: cfg.protocol.protocol.system_name().to_string(),
        config_label: cfg.label(),
        dataset: cfg.dataset.name.clone(),
    };
    Ok(Report {
        summary: metrics::summarize(&labels, &ts, &prices)?,
        agents: metrics::agent_reports(&ts, &prices)?,
        relative_improvement: metrics::relative_improvement(&ts)?,
    })
}
