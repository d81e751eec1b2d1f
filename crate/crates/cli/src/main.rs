use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use debatebench::backend::ScriptedConfig;
use debatebench::metrics::{self, SummaryRow};
use debatebench::protocols::{preset, presets, ProtocolKind};
use debatebench::runner::{self, BackendSpec, ExperimentConfig, RunError, RunOptions};

#[derive(Parser)]
#[command(name = "debatebench", version, about = "Benchmark multi-agent debate protocols on multiple-choice QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Scripted,
    Live,
    Replay,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config file (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: PathBuf,
    /// Replace the config's protocol with a named preset.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for question subsampling and for the sampling parameters.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_questions: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment.
    Run {
        #[command(flatten)]
        args: ConfigArgs,
        /// Stop after this many questions, leaving the run resumable.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Continue an interrupted experiment.
    Resume {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Recompute reports from persisted transcripts.
    Report {
        #[arg(long = "dir", required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Comma-separated dataset names for leave-one-out config selection.
        #[arg(long, value_delimiter = ',')]
        groups: Option<Vec<String>>,
    },
    ListProtocols,
    ListPresets,
    /// Check a config and its dataset without calling any backend.
    Validate {
        #[command(flatten)]
        args: ConfigArgs,
    },
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let code = if matches!(e, RunError::Config(_)) { 2 } else { 1 };
        Failure { code, error: e.into() }
    }
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut value = runner::read_config_value(&args.config)?;
    if let Some(name) = &args.preset {
        let p = preset(name).ok_or_else(|| usage(anyhow!("unknown preset {name:?}; see list-presets")))?;
        let obj = value.as_object_mut().ok_or_else(|| usage(anyhow!("config must be a table")))?;
        obj.insert("protocol".into(), serde_json::to_value(&p.config).context("serializing preset")?);
        obj.insert("label".into(), p.name.clone().into());
    }
    let base = args.config.parent().unwrap_or(Path::new("."));
    let mut cfg = ExperimentConfig::from_value(value, base)?;
    if let Some(kind) = args.backend {
        cfg.backend = match (kind, &cfg.backend) {
            (BackendKind::Scripted, BackendSpec::Scripted(s)) => BackendSpec::Scripted(s.clone()),
            (BackendKind::Scripted, _) => BackendSpec::Scripted(ScriptedConfig::default()),
            (BackendKind::Live, BackendSpec::Live(l)) => BackendSpec::Live(l.clone()),
            (BackendKind::Live, _) => return Err(usage(anyhow!("--backend live needs a [backend] live section in the config"))),
            (BackendKind::Replay, BackendSpec::Replay { store }) => BackendSpec::Replay { store: store.clone() },
            (BackendKind::Replay, _) => {
                let store = cfg.record.take().ok_or_else(|| usage(anyhow!("--backend replay needs a replay store; set `record` in the config")))?;
                BackendSpec::Replay { store }
            }
        };
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.subsample_seed = seed;
        cfg.protocol.sampling.seed = Some(seed);
    }
    if let Some(n) = args.n_questions {
        cfg.n_questions = Some(n);
    }
    cfg.validate().map_err(RunError::from)?;
    Ok(cfg)
}

fn print_outcome(outcome: &runner::RunOutcome) {
    println!(
        "{}: {} questions, {} already done, {} processed",
        outcome.output_dir.display(),
        outcome.total,
        outcome.already_done,
        outcome.processed
    );
    match &outcome.summary {
        Some(row) => print_summary(row),
        None => println!("incomplete; continue with `debatebench resume --dir {}`", outcome.output_dir.display()),
    }
}

fn print_summary(row: &SummaryRow) {
    println!("{} / {} on {} ({})", row.system, row.config_label, row.dataset, row.model_id);
    println!(
        "accuracy {:.4} ({} of {}, {} errored), avg cost ${:.6}, avg api calls {:.2}, avg seconds {:.2}",
        row.accuracy, row.correct, row.questions, row.errored, row.avg_cost_usd, row.avg_api_calls, row.avg_seconds
    );
}

fn report(dirs: &[PathBuf], format: Format, groups: Option<&[String]>) -> Result<(), Failure> {
    let mut reports = Vec::new();
    for dir in dirs {
        reports.push(runner::report(dir).with_context(|| format!("report for {}", dir.display()))?);
    }
    let kfold = match groups {
        Some(group) => {
            let mut table = BTreeMap::new();
            for r in &reports {
                let key = (r.summary.config_label.clone(), r.summary.dataset.clone());
                if table.insert(key.clone(), r.summary.accuracy).is_some() {
                    return Err(usage(anyhow!("two experiments share config {:?} and dataset {:?}", key.0, key.1)));
                }
            }
            Some(metrics::kfold_select(&table, group).map_err(|e| usage(e.into()))?)
        }
        None => None,
    };
    if format == Format::Json {
        let out = serde_json::json!({"reports": reports, "kfold": kfold});
        println!("{}", serde_json::to_string_pretty(&out).context("serializing report")?);
        return Ok(());
    }
    let rows: Vec<SummaryRow> = reports.iter().map(|r| r.summary.clone()).collect();
    metrics::write_summary_csv(std::io::stdout(), &rows).map_err(|e| anyhow!(e))?;
    for (dir, r) in dirs.iter().zip(&reports) {
        let ri = &r.relative_improvement;
        println!(
            "{}: first agent round 1 {:.4}, last round {:.4}, final {:.4} ({:+.2} pp)",
            dir.display(),
            ri.first_round_first_agent_acc,
            ri.last_round_first_agent_acc,
            ri.final_answer_acc,
            ri.debate_gain_pp()
        );
    }
    if let Some(sel) = kfold {
        for (dataset, config) in sel {
            println!("held out {dataset}: {config}");
        }
    }
    Ok(())
}

/// Prints one item per line, stopping quietly if stdout is closed.
fn emit(lines: impl Iterator<Item = String>) {
    let mut out = std::io::stdout().lock();
    for line in lines {
        if writeln!(out, "{line}").is_err() {
            break;
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { args, stop_after } => {
            let cfg = load_config(&args)?;
            let outcome = runner::run_experiment(&cfg, RunOptions { stop_after })?;
            print_outcome(&outcome);
        }
        Command::Resume { dir, workers } => {
            if workers == Some(0) {
                return Err(usage(anyhow!("--workers must be at least 1")));
            }
            print_outcome(&runner::resume(&dir, workers, RunOptions::default())?);
        }
        Command::Report { dirs, format, groups } => report(&dirs, format, groups.as_deref())?,
        Command::ListProtocols => emit(ProtocolKind::ALL.iter().map(|k| k.name().to_string())),
        Command::ListPresets => emit(presets().into_iter().map(|p| p.name)),
        Command::Validate { args } => {
            let cfg = load_config(&args)?;
            let questions = cfg.questions()?;
            if let Some(p) = &cfg.exemplars {
                debatebench::datasets::load_exemplars(p).map_err(RunError::from)?;
            }
            cfg.price_table()?;
            if questions.is_empty() {
                return Err(anyhow!("dataset {} is empty", cfg.dataset.name).into());
            }
            println!(
                "ok: {} on {} questions of {}, about {} api calls per question",
                cfg.label(),
                questions.len(),
                cfg.dataset.name,
                cfg.protocol.expected_api_calls()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
