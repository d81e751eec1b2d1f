mod common;

use std::collections::HashSet;
use std::fs;

use common::{experiment, questions, scripted};
use debatebench::protocols::{ProtocolConfig, ProtocolKind};
use debatebench::runner::{
    load_checkpoint, read_transcripts, resume, run_experiment, BackendSpec, RunError, RunOptions, SUMMARY_FILE,
    TRANSCRIPTS_FILE,
};

fn som() -> ProtocolConfig {
    let mut p = ProtocolConfig::new(ProtocolKind::SocietyOfMinds);
    p.num_agents = Some(3);
    p.num_rounds = Some(2);
    p
}

#[test]
fn every_question_gets_one_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let qs = questions(50, 4, 1);
    let mut cfg = experiment(dir.path(), som(), &qs, scripted(0.6, 0.3));
    cfg.workers = 8;
    let out = run_experiment(&cfg, RunOptions::default()).unwrap();
    let row = out.summary.unwrap();
    let ts = read_transcripts(&cfg.output_dir.join(TRANSCRIPTS_FILE)).unwrap();
    assert_eq!(ts.len(), 50);
    let ids: HashSet<_> = ts.iter().map(|t| t.question_id.clone()).collect();
    assert_eq!(ids.len(), 50);
    let correct = ts.iter().filter(|t| t.final_answer.is(t.gold.unwrap())).count();
    assert_eq!(row.correct as usize, correct);
    assert_eq!(row.accuracy, correct as f64 / 50.0);
    assert_eq!(row.avg_api_calls, ts.iter().map(|t| t.api_calls).sum::<u64>() as f64 / 50.0);
    assert_eq!(row.avg_api_calls, 6.0);
}

#[test]
fn worker_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let qs = questions(40, 4, 2);
    let mut outputs = Vec::new();
    for workers in [1, 8] {
        let mut cfg = experiment(dir.path(), som(), &qs, scripted(0.6, 0.5));
        cfg.workers = workers;
        cfg.output_dir = dir.path().join(format!("w{workers}"));
        run_experiment(&cfg, RunOptions::default()).unwrap();
        let mut ts = read_transcripts(&cfg.output_dir.join(TRANSCRIPTS_FILE)).unwrap();
        ts.sort_by(|a, b| a.question_id.cmp(&b.question_id));
        outputs.push((
            fs::read(cfg.output_dir.join(SUMMARY_FILE)).unwrap(),
            fs::read(cfg.output_dir.join("agents.jsonl")).unwrap(),
            ts,
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn kill_and_resume_finishes_without_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let qs = questions(50, 4, 3);
    let mut cfg = experiment(dir.path(), som(), &qs, scripted(0.6, 0.0));
    cfg.workers = 4;
    let first = run_experiment(&cfg, RunOptions { stop_after: Some(20) }).unwrap();
    assert_eq!(first.processed, 20);
    assert!(first.summary.is_none());
    let second = resume(&cfg.output_dir, Some(3), RunOptions::default()).unwrap();
    assert_eq!((second.already_done, second.processed), (20, 30));
    let ts = read_transcripts(&cfg.output_dir.join(TRANSCRIPTS_FILE)).unwrap();
    let ids: HashSet<_> = ts.iter().map(|t| t.question_id.clone()).collect();
    assert_eq!((ts.len(), ids.len()), (50, 50));
    assert!(second.summary.is_some());
}

#[test]
fn partial_last_line_is_dropped_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let qs = questions(10, 3, 4);
    let cfg = experiment(dir.path(), ProtocolConfig::new(ProtocolKind::SingleAgent), &qs, scripted(0.6, 0.0));
    run_experiment(&cfg, RunOptions { stop_after: Some(4) }).unwrap();
    let path = cfg.output_dir.join(TRANSCRIPTS_FILE);
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{\"schema\":\"transcript/1\",\"question_id\":\"q00");
    fs::write(&path, text).unwrap();
    let out = resume(&cfg.output_dir, None, RunOptions::default()).unwrap();
    assert_eq!((out.already_done, out.processed), (4, 6));
    assert_eq!(read_transcripts(&path).unwrap().len(), 10);
}

#[test]
fn empty_transcript_file_means_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let qs = questions(8, 4, 5);
    let cfg = experiment(dir.path(), ProtocolConfig::new(ProtocolKind::SingleAgent), &qs, scripted(0.6, 0.0));
    fs::create_dir_all(&cfg.output_dir).unwrap();
    fs::write(cfg.output_dir.join(TRANSCRIPTS_FILE), "").unwrap();
    assert_eq!(run_experiment(&cfg, RunOptions::default()).unwrap().processed, 8);
}

#[test]
fn complete_resume_makes_no_calls_and_regenerates_summary() {
    let dir = tempfile::tempdir().unwrap();
    let qs = questions(6, 4, 6);
    let store = dir.path().join("calls.jsonl");
    let mut cfg = experiment(dir.path(), ProtocolConfig::new(ProtocolKind::SingleAgent), &qs, scripted(0.6, 0.0));
    cfg.record = Some(store.clone());
    run_experiment(&cfg, RunOptions::default()).unwrap();
    let calls = fs::read_to_string(&store).unwrap().lines().count();
    assert_eq!(calls, 6);
    let summary = cfg.output_dir.join(SUMMARY_FILE);
    let before = fs::read(&summary).unwrap();
    fs::remove_file(&summary).unwrap();
    let out = resume(&cfg.output_dir, Some(2), RunOptions::default()).unwrap();
    assert_eq!(out.processed, 0);
    assert_eq!(fs::read_to_string(&store).unwrap().lines().count(), calls);
    assert_eq!(fs::read(&summary).unwrap(), before);
}

#[test]
fn edited_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let qs = questions(4, 4, 7);
    let mut cfg = experiment(dir.path(), ProtocolConfig::new(ProtocolKind::SingleAgent), &qs, scripted(0.6, 0.0));
    run_experiment(&cfg, RunOptions { stop_after: Some(2) }).unwrap();
    cfg.protocol.sampling.temperature = 0.2;
    assert!(matches!(run_experiment(&cfg, RunOptions::default()), Err(RunError::DigestMismatch { .. })));

    let snap = cfg.output_dir.join("config.json");
    let text = fs::read_to_string(&snap).unwrap().replace("\"synthetic\"", "\"edited\"");
    fs::write(&snap, text).unwrap();
    assert!(matches!(load_checkpoint(&cfg.output_dir), Err(RunError::DigestMismatch { .. })));
}

#[test]
fn record_then_replay_reproduces_summary_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let qs = questions(12, 4, 8);
    let mut p = ProtocolConfig::new(ProtocolKind::MultiPersona);
    p.max_rounds = Some(3);
    let store = dir.path().join("replay.jsonl");
    let mut cfg = experiment(dir.path(), p, &qs, scripted(0.6, 0.2));
    cfg.workers = 4;
    cfg.record = Some(store.clone());
    run_experiment(&cfg, RunOptions::default()).unwrap();

    let mut replay = cfg.clone();
    replay.record = None;
    replay.backend = BackendSpec::Replay { store };
    replay.output_dir = dir.path().join("replayed");
    let out = run_experiment(&replay, RunOptions::default()).unwrap();
    assert_eq!(out.summary.unwrap().errored, 0);
    assert_eq!(
        fs::read(cfg.output_dir.join(SUMMARY_FILE)).unwrap(),
        fs::read(replay.output_dir.join(SUMMARY_FILE)).unwrap()
    );
}

#[test]
fn failed_questions_count_as_incorrect() {
    let dir = tempfile::tempdir().unwrap();
    let qs = questions(5, 4, 9);
    let store = dir.path().join("empty.jsonl");
    fs::write(&store, "").unwrap();
    let mut cfg = experiment(dir.path(), ProtocolConfig::new(ProtocolKind::SingleAgent), &qs, scripted(0.6, 0.0));
    cfg.backend = BackendSpec::Replay { store };
    let row = run_experiment(&cfg, RunOptions::default()).unwrap().summary.unwrap();
    assert_eq!((row.errored, row.correct, row.accuracy), (5, 0, 0.0));
}

#[test]
fn zero_workers_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = experiment(dir.path(), ProtocolConfig::new(ProtocolKind::SingleAgent), &questions(2, 4, 0), scripted(0.6, 0.0));
    cfg.workers = 0;
    match run_experiment(&cfg, RunOptions::default()) {
        Err(RunError::Config(e)) => assert_eq!(e.path, "workers"),
        other => panic!("{other:?}"),
    }
}
