//! Loading multiple-choice datasets from the canonical JSONL schema.
//!
//! One JSON object per line:
//!
//! | field                 | type                                   | notes |
//! |-----------------------|----------------------------------------|-------|
//! | `id`                  | string or number, optional             | defaults to `<dataset>-<line>` |
//! | `question`            | string                                 | the stem |
//! | `options`             | `{"A": text, ...}` or `[text, ...]`    | lettered `A..` in order |
//! | `answer_idx`          | letter (`"C"`) or 0-based integer      | preferred gold field |
//! | `answer`              | letter, or the text of the gold option | used when `answer_idx` is absent |
//! | `context`             | string, optional                       | e.g. PubMedQA abstracts |
//!
//! MedQA's published JSONL already fits (`question`, `options`, `answer_idx`).
//! PubMedQA's yes/no/maybe labels become options `A) yes`, `B) no`,
//! `C) maybe`; CIAR's two suggested answers become options `A` and `B`.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{validate_question, AnswerOption, Letter, ModelError, Question};
use crate::prompts::{Exemplar, ExemplarSet};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("{path}:{line_no}: {message}")]
    SchemaError { path: PathBuf, line_no: usize, message: String },
    #[error("question {id}: {source}")]
    ValidationError { id: String, source: ModelError },
    #[error("question {id} has {count} options, outside the manifest range {min}..={max}")]
    OptionCount { id: String, count: usize, min: usize, max: usize },
    #[error("id {0:?} listed in the manifest is missing from the dataset")]
    MissingId(String),
    #[error("cannot sample {requested} of {available} questions")]
    NTooLarge { requested: usize, available: usize },
    #[error("sample size must be positive")]
    EmptySample,
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("io error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn default_option_range() -> (usize, usize) {
    (2, Letter::MAX_OPTIONS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_count: Option<usize>,
    #[serde(default = "default_option_range")]
    pub option_count_range: (usize, usize),
    /// Restrict the dataset to these ids, in this order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<String>>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            name: name.into(),
            path: path.into(),
            expected_count: None,
            option_count_range: default_option_range(),
            ids: None,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let (min, max) = self.option_count_range;
        if min < 2 || max < min || max > Letter::MAX_OPTIONS {
            return Err(DatasetError::Manifest(format!(
                "option_count_range ({min}, {max}) must satisfy 2 <= min <= max <= 26"
            )));
        }
        Ok(())
    }

    /// Relative dataset paths are resolved against `base`.
    pub fn resolved(mut self, base: &Path) -> Self {
        if self.path.is_relative() {
            self.path = base.join(&self.path);
        }
        self
    }
}

/// A benchmark suite: several manifests in one TOML or JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub datasets: Vec<DatasetManifest>,
}

impl SuiteManifest {
    pub fn from_file(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| DatasetError::Io { path: path.into(), message: e.to_string() })?;
        let suite: SuiteManifest = if path.extension().and_then(|e| e.to_str()) == Some("json") {
            serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(SuiteManifest { datasets: suite.datasets.into_iter().map(|m| m.resolved(base)).collect() })
    }
}

pub fn load(manifest: &DatasetManifest) -> Result<Vec<Question>, DatasetError> {
    manifest.validate()?;
    let path = &manifest.path;
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DatasetError::FileNotFound(path.clone()),
        _ => DatasetError::Io { path: path.clone(), message: e.to_string() },
    })?;

    let mut questions = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DatasetError::Io { path: path.clone(), message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let schema_err = |message: String| DatasetError::SchemaError { path: path.clone(), line_no, message };
        let value: Value = serde_json::from_str(&line).map_err(|e| schema_err(e.to_string()))?;
        let mut q = parse_record(&value, &manifest.name, line_no).map_err(schema_err)?;
        q.dataset_tag = manifest.name.clone();
        validate_question(&q).map_err(|source| DatasetError::ValidationError { id: q.id.clone(), source })?;
        let (min, max) = manifest.option_count_range;
        if !(min..=max).contains(&q.options.len()) {
            return Err(DatasetError::OptionCount { id: q.id.clone(), count: q.options.len(), min, max });
        }
        questions.push(q);
    }

    if let Some(ids) = &manifest.ids {
        let mut by_id: IndexMap<String, Question> = questions.into_iter().map(|q| (q.id.clone(), q)).collect();
        questions = ids
            .iter()
            .map(|id| by_id.shift_remove(id).ok_or_else(|| DatasetError::MissingId(id.clone())))
            .collect::<Result<_, _>>()?;
    }

    if let Some(expected) = manifest.expected_count {
        if expected != questions.len() {
            log::warn!("dataset {}: expected {expected} questions, loaded {}", manifest.name, questions.len());
        }
    }
    Ok(questions)
}

/// Maps one canonical JSONL record to a question. Errors are schema
/// messages; the caller attaches the line number.
pub fn parse_record(value: &Value, dataset: &str, line_no: usize) -> Result<Question, String> {
    let obj = value.as_object().ok_or("record is not a JSON object")?;

    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err("field `id` must be a string or number".into()),
        None => format!("{dataset}-{line_no}"),
    };
    let stem = obj
        .get("question")
        .and_then(Value::as_str)
        .ok_or("missing string field `question`")?
        .to_string();

    let texts: Vec<String> = match obj.get("options") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_str().map(str::to_string).ok_or("option texts must be strings"))
            .collect::<Result<_, _>>()?,
        Some(Value::Object(map)) => {
            let mut keyed: Vec<(Letter, String)> = map
                .iter()
                .map(|(k, v)| {
                    let letter: Letter = k.parse().map_err(|_| format!("option key {k:?} is not a capital letter"))?;
                    let text = v.as_str().ok_or("option texts must be strings")?;
                    Ok((letter, text.to_string()))
                })
                .collect::<Result<_, String>>()?;
            keyed.sort_by_key(|(l, _)| *l);
            if let Some((pos, (l, _))) = keyed.iter().enumerate().find(|(i, (l, _))| l.index() != *i) {
                return Err(format!("option letters are not contiguous: {l} at position {pos}"));
            }
            keyed.into_iter().map(|(_, t)| t).collect()
        }
        Some(_) => return Err("field `options` must be an object or array".into()),
        None => return Err("missing field `options`".into()),
    };
    if texts.len() > Letter::MAX_OPTIONS {
        return Err(format!("{} options exceed the 26-letter limit", texts.len()));
    }

    let gold = match (obj.get("answer_idx"), obj.get("answer")) {
        (Some(Value::String(s)), _) => s.parse::<Letter>().map_err(|_| format!("answer_idx {s:?} is not a letter"))?,
        (Some(Value::Number(n)), _) => n
            .as_u64()
            .and_then(|i| Letter::from_index(i as usize))
            .ok_or_else(|| format!("answer_idx {n} is not a valid index"))?,
        (Some(_), _) => return Err("field `answer_idx` must be a letter or integer".into()),
        (None, Some(Value::String(s))) => match s.parse::<Letter>() {
            Ok(l) => l,
            Err(_) => texts
                .iter()
                .position(|t| t.trim() == s.trim())
                .and_then(Letter::from_index)
                .ok_or_else(|| format!("answer {s:?} is neither a letter nor an option text"))?,
        },
        (None, Some(_)) => return Err("field `answer` must be a string".into()),
        (None, None) => return Err("missing gold answer (`answer_idx` or `answer`)".into()),
    };

    let context = match obj.get("context") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Array(parts)) => {
            Some(parts.iter().filter_map(Value::as_str).collect::<Vec<_>>().join("\n"))
        }
        Some(_) => return Err("field `context` must be a string".into()),
    };

    Ok(Question {
        id,
        stem,
        options: texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| AnswerOption { letter: Letter::from_index(i).unwrap(), text })
            .collect(),
        gold,
        context,
        dataset_tag: dataset.to_string(),
    })
}

/// Seeded uniform sample without replacement, returned in original order.
pub fn subsample(questions: &[Question], n: usize, seed: u64) -> Result<Vec<Question>, DatasetError> {
    if n == 0 {
        return Err(DatasetError::EmptySample);
    }
    if n > questions.len() {
        return Err(DatasetError::NTooLarge { requested: n, available: questions.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, questions.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| questions[i].clone()).collect())
}

/// Exemplars use the dataset record schema plus an optional
/// `explanation` field; the record's gold becomes the exemplar answer.
pub fn load_exemplars(path: &Path) -> Result<ExemplarSet, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DatasetError::FileNotFound(path.into()),
        _ => DatasetError::Io { path: path.into(), message: e.to_string() },
    })?;
    let mut exemplars = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let schema_err = |message: String| DatasetError::SchemaError { path: path.into(), line_no: i + 1, message };
        let value: Value = serde_json::from_str(line).map_err(|e| schema_err(e.to_string()))?;
        let question = parse_record(&value, "exemplars", i + 1).map_err(schema_err)?;
        validate_question(&question)
            .map_err(|source| DatasetError::ValidationError { id: question.id.clone(), source })?;
        let explanation = value.get("explanation").and_then(Value::as_str).map(str::to_string);
        exemplars.push(Exemplar { answer: question.gold, question, explanation });
    }
    Ok(ExemplarSet::new(exemplars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn happy_path_preserves_order() {
        let f = write_lines(&[
            r#"{"id": "a", "question": "one?", "options": ["x", "y"], "answer_idx": 1}"#,
            r#"{"id": "b", "question": "two?", "options": {"A": "x", "B": "y", "C": "z"}, "answer": "C"}"#,
            r#"{"id": 3, "question": "three?", "options": ["x", "y"], "answer": "y", "context": "ctx"}"#,
        ]);
        let qs = load(&DatasetManifest::new("t", f.path())).unwrap();
        assert_eq!(qs.iter().map(|q| q.id.as_str()).collect::<Vec<_>>(), ["a", "b", "3"]);
        assert_eq!(qs[0].gold.as_char(), 'B');
        assert_eq!(qs[1].gold.as_char(), 'C');
        assert_eq!(qs[2].gold.as_char(), 'B');
        assert_eq!(qs[2].context.as_deref(), Some("ctx"));
        assert!(qs.iter().all(|q| q.dataset_tag == "t"));
    }

    #[test]
    fn medqa_record() {
        let f = write_lines(&[
            r#"{"question": "A 23-year-old...", "answer": "Nitrofurantoin", "options": {"A": "Ampicillin", "B": "Ceftriaxone", "C": "Doxycycline", "D": "Nitrofurantoin"}, "meta_info": "step2&3", "answer_idx": "D"}"#,
        ]);
        let qs = load(&DatasetManifest::new("medqa", f.path())).unwrap();
        assert_eq!(qs[0].options.len(), 4);
        assert_eq!(qs[0].options.iter().map(|o| o.letter.as_char()).collect::<String>(), "ABCD");
        assert_eq!(qs[0].gold.as_char(), 'D');
        assert_eq!(qs[0].id, "medqa-1");
    }

    #[test]
    fn missing_gold_reports_line() {
        let f = write_lines(&[
            r#"{"id": "a", "question": "q", "options": ["x", "y"], "answer_idx": 0}"#,
            r#"{"id": "b", "question": "q", "options": ["x", "y"]}"#,
        ]);
        match load(&DatasetManifest::new("t", f.path())) {
            Err(DatasetError::SchemaError { line_no, .. }) => assert_eq!(line_no, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_question_reports_id() {
        let f = write_lines(&[r#"{"id": "bad", "question": "q", "options": ["x"], "answer_idx": 0}"#]);
        assert!(matches!(
            load(&DatasetManifest::new("t", f.path())),
            Err(DatasetError::ValidationError { id, .. }) if id == "bad"
        ));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load(&DatasetManifest::new("t", "/definitely/not/here.jsonl")),
            Err(DatasetError::FileNotFound(_))
        ));
    }

    #[test]
    fn option_count_range_enforced() {
        let f = write_lines(&[r#"{"id": "a", "question": "q", "options": ["x", "y", "z"], "answer_idx": 0}"#]);
        let mut m = DatasetManifest::new("t", f.path());
        m.option_count_range = (4, 4);
        assert!(matches!(load(&m), Err(DatasetError::OptionCount { count: 3, .. })));
    }

    #[test]
    fn id_list_selects_and_orders() {
        let f = write_lines(&[
            r#"{"id": "a", "question": "q", "options": ["x", "y"], "answer_idx": 0}"#,
            r#"{"id": "b", "question": "q", "options": ["x", "y"], "answer_idx": 0}"#,
            r#"{"id": "c", "question": "q", "options": ["x", "y"], "answer_idx": 0}"#,
        ]);
        let mut m = DatasetManifest::new("t", f.path());
        m.ids = Some(vec!["c".into(), "a".into()]);
        let ids: Vec<_> = load(&m).unwrap().into_iter().map(|q| q.id).collect();
        assert_eq!(ids, ["c", "a"]);
        m.ids = Some(vec!["zz".into()]);
        assert!(matches!(load(&m), Err(DatasetError::MissingId(_))));
    }

    fn synthetic(n: usize) -> Vec<Question> {
        (0..n)
            .map(|i| Question::new(format!("q{i}"), "s", ["a", "b"], Letter::from_index(0).unwrap()))
            .collect()
    }

    #[test]
    fn full_subsample_is_identity() {
        let qs = synthetic(20);
        assert_eq!(subsample(&qs, 20, 1).unwrap(), qs);
    }

    #[test]
    fn subsample_is_deterministic() {
        let qs = synthetic(7000);
        let a: Vec<_> = subsample(&qs, 500, 7).unwrap().into_iter().map(|q| q.id).collect();
        let b: Vec<_> = subsample(&qs, 500, 7).unwrap().into_iter().map(|q| q.id).collect();
        assert_eq!(a, b);
        assert_eq!(a.len(), 500);
        let c: Vec<_> = subsample(&qs, 500, 8).unwrap().into_iter().map(|q| q.id).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn subsample_guards() {
        let qs = synthetic(3);
        assert!(matches!(subsample(&qs, 0, 1), Err(DatasetError::EmptySample)));
        assert!(matches!(subsample(&qs, 4, 1), Err(DatasetError::NTooLarge { requested: 4, available: 3 })));
    }

    #[test]
    fn exemplars_from_jsonl() {
        let f = write_lines(&[
            r#"{"id": "e1", "question": "q", "options": ["x", "y"], "answer_idx": "B", "explanation": "because y"}"#,
        ]);
        let set = load_exemplars(f.path()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.exemplars[0].answer.as_char(), 'B');
        assert_eq!(set.exemplars[0].explanation.as_deref(), Some("because y"));
    }

    #[test]
    fn suite_manifest_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("suite.toml");
        fs::write(
            &path,
            "[[datasets]]\nname = \"medqa\"\npath = \"medqa.jsonl\"\nexpected_count = 1273\noption_count_range = [4, 4]\n",
        )
        .unwrap();
        let suite = SuiteManifest::from_file(&path).unwrap();
        assert_eq!(suite.datasets[0].path, dir.path().join("medqa.jsonl"));
        assert_eq!(suite.datasets[0].option_count_range, (4, 4));
    }
}
