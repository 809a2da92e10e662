//! Task and parallel-corpus files.
//!
//! Task data is JSON lines, one flat object per example. Required keys by
//! kind, plus an integer `label` and an optional `language`:
//!
//! ```text
//! nli                 premise, hypothesis                 (3 classes)
//! paraphrase          sentence1, sentence2                (2 classes)
//! completion-choice   context, choices: [..]              (len(choices) classes)
//! cause-effect        premise, question, choices: [..]    (question: cause | effect)
//! ```
//!
//! Example NLI line:
//!
//! ```text
//! {"premise": "the cat sleeps", "hypothesis": "a cat sleeps", "label": 0}
//! ```
//!
//! Parallel corpora are two tab-separated columns: new-language sentence,
//! then pivot sentence.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DataError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Nli,
    Paraphrase,
    CompletionChoice,
    CauseEffect,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Nli => "nli",
            TaskKind::Paraphrase => "paraphrase",
            TaskKind::CompletionChoice => "completion-choice",
            TaskKind::CauseEffect => "cause-effect",
        }
    }

    pub fn required_fields(self) -> &'static [&'static str] {
        match self {
            TaskKind::Nli => &["premise", "hypothesis"],
            TaskKind::Paraphrase => &["sentence1", "sentence2"],
            TaskKind::CompletionChoice => &["context"],
            TaskKind::CauseEffect => &["premise", "question"],
        }
    }

    pub fn uses_choices(self) -> bool {
        matches!(self, TaskKind::CompletionChoice | TaskKind::CauseEffect)
    }

    /// Fixed class count, or `None` when it comes from the choices.
    pub fn fixed_classes(self) -> Option<usize> {
        match self {
            TaskKind::Nli => Some(3),
            TaskKind::Paraphrase => Some(2),
            _ => None,
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        [
            TaskKind::Nli,
            TaskKind::Paraphrase,
            TaskKind::CompletionChoice,
            TaskKind::CauseEffect,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| DataError::Invalid(format!("unknown task kind {s:?}")))
    }
}

/// One labelled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub fields: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<String>,
    pub label: usize,
    pub language: String,
}

impl TaskExample {
    pub fn class_count(&self, kind: TaskKind) -> usize {
        kind.fixed_classes().unwrap_or(self.choices.len())
    }

    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields.get(name).map(String::as_str)
    }

    /// Flat JSON record in the task-file format.
    pub fn to_record(&self) -> Value {
        let mut m = serde_json::Map::new();
        for (k, v) in &self.fields {
            m.insert(k.clone(), Value::from(v.clone()));
        }
        if !self.choices.is_empty() {
            m.insert("choices".into(), Value::from(self.choices.clone()));
        }
        m.insert("label".into(), Value::from(self.label));
        m.insert("language".into(), Value::from(self.language.clone()));
        Value::Object(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub kind: TaskKind,
    pub language: String,
    pub split: String,
    pub examples: Vec<TaskExample>,
}

impl TaskDataset {
    pub fn class_count(&self) -> usize {
        self.examples.first().map_or(0, |e| e.class_count(self.kind))
    }

    pub fn to_jsonl(&self) -> String {
        self.examples
            .iter()
            .map(|e| e.to_record().to_string() + "\n")
            .collect()
    }
}

fn malformed(path: &str, line: usize, message: impl Into<String>) -> DataError {
    DataError::Malformed {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

fn parse_example(source: &str, line: usize, kind: TaskKind, language: &str, text: &str) -> Result<TaskExample> {
    let record: serde_json::Map<String, Value> =
        serde_json::from_str(text).map_err(|e| malformed(source, line, e.to_string()))?;
    let mut fields = BTreeMap::new();
    let mut choices = Vec::new();
    let mut label = None;
    let mut lang = language.to_string();
    for (key, value) in record {
        match key.as_str() {
            "label" => {
                label = Some(
                    value
                        .as_u64()
                        .ok_or_else(|| malformed(source, line, "label must be a non-negative integer"))?
                        as usize,
                )
            }
            "language" => {
                lang = value
                    .as_str()
                    .ok_or_else(|| malformed(source, line, "language must be a string"))?
                    .to_string()
            }
            "choices" if kind.uses_choices() => {
                let items = value
                    .as_array()
                    .ok_or_else(|| malformed(source, line, "choices must be an array"))?;
                for item in items {
                    choices.push(
                        item.as_str()
                            .ok_or_else(|| malformed(source, line, "choices must be strings"))?
                            .to_string(),
                    );
                }
            }
            k if kind.required_fields().contains(&k) => {
                let s = value
                    .as_str()
                    .ok_or_else(|| malformed(source, line, format!("`{k}` must be a string")))?;
                fields.insert(key.clone(), s.to_string());
            }
            other => {
                return Err(malformed(
                    source,
                    line,
                    format!("unexpected field `{other}` for {} task", kind.name()),
                ))
            }
        }
    }
    for f in kind.required_fields() {
        if !fields.contains_key(*f) {
            return Err(malformed(source, line, format!("missing field `{f}`")));
        }
    }
    if kind.uses_choices() && choices.len() < 2 {
        return Err(malformed(source, line, "at least two choices are required"));
    }
    if kind == TaskKind::CauseEffect && !matches!(fields["question"].as_str(), "cause" | "effect") {
        return Err(malformed(source, line, "question must be `cause` or `effect`"));
    }
    let label = label.ok_or_else(|| malformed(source, line, "missing field `label`"))?;
    let example = TaskExample {
        fields,
        choices,
        label,
        language: lang,
    };
    let classes = example.class_count(kind);
    if label >= classes {
        return Err(malformed(
            source,
            line,
            format!("label {label} out of range for {classes} classes"),
        ));
    }
    Ok(example)
}

pub fn parse_task_data(source: &str, text: &str, kind: TaskKind, language: &str) -> Result<TaskDataset> {
    let mut examples: Vec<TaskExample> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_example(source, i + 1, kind, language, line)?;
        if let Some(first) = examples.first() {
            if first.class_count(kind) != ex.class_count(kind) {
                return Err(malformed(
                    source,
                    i + 1,
                    format!(
                        "{} classes, but earlier examples have {}",
                        ex.class_count(kind),
                        first.class_count(kind)
                    ),
                ));
            }
        }
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(DataError::Invalid(format!("{source}: no examples")));
    }
    let name = Path::new(source)
        .file_stem()
        .map_or_else(|| source.to_string(), |s| s.to_string_lossy().into_owned());
    Ok(TaskDataset {
        name,
        kind,
        language: language.to_string(),
        split: "test".into(),
        examples,
    })
}

pub fn load_task_data(path: &Path, kind: TaskKind, language: &str) -> Result<TaskDataset> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_task_data(&path.display().to_string(), &text, kind, language)
}

/// Aligned (new-language, pivot) sentence pairs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub pairs: Vec<(String, String)>,
}

impl ParallelCorpus {
    pub const DEFAULT_EVAL_SIZE: usize = 200;

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The first `n` pairs.
    pub fn subset(&self, n: usize) -> ParallelCorpus {
        ParallelCorpus {
            pairs: self.pairs.iter().take(n).cloned().collect(),
        }
    }

    pub fn to_tsv(&self) -> String {
        self.pairs.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect()
    }
}

pub fn parse_parallel(source: &str, text: &str) -> Result<ParallelCorpus> {
    let mut pairs = Vec::new();
    for (i, line) in text.replace("\r\n", "\n").lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [new, pivot] = cols[..] else {
            return Err(malformed(
                source,
                i + 1,
                format!("expected 2 tab-separated columns, found {}", cols.len()),
            ));
        };
        if new.trim().is_empty() || pivot.trim().is_empty() {
            return Err(malformed(source, i + 1, "empty side in parallel pair"));
        }
        pairs.push((new.to_string(), pivot.to_string()));
    }
    if pairs.is_empty() {
        return Err(DataError::Invalid(format!("{source}: no sentence pairs")));
    }
    Ok(ParallelCorpus { pairs })
}

pub fn load_parallel(path: &Path) -> Result<ParallelCorpus> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_parallel(&path.display().to_string(), &text)
}
