//! Measurements: prompt scoring and classification, perplexity,
//! layer-wise sentence retrieval, forgetting deltas and resource accounting.
//!
//! Every text is scored with the end-of-document id prepended as a
//! beginning-of-sequence token, so the first real token is predicted too.

mod templates;

pub use templates::{
    builtin_templates, find_template, parse_templates, synthetic_templates, PromptTemplate, BUILTIN_TEMPLATES,
    LABEL_SLOT,
};

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{pack_sequences, DataError, ParallelCorpus, TaskDataset, TaskExample};
use crate::model::{forward, Checkpoint, ModelError, ModelSpec};
use crate::peft::{check_same_architecture, trainable_params, PeftError, StrategySpec, StrategyState};
use crate::tokenizer::TokenizerModel;
use crate::train::{batches_perplexity, PromptedExample, RunLog, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("template `{name}`: {message}")]
    Template { name: String, message: String },
    #[error("example is missing field `{0}`")]
    MissingField(String),
    #[error("render: {0}")]
    Render(String),
    #[error("text of {len} tokens exceeds the model's {max}")]
    TooLong { len: usize, max: usize },
    #[error("{0}")]
    Empty(String),
    #[error("tokenizer needs an end-of-document id for scoring")]
    NoEod,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Peft(#[from] PeftError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Which tokens of a rendered prompt count towards its score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSpan {
    /// Every token of the rendered text.
    #[default]
    Whole,
    /// Only the candidate and what follows it.
    Continuation,
}

impl ScoreSpan {
    pub fn name(self) -> &'static str {
        match self {
            ScoreSpan::Whole => "whole",
            ScoreSpan::Continuation => "continuation",
        }
    }
}

impl std::str::FromStr for ScoreSpan {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "whole" => Ok(Self::Whole),
            "continuation" => Ok(Self::Continuation),
            _ => Err(format!("score span must be whole or continuation, got `{s}`")),
        }
    }
}

/// Natural-log softmax of one logit row.
fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Sum of `log p(ids[p] | ids[..p])` for `p` in `from..ids.len()`.
pub fn score_tokens(ckpt: &Checkpoint, ids: &[usize], from: usize) -> Result<f64> {
    let max = ckpt.spec().max_seq;
    if ids.len() > max {
        return Err(EvalError::TooLong { len: ids.len(), max });
    }
    if from == 0 || from > ids.len() {
        return Err(EvalError::Render(format!(
            "scored span must start within 1..={}, got {from}",
            ids.len()
        )));
    }
    if from == ids.len() {
        return Ok(0.0);
    }
    let (logits, _) = forward(ckpt, None, &ids[..ids.len() - 1])?;
    Ok((from..ids.len())
        .map(|p| log_softmax(logits.row(p - 1))[ids[p]])
        .sum())
}

fn eod(tok: &TokenizerModel) -> Result<usize> {
    tok.eod_id().ok_or(EvalError::NoEod)
}

/// Token ids `[eod] ++ prefix ++ rest` and the index where `rest` starts.
pub fn encode_parts(tok: &TokenizerModel, prefix: &str, rest: &str) -> Result<(Vec<usize>, usize)> {
    let mut ids = vec![eod(tok)?];
    ids.extend(tok.encode(prefix.as_bytes()));
    let split = ids.len();
    ids.extend(tok.encode(rest.as_bytes()));
    Ok((ids, split))
}

/// Total log-probability of `text`.
pub fn score(ckpt: &Checkpoint, tok: &TokenizerModel, text: &str) -> Result<f64> {
    let mut ids = vec![eod(tok)?];
    ids.extend(tok.encode(text.as_bytes()));
    score_tokens(ckpt, &ids, 1)
}

/// Score of one candidate rendering under `span`.
pub fn score_candidate(
    ckpt: &Checkpoint,
    tok: &TokenizerModel,
    template: &PromptTemplate,
    example: &TaskExample,
    label: usize,
    span: ScoreSpan,
) -> Result<f64> {
    let (prefix, rest) = template.render_parts(example, label)?;
    match span {
        ScoreSpan::Whole => score(ckpt, tok, &(prefix + &rest)),
        ScoreSpan::Continuation => {
            let (ids, split) = encode_parts(tok, &prefix, &rest)?;
            score_tokens(ckpt, &ids, split)
        }
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.map_or(true, |b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Predicted label and the per-label scores.
pub fn classify(
    ckpt: &Checkpoint,
    tok: &TokenizerModel,
    template: &PromptTemplate,
    example: &TaskExample,
    span: ScoreSpan,
) -> Result<(usize, Vec<f64>)> {
    let n = template.candidates(example).len();
    let scores = (0..n)
        .map(|l| score_candidate(ckpt, tok, template, example, l, span))
        .collect::<Result<Vec<_>>>()?;
    let pred = argmax_first(&scores).ok_or_else(|| EvalError::Render("no candidates to score".into()))?;
    Ok((pred, scores))
}

/// Prompt splits for instruction tuning: the rendering of the gold label,
/// cut at the label slot.
pub fn prompted_examples(template: &PromptTemplate, dataset: &TaskDataset) -> Result<Vec<PromptedExample>> {
    dataset
        .examples
        .iter()
        .map(|e| {
            let (input, target) = template.render_parts(e, e.label)?;
            Ok(PromptedExample {
                task: template.task.clone(),
                language: e.language.clone(),
                input,
                target,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub strategy: String,
    pub task: String,
    pub template: String,
    pub language: String,
    pub n: usize,
    pub accuracy: f64,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub score_span: ScoreSpan,
    /// Wall-clock seconds per prompt; excluded from the CSV and JSON files.
    #[serde(skip)]
    pub seconds_per_prompt: f64,
}

pub const REPORT_HEADER: &str = "model,strategy,task,template,language,n,accuracy,score_span,confusion";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl EvalReport {
    /// Confusion matrix as `row;row` with `|` between counts.
    pub fn confusion_string(&self) -> String {
        self.confusion
            .iter()
            .map(|r| r.iter().map(usize::to_string).collect::<Vec<_>>().join("|"))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn csv_row(&self) -> String {
        [
            csv_field(&self.model),
            csv_field(&self.strategy),
            csv_field(&self.task),
            csv_field(&self.template),
            csv_field(&self.language),
            self.n.to_string(),
            self.accuracy.to_string(),
            self.score_span.name().to_string(),
            self.confusion_string(),
        ]
        .join(",")
    }
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Accuracy and confusion of `template` over `dataset`.
pub fn evaluate_task(
    ckpt: &Checkpoint,
    tok: &TokenizerModel,
    template: &PromptTemplate,
    dataset: &TaskDataset,
    span: ScoreSpan,
    model: &str,
    strategy: &str,
) -> Result<EvalReport> {
    if dataset.examples.is_empty() {
        return Err(EvalError::Empty(format!("task `{}` has no examples", dataset.name)));
    }
    let classes = dataset.class_count();
    let mut confusion = vec![vec![0usize; classes]; classes];
    let start = Instant::now();
    for e in &dataset.examples {
        let (pred, _) = classify(ckpt, tok, template, e, span)?;
        confusion[e.label][pred] += 1;
    }
    let n = dataset.examples.len();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        model: model.to_string(),
        strategy: strategy.to_string(),
        task: dataset.name.clone(),
        template: template.name.clone(),
        language: dataset.language.clone(),
        n,
        accuracy: correct as f64 / n as f64,
        confusion,
        score_span: span,
        seconds_per_prompt: start.elapsed().as_secs_f64() / n as f64,
    })
}

/// `exp` of the mean NLL over documents packed at `seq_len`.
pub fn perplexity(ckpt: &Checkpoint, docs: &[Vec<usize>], seq_len: usize, pad_id: usize, eod_id: usize) -> Result<f64> {
    if docs.iter().all(Vec::is_empty) {
        return Err(EvalError::Empty("no tokens to evaluate".into()));
    }
    let stream = pack_sequences(docs, seq_len, 8, pad_id, eod_id)?;
    Ok(batches_perplexity(ckpt.spec(), &[ckpt.tensors()], &stream.batches())?)
}

/// Mean-pooled hidden states of `sentence` at every layer, excluding the
/// leading end-of-document token.
pub fn sentence_vectors(ckpt: &Checkpoint, tok: &TokenizerModel, sentence: &str) -> Result<Vec<Vec<f64>>> {
    let mut ids = vec![eod(tok)?];
    ids.extend(tok.encode(sentence.as_bytes()));
    if ids.len() > ckpt.spec().max_seq {
        return Err(EvalError::TooLong {
            len: ids.len(),
            max: ckpt.spec().max_seq,
        });
    }
    let (_, hidden) = forward(ckpt, None, &ids)?;
    let d = ckpt.spec().width;
    Ok(hidden
        .layers
        .iter()
        .map(|h| {
            let rows = h.rows();
            let span = if rows > 1 { 1..rows } else { 0..rows };
            let n = span.len() as f64;
            let mut mean = vec![0.0; d];
            for r in span {
                for (m, v) in mean.iter_mut().zip(h.row(r)) {
                    *m += v / n;
                }
            }
            mean
        })
        .collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Index of the key with the highest cosine to `query` (ties: lowest).
pub fn nearest_by_cosine(query: &[f64], keys: &[Vec<f64>]) -> Option<usize> {
    let sims: Vec<f64> = keys.iter().map(|k| cosine(query, k)).collect();
    argmax_first(&sims)
}

/// Fraction of queries whose nearest key is the one at the same index.
pub fn retrieval_accuracy(queries: &[Vec<f64>], keys: &[Vec<f64>]) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let hits = queries
        .iter()
        .enumerate()
        .filter(|(i, q)| nearest_by_cosine(q, keys) == Some(*i))
        .count();
    hits as f64 / queries.len() as f64
}

/// Retrieval accuracy at every layer `0..=L`. New-language sentences are
/// encoded by `new_model`, pivot sentences by `pivot_model`.
pub fn layer_sweep_retrieval(
    new_model: &Checkpoint,
    pivot_model: &Checkpoint,
    tok: &TokenizerModel,
    pairs: &ParallelCorpus,
) -> Result<Vec<f64>> {
    check_same_architecture(new_model.spec(), pivot_model.spec())?;
    if pairs.pairs.is_empty() {
        return Err(EvalError::Empty("parallel corpus is empty".into()));
    }
    let layers = new_model.spec().layers + 1;
    let mut queries = vec![Vec::with_capacity(pairs.pairs.len()); layers];
    let mut keys = vec![Vec::with_capacity(pairs.pairs.len()); layers];
    for (new, pivot) in &pairs.pairs {
        for (l, v) in sentence_vectors(new_model, tok, new)?.into_iter().enumerate() {
            queries[l].push(v);
        }
        for (l, v) in sentence_vectors(pivot_model, tok, pivot)?.into_iter().enumerate() {
            keys[l].push(v);
        }
    }
    Ok((0..layers).map(|l| retrieval_accuracy(&queries[l], &keys[l])).collect())
}

/// Retrieval accuracy at one layer.
pub fn sentence_retrieval(
    new_model: &Checkpoint,
    pivot_model: &Checkpoint,
    tok: &TokenizerModel,
    pairs: &ParallelCorpus,
    layer: usize,
) -> Result<f64> {
    let layers = new_model.spec().layers;
    if layer > layers {
        return Err(EvalError::Render(format!("layer {layer} exceeds the model's {layers}")));
    }
    Ok(layer_sweep_retrieval(new_model, pivot_model, tok, pairs)?[layer])
}

/// A seen-language measurement used for forgetting deltas.
pub enum SeenSet<'a> {
    Perplexity {
        docs: &'a [Vec<usize>],
        seq_len: usize,
        pad_id: usize,
        eod_id: usize,
    },
    Accuracy {
        tok: &'a TokenizerModel,
        template: &'a PromptTemplate,
        dataset: &'a TaskDataset,
        span: ScoreSpan,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    pub before: f64,
    pub after: f64,
    /// `after - before`.
    pub delta: f64,
}

pub fn measure(ckpt: &Checkpoint, set: &SeenSet) -> Result<f64> {
    match set {
        SeenSet::Perplexity {
            docs,
            seq_len,
            pad_id,
            eod_id,
        } => perplexity(ckpt, docs, *seq_len, *pad_id, *eod_id),
        SeenSet::Accuracy {
            tok,
            template,
            dataset,
            span,
        } => Ok(evaluate_task(ckpt, tok, template, dataset, *span, "", "")?.accuracy),
    }
}

pub fn forgetting_delta(base: &Checkpoint, adapted: &Checkpoint, set: &SeenSet) -> Result<Forgetting> {
    let before = measure(base, set)?;
    let after = measure(adapted, set)?;
    Ok(Forgetting {
        before,
        after,
        delta: after - before,
    })
}

/// Base tensors of `base` plus the adapter tensors of `state`.
pub fn with_adapters(base: &Checkpoint, state: &StrategyState) -> Checkpoint {
    let mut tensors = base.base_tensors();
    tensors.extend(state.tensors.clone());
    let mut out = Checkpoint::new(*base.spec(), tensors);
    for (k, v) in base.metadata() {
        out.set_meta(k, v.clone());
    }
    out.set_meta(
        "strategy",
        serde_json::to_value(&state.spec).expect("strategy serializes"),
    );
    out
}

/// One adaptation run to account for.
pub struct ResourceRun<'a> {
    pub label: String,
    pub model: ModelSpec,
    pub strategy: StrategySpec,
    pub log: &'a RunLog,
    pub seconds_per_prompt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceRow {
    pub strategy: String,
    pub trainable_params: usize,
    pub train_seconds: f64,
    pub seconds_per_prompt: f64,
    pub peak_mem_bytes: u64,
}

pub const RESOURCE_HEADER: &str = "strategy,trainable_params,train_seconds,seconds_per_prompt,peak_mem_bytes";

pub fn resource_report(runs: &[ResourceRun]) -> Vec<ResourceRow> {
    runs.iter()
        .map(|r| ResourceRow {
            strategy: r.label.clone(),
            trainable_params: trainable_params(&r.model, &r.strategy),
            train_seconds: r.log.total_seconds(),
            seconds_per_prompt: r.seconds_per_prompt,
            peak_mem_bytes: r.log.peak_mem_bytes(),
        })
        .collect()
}

pub fn resources_to_csv(rows: &[ResourceRow]) -> String {
    let mut out = format!("{RESOURCE_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_field(&r.strategy),
            r.trainable_params,
            r.train_seconds,
            r.seconds_per_prompt,
            r.peak_mem_bytes
        ));
    }
    out
}

/// Number of occurrences of each label.
pub fn label_histogram(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for &l in labels {
        *out.entry(l).or_insert(0) += 1;
    }
    out
}
