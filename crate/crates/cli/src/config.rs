//! The experiment config file and its validation.

use std::path::{Path, PathBuf};

use adaptkit_core::eval::ScoreSpan;
use adaptkit_core::peft::{single_layer_scaled, Variant};
use adaptkit_core::{CorpusSpec, ModelSpec, StrategySpec, SynthSpec, TaskKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{validation, CliError, Result};

/// One file that fully specifies a run.
///
/// Relative paths inside the file are resolved against the file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    /// Downloaded corpora, tokenizers and pretrained bases.
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    pub model: ModelSpec,
    pub strategy: StrategySpec,
    pub train: TrainConfig,
    pub base: BaseSection,
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(skip)]
    pub root: PathBuf,
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from(".adaptkit-cache")
}

/// Where the base model comes from: an existing checkpoint with its
/// tokenizer, or pretraining from scratch on the seen language.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Generated two-language corpus; language A is seen, B is new.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seen: Option<CorpusSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new: Option<CorpusSpec>,
    /// New-language training documents drawn from the non-held-out pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_count: Option<usize>,
    /// The same as a fraction of the pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_fraction: Option<f64>,
    #[serde(default)]
    pub sample_seed: u64,
    /// Documents per language used to train the tokenizer.
    #[serde(default = "default_tokenizer_docs")]
    pub tokenizer_docs: usize,
}

fn default_tokenizer_docs() -> usize {
    300
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            synthetic: Some(SynthSpec::default()),
            seen: None,
            new: None,
            sample_count: None,
            sample_fraction: None,
            sample_seed: 0,
            tokenizer_docs: default_tokenizer_docs(),
        }
    }
}

/// A task to score. Without `path` the task comes from the synthetic
/// corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub kind: TaskKind,
    pub language: String,
    pub template: String,
    /// Score only the first `limit` examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

/// `@base` names the configured base and `@adapted` the checkpoint written
/// by `adapt` into the output directory.
pub const BASE_REF: &str = "@base";
pub const ADAPTED_REF: &str = "@adapted";

/// A model to evaluate. With `adapters`, the bundle is transplanted onto
/// `checkpoint`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    pub label: String,
    pub checkpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapters: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub score_span: ScoreSpan,
    #[serde(default)]
    pub tasks: Vec<TaskSource>,
    /// Extra prompt templates (JSON lines) besides the built-in ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    /// Tab-separated (new, pivot) pairs; defaults to the synthetic ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_pairs: Option<PathBuf>,
    #[serde(default = "default_retrieval_size")]
    pub retrieval_size: usize,
    /// Layers reported by `probe`; all of `0..=L` by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    /// Models for `eval`; `@base` and `@adapted` by default.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<ModelRef>,
    /// Also emit forgetting deltas of every model against the base.
    #[serde(default)]
    pub paired: bool,
}

fn default_retrieval_size() -> usize {
    adaptkit_core::ParallelCorpus::DEFAULT_EVAL_SIZE
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            score_span: ScoreSpan::Whole,
            tasks: Vec::new(),
            templates: None,
            retrieval_pairs: None,
            retrieval_size: default_retrieval_size(),
            layers: None,
            models: Vec::new(),
            paired: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    DataSize,
    ReductionFactor,
    BatchSize,
    Placement,
    SeqLen,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::DataSize => "data_size",
            Axis::ReductionFactor => "reduction_factor",
            Axis::BatchSize => "batch_size",
            Axis::Placement => "placement",
            Axis::SeqLen => "seq_len",
        }
    }
}

/// One axis of the experiment grid; every other setting comes from the
/// enclosing config.
///
/// `data_size` takes fractions of the pool (floats) or document counts
/// (integers). `placement` takes block indices for a single scaled adapter
/// or `"all"`. `seq_len` halves the steps when the length doubles, keeping
/// the number of trained tokens fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<toml::Value>,
}

impl SweepSpec {
    /// Display form of a value, used in directory names and CSV keys.
    pub fn label(value: &toml::Value) -> String {
        match value {
            toml::Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }

    /// The run config for `values[i]`.
    pub fn apply(&self, cfg: &ExperimentConfig, i: usize) -> Result<ExperimentConfig> {
        let path = format!("sweep.values[{i}]");
        let value = &self.values[i];
        let mut out = cfg.clone();
        out.sweep = None;
        let int = || -> Result<usize> {
            value
                .as_integer()
                .and_then(|v| usize::try_from(v).ok())
                .ok_or_else(|| validation(&path, format!("{} needs a non-negative integer, got {value}", self.axis.name())))
        };
        match self.axis {
            Axis::DataSize => match value {
                toml::Value::Float(f) => {
                    out.data.sample_fraction = Some(*f);
                    out.data.sample_count = None;
                }
                toml::Value::Integer(_) => {
                    out.data.sample_count = Some(int()?);
                    out.data.sample_fraction = None;
                }
                _ => return Err(validation(&path, format!("data_size needs a fraction or a count, got {value}"))),
            },
            Axis::ReductionFactor => out.strategy.reduction = int()?,
            Axis::BatchSize => out.train.batch_size = int()?,
            Axis::Placement => {
                if value.as_str() == Some("all") {
                    out.strategy.placement = None;
                    out.strategy.single_layer_scaled = None;
                } else {
                    let block = int()?;
                    if block >= cfg.model.layers {
                        return Err(validation(&path, format!("block {block} is outside 0..{}", cfg.model.layers)));
                    }
                    out.strategy = single_layer_scaled(&cfg.strategy, &cfg.model, block)?;
                }
            }
            Axis::SeqLen => {
                let len = int()?;
                if len < 2 {
                    return Err(validation(&path, "seq_len must be at least 2"));
                }
                let steps = (cfg.train.steps * cfg.train.seq_len / len).max(1);
                out.train.seq_len = len;
                out.train.steps = steps;
                out.train.eval_every = cfg.train.eval_every.min(steps);
            }
        }
        out.validate().map_err(|e| e.within(&path))?;
        Ok(out)
    }
}

impl ExperimentConfig {
    /// The default toy experiment: MAD-X on the synthetic corpus.
    pub fn toy(out_dir: impl Into<PathBuf>) -> Self {
        let pretrain = TrainConfig {
            steps: 3000,
            eval_every: 500,
            ..TrainConfig::toy()
        };
        Self {
            out_dir: out_dir.into(),
            cache_dir: default_cache_dir(),
            model: ModelSpec::toy(),
            strategy: StrategySpec::new(Variant::Madx),
            train: TrainConfig {
                peak_lr: 1e-3,
                ..TrainConfig::toy()
            },
            base: BaseSection {
                pretrain: Some(pretrain),
                ..BaseSection::default()
            },
            data: DataSection::default(),
            eval: EvalSection {
                tasks: [adaptkit_core::data::LANG_B, adaptkit_core::data::LANG_A]
                    .into_iter()
                    .map(|language| TaskSource {
                        path: None,
                        kind: TaskKind::Nli,
                        language: language.into(),
                        template: format!("toy-nli-{language}"),
                        limit: None,
                    })
                    .collect(),
                paired: true,
                ..EvalSection::default()
            },
            sweep: None,
            root: PathBuf::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            validation(toml_error_path(text, &e).unwrap_or_else(|| "config".into()), message)
        })
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| validation("config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn out(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    pub fn cache(&self) -> PathBuf {
        self.resolve(&self.cache_dir)
    }

    /// Cross-field checks, run before any work.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| validation("model", e))?;
        self.strategy.validate(&self.model).map_err(CliError::from)?;
        self.train.validate().map_err(CliError::from)?;
        if self.train.seq_len > self.model.max_seq {
            return Err(validation(
                "train.seq_len",
                format!("{} exceeds model.max_seq {}", self.train.seq_len, self.model.max_seq),
            ));
        }
        if self.strategy.variant == Variant::Csft && self.train.steps % 2 != 0 {
            return Err(validation("train.steps", "C-SFT splits steps evenly and needs an even count"));
        }
        match (&self.base.checkpoint, &self.base.pretrain) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(validation("base", "set exactly one of `checkpoint` and `pretrain`"));
            }
            (Some(_), None) if self.base.tokenizer.is_none() => {
                return Err(validation("base.tokenizer", "a base checkpoint needs its tokenizer"));
            }
            (None, Some(p)) => {
                p.validate().map_err(|e| CliError::from(e).within("base.pretrain"))?;
                if p.seq_len > self.model.max_seq {
                    return Err(validation("base.pretrain.seq_len", "exceeds model.max_seq"));
                }
            }
            _ => {}
        }
        if self.model.vocab < 256 + 2 {
            return Err(validation("model.vocab", "must cover the 256 bytes and two special tokens"));
        }
        let d = &self.data;
        match (&d.synthetic, &d.seen, &d.new) {
            (Some(_), None, None) | (None, Some(_), Some(_)) => {}
            _ => return Err(validation("data", "set either `synthetic` or both `seen` and `new`")),
        }
        if d.sample_count.is_some() && d.sample_fraction.is_some() {
            return Err(validation("data", "set at most one of `sample_count` and `sample_fraction`"));
        }
        if d.sample_count == Some(0) {
            return Err(validation("data.sample_count", "must be positive"));
        }
        if let Some(f) = d.sample_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(validation("data.sample_fraction", format!("{f} is outside (0, 1]")));
            }
        }
        if d.tokenizer_docs == 0 {
            return Err(validation("data.tokenizer_docs", "must be positive"));
        }
        for (i, t) in self.eval.tasks.iter().enumerate() {
            if t.path.is_none() && d.synthetic.is_none() {
                return Err(validation(format!("eval.tasks[{i}].path"), "needed without a synthetic corpus"));
            }
            if t.limit == Some(0) {
                return Err(validation(format!("eval.tasks[{i}].limit"), "must be positive"));
            }
        }
        if self.eval.retrieval_size == 0 {
            return Err(validation("eval.retrieval_size", "must be positive"));
        }
        if let Some(layers) = &self.eval.layers {
            if let Some(bad) = layers.iter().find(|&&l| l > self.model.layers) {
                return Err(validation("eval.layers", format!("layer {bad} exceeds {}", self.model.layers)));
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(validation("sweep.values", "is empty"));
            }
            for i in 0..sweep.values.len() {
                sweep.apply(self, i)?;
            }
        }
        Ok(())
    }
}

/// Dotted path of the key a TOML error points at, if it has a span.
fn toml_error_path(text: &str, e: &toml::de::Error) -> Option<String> {
    let span = e.span()?;
    let mut table = String::new();
    let mut offset = 0;
    let mut key = None;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if offset > span.start {
            break;
        }
        if trimmed.starts_with('[') {
            table = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key = None;
        } else if let Some((k, _)) = trimmed.split_once('=') {
            if offset + line.len() > span.start {
                key = Some(k.trim().to_string());
            }
        }
        offset += line.len();
    }
    Some(match (table.is_empty(), key) {
        (true, Some(k)) => k,
        (false, Some(k)) => format!("{table}.{k}"),
        (_, None) if !table.is_empty() => table,
        _ => return None,
    })
}
