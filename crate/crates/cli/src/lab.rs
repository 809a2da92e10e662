//! Everything a command needs from one config: corpora, tokenizer, base
//! model, tasks, and the adaptation run itself.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use adaptkit_core::data::{
    load_corpus, load_parallel, load_task_data, sample_documents, sha256_hex, synth_bilingual, SynthCorpus, LANG_A,
    LANG_B,
};
use adaptkit_core::eval::{
    builtin_templates, evaluate_task, find_template, parse_templates, perplexity, synthetic_templates, PromptTemplate,
};
use adaptkit_core::train::{batches_perplexity, pretrain, TrainError, TrainOutcome};
use adaptkit_core::{
    attach, init_model, train, train_bpe, trainable_params, Checkpoint, ParallelCorpus, RunLog, TaskDataset,
    TokenizerModel, TrainData,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{runtime, validation, CliError, Result};

pub struct Lab {
    pub cfg: ExperimentConfig,
    pub tok: TokenizerModel,
    pub base: Checkpoint,
    pub synth: Option<SynthCorpus>,
    pub seen_language: String,
    pub new_language: String,
    pub seen_docs: Vec<Vec<usize>>,
    pub new_docs: Vec<Vec<usize>>,
}

/// A configured task with its template.
pub struct ResolvedTask {
    pub dataset: TaskDataset,
    pub template: PromptTemplate,
}

impl ResolvedTask {
    pub fn key(&self) -> String {
        format!("{}/{}", self.dataset.name, self.template.name)
    }
}

/// Deterministic results of one adaptation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptMetrics {
    pub variant: String,
    pub trainable_params: usize,
    pub train_documents: usize,
    pub best_step: usize,
    /// New-language held-out perplexity of the unadapted base.
    pub heldout_ppl_before: f64,
    /// New-language held-out perplexity at the best step.
    pub heldout_ppl: f64,
    /// Seen-language held-out perplexity before and after, adapters attached.
    pub seen_ppl_before: f64,
    pub seen_ppl_after: f64,
    /// Accuracy per `task/template`.
    pub accuracy: BTreeMap<String, f64>,
}

impl AdaptMetrics {
    pub fn mean_accuracy(&self) -> Option<f64> {
        (!self.accuracy.is_empty()).then(|| self.accuracy.values().sum::<f64>() / self.accuracy.len() as f64)
    }
}

pub struct Adapted {
    pub outcome: TrainOutcome,
    pub metrics: AdaptMetrics,
}

/// A failed run, with the log up to the failure when training started.
#[derive(Debug)]
pub struct Failed {
    pub error: CliError,
    pub log: Option<RunLog>,
}

impl From<CliError> for Failed {
    fn from(error: CliError) -> Self {
        Self { error, log: None }
    }
}

static TMP_COUNTER: AtomicUsize = AtomicUsize::new(0);

/// Writes via a temporary file and a rename so concurrent runs never see a
/// partial cache entry.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = path.with_extension(format!("tmp{}-{n}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn cache_key(value: &serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())[..16].to_string()
}

impl Lab {
    /// Validates `cfg`, loads or generates the corpora and builds (or reads
    /// from the cache) the tokenizer and the base model.
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let cache = cfg.cache();
        let (synth, seen_text, new_text, seen_language, new_language) = match &cfg.data.synthetic {
            Some(spec) => {
                let c = synth_bilingual(spec);
                let (a, b) = (c.lang_a.clone(), c.lang_b.clone());
                (Some(c), a, b, LANG_A.to_string(), LANG_B.to_string())
            }
            None => {
                let seen = cfg.data.seen.as_ref().expect("validated");
                let new = cfg.data.new.as_ref().expect("validated");
                let s = load_corpus(seen, &cache).map_err(|e| validation("data.seen", e))?;
                let n = load_corpus(new, &cache).map_err(|e| validation("data.new", e))?;
                (None, s, n, seen.language.clone(), new.language.clone())
            }
        };

        let tok_key = cache_key(&json!({
            "synthetic": cfg.data.synthetic,
            "seen": cfg.data.seen,
            "new": cfg.data.new,
            "tokenizer_docs": cfg.data.tokenizer_docs,
            "vocab": cfg.model.vocab,
        }));
        let tok = match &cfg.base.tokenizer {
            Some(p) => TokenizerModel::load(&cfg.resolve(p)).map_err(|e| validation("base.tokenizer", e))?,
            None => {
                let path = cache.join(format!("tokenizer-{tok_key}.txt"));
                match TokenizerModel::load(&path) {
                    Ok(t) => t,
                    Err(_) => {
                        let n = cfg.data.tokenizer_docs;
                        let mut text: Vec<&str> = seen_text.iter().take(n).map(String::as_str).collect();
                        text.extend(new_text.iter().take(n).map(String::as_str));
                        let t = train_bpe(&text, cfg.model.vocab - 2, 0)?.with_specials();
                        write_atomic(&path, t.to_text().as_bytes())?;
                        t
                    }
                }
            }
        };
        if tok.vocab_size() != cfg.model.vocab {
            return Err(validation(
                "model.vocab",
                format!("the tokenizer has {} tokens, the model expects {}", tok.vocab_size(), cfg.model.vocab),
            ));
        }
        if tok.pad_id().is_none() || tok.eod_id().is_none() {
            return Err(validation("base.tokenizer", "needs the padding and end-of-document tokens"));
        }
        let encode = |docs: &[String]| -> Vec<Vec<usize>> { docs.iter().map(|d| tok.encode(d.as_bytes())).collect() };
        let seen_docs = encode(&seen_text);
        let new_docs = encode(&new_text);

        let base = match (&cfg.base.checkpoint, &cfg.base.pretrain) {
            (Some(p), _) => {
                let ckpt = Checkpoint::load(&cfg.resolve(p)).map_err(|e| validation("base.checkpoint", e))?;
                if ckpt.spec() != &cfg.model {
                    return Err(validation("base.checkpoint", "its model spec differs from the `model` section"));
                }
                ckpt
            }
            (None, Some(pre)) => {
                let key = cache_key(&json!({ "tokenizer": tok_key, "model": cfg.model, "pretrain": pre }));
                let path = cache.join(format!("base-{key}.ckpt"));
                match Checkpoint::load(&path) {
                    Ok(c) if c.spec() == &cfg.model => c,
                    _ => {
                        let data = TrainData::from_documents(&seen_docs, pre, tok.pad_id().unwrap(), tok.eod_id().unwrap())
                            .map_err(|e| CliError::from(e).within("base.pretrain"))?;
                        let out = pretrain(&init_model(&cfg.model)?, &data, pre)?;
                        write_atomic(&path, &out.checkpoint.to_bytes()?)?;
                        out.checkpoint
                    }
                }
            }
            (None, None) => unreachable!("validated"),
        };

        Ok(Self {
            cfg: cfg.clone(),
            tok,
            base,
            synth,
            seen_language,
            new_language,
            seen_docs,
            new_docs,
        })
    }

    pub fn pad(&self) -> usize {
        self.tok.pad_id().expect("checked in open")
    }

    pub fn eod(&self) -> usize {
        self.tok.eod_id().expect("checked in open")
    }

    /// New-language training sample and the fixed held-out tail.
    pub fn split_new(&self) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        let h = self.cfg.train.heldout_size;
        if self.new_docs.len() <= h {
            return Err(validation(
                "train.heldout_size",
                format!("{h} held-out documents leave none of {} to train on", self.new_docs.len()),
            ));
        }
        let (pool, heldout) = self.new_docs.split_at(self.new_docs.len() - h);
        let d = &self.cfg.data;
        let sample = match (d.sample_count, d.sample_fraction) {
            (Some(n), _) => sample_documents(pool, n, d.sample_seed).map_err(|e| validation("data.sample_count", e))?,
            (None, Some(f)) => {
                let n = ((f * pool.len() as f64).round() as usize).max(1);
                sample_documents(pool, n, d.sample_seed)?
            }
            (None, None) => pool.to_vec(),
        };
        Ok((sample, heldout.to_vec()))
    }

    pub fn train_data(&self) -> Result<(TrainData, usize)> {
        let (mut docs, heldout) = self.split_new()?;
        let n = docs.len();
        docs.extend(heldout);
        let data = TrainData::from_documents(&docs, &self.cfg.train, self.pad(), self.eod())?;
        Ok((data, n))
    }

    /// Seen-language documents held out from pretraining.
    pub fn seen_heldout(&self) -> &[Vec<usize>] {
        let h = self
            .cfg
            .base
            .pretrain
            .as_ref()
            .map_or(self.cfg.train.heldout_size, |p| p.heldout_size)
            .min(self.seen_docs.len());
        &self.seen_docs[self.seen_docs.len() - h..]
    }

    pub fn seen_perplexity(&self, ckpt: &Checkpoint) -> Result<f64> {
        Ok(perplexity(ckpt, self.seen_heldout(), self.cfg.train.seq_len, self.pad(), self.eod())?)
    }

    pub fn templates(&self) -> Result<Vec<PromptTemplate>> {
        let mut out = builtin_templates();
        if let Some(c) = &self.synth {
            out.extend(synthetic_templates(&c.lexicon, false));
            out.extend(synthetic_templates(&c.lexicon, true));
        }
        if let Some(p) = &self.cfg.eval.templates {
            let path = self.cfg.resolve(p);
            let text = std::fs::read_to_string(&path).map_err(|e| validation("eval.templates", format!("{}: {e}", path.display())))?;
            out.extend(parse_templates(&text).map_err(|e| validation("eval.templates", e))?);
        }
        Ok(out)
    }

    pub fn tasks(&self) -> Result<Vec<ResolvedTask>> {
        let templates = self.templates()?;
        let mut out = Vec::new();
        for (i, t) in self.cfg.eval.tasks.iter().enumerate() {
            let at = |field: &str| format!("eval.tasks[{i}].{field}");
            let mut dataset = match &t.path {
                Some(p) => load_task_data(&self.cfg.resolve(p), t.kind, &t.language).map_err(|e| validation(at("path"), e))?,
                None => self
                    .synth
                    .as_ref()
                    .and_then(|c| c.task(t.kind, &t.language))
                    .cloned()
                    .ok_or_else(|| validation(at("language"), format!("no synthetic {} task in `{}`", t.kind.name(), t.language)))?,
            };
            if let Some(n) = t.limit {
                dataset.examples.truncate(n);
            }
            let template = find_template(&templates, &t.template)
                .cloned()
                .ok_or_else(|| validation(at("template"), format!("unknown template `{}`", t.template)))?;
            if template.kind != t.kind {
                return Err(validation(at("template"), format!("`{}` is not a {} template", t.template, t.kind.name())));
            }
            out.push(ResolvedTask { dataset, template });
        }
        Ok(out)
    }

    pub fn parallel(&self) -> Result<ParallelCorpus> {
        let size = self.cfg.eval.retrieval_size;
        match (&self.cfg.eval.retrieval_pairs, &self.synth) {
            (Some(p), _) => Ok(load_parallel(&self.cfg.resolve(p))
                .map_err(|e| validation("eval.retrieval_pairs", e))?
                .subset(size)),
            (None, Some(c)) => Ok(c.parallel.subset(size)),
            (None, None) => Err(validation("eval.retrieval_pairs", "needed without a synthetic corpus")),
        }
    }

    /// Runs the configured adaptation and measures the result.
    pub fn adapt(&self, tasks: &[ResolvedTask]) -> std::result::Result<Adapted, Failed> {
        let cfg = &self.cfg;
        let (data, train_documents) = self.train_data()?;
        let state = attach(&self.base, &cfg.strategy, cfg.train.seed).map_err(CliError::from)?;
        let outcome = match train(&self.base, &state, &data, &cfg.train) {
            Ok(o) => o,
            Err(TrainError::NonFinite { step, fingerprint, log }) => {
                return Err(Failed {
                    error: runtime(format!("non-finite loss at step {step} (batch {fingerprint})")),
                    log: Some(*log),
                })
            }
            Err(e) => return Err(CliError::from(e).into()),
        };
        let heldout_ppl_before = batches_perplexity(&cfg.model, &[self.base.tensors()], &data.heldout).map_err(CliError::from)?;
        let best = outcome
            .log
            .best()
            .ok_or_else(|| runtime("run log has no evaluation records"))?
            .heldout_ppl;
        let adapted = &outcome.checkpoint;
        let mut accuracy = BTreeMap::new();
        for t in tasks {
            let r = evaluate_task(
                adapted,
                &self.tok,
                &t.template,
                &t.dataset,
                cfg.eval.score_span,
                "adapted",
                cfg.strategy.variant.name(),
            )
            .map_err(CliError::from)?;
            accuracy.insert(t.key(), r.accuracy);
        }
        let metrics = AdaptMetrics {
            variant: cfg.strategy.variant.name().to_string(),
            trainable_params: trainable_params(&cfg.model, &cfg.strategy),
            train_documents,
            best_step: outcome.log.best_step,
            heldout_ppl_before,
            heldout_ppl: best,
            seen_ppl_before: self.seen_perplexity(&self.base)?,
            seen_ppl_after: self.seen_perplexity(adapted)?,
            accuracy,
        };
        Ok(Adapted { outcome, metrics })
    }
}

/// Path of the adapted checkpoint written by `adapt`.
pub fn adapted_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out().join(crate::commands::CHECKPOINT_FILE)
}
