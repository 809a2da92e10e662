//! Training loops: language adaptation, two-stage C-SFT and instruction
//! tuning.
//!
//! All loops share one optimizer: Adam (0.9, 0.999, 1e-8) with global
//! gradient-norm clipping at 1.0 and no weight decay. Held-out perplexity is
//! evaluated every `eval_every` steps and at the last step, and the
//! trainable tensors from the best evaluation are returned.

mod instruct;

pub use instruct::{encode_prompted, instruction_tune, InstructOutcome, MixtureMode, PromptedExample};

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data::{pack_sequences, Batch, DataError};
use crate::model::{forward_tape, Bindings, Checkpoint, ModelError, ModelSpec};
use crate::peft::{
    attach, csft_select_mask, fishmask_select, mask_size, Mask, PeftError, StrategySpec, StrategyState, Variant,
};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const GRAD_CLIP_NORM: f64 = 1.0;
/// Batches used to estimate the Fisher diagonal for FishMask.
pub const FISHER_BATCHES: usize = 16;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("non-finite loss at step {step} (batch {fingerprint})")]
    NonFinite {
        step: usize,
        fingerprint: String,
        log: Box<RunLog>,
    },
    #[error("{0}")]
    EmptyData(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Peft(#[from] PeftError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn invalid(field: &'static str, message: impl Into<String>) -> TrainError {
    TrainError::Invalid {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    pub schedule: Schedule,
    pub warmup_ratio: f64,
    pub eval_every: usize,
    pub heldout_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults for the toy model.
    pub fn toy() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            seq_len: 32,
            peak_lr: 3e-3,
            schedule: Schedule::Linear,
            warmup_ratio: 0.0,
            eval_every: 250,
            heldout_size: 40,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("steps", "must be positive"));
        }
        if self.eval_every == 0 || self.eval_every > self.steps {
            return Err(invalid("eval_every", format!("must be in 1..={}", self.steps)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(invalid("warmup_ratio", "must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        if self.seq_len < 2 {
            return Err(invalid("seq_len", "must be at least 2"));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(invalid("peak_lr", "must be positive and finite"));
        }
        if self.heldout_size == 0 {
            return Err(invalid("heldout_size", "must be positive"));
        }
        Ok(())
    }

    fn with_steps(&self, steps: usize) -> Self {
        Self {
            steps,
            eval_every: self.eval_every.min(steps),
            ..self.clone()
        }
    }
}

/// Learning rate for the update at `step`: linear warmup from 0 over
/// `warmup_ratio * steps`, then linear or cosine decay to 0 at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let s = step.min(cfg.steps) as f64;
    let total = cfg.steps as f64;
    let warmup = cfg.warmup_ratio * total;
    if s < warmup {
        return cfg.peak_lr * s / warmup;
    }
    let progress = (s - warmup) / (total - warmup);
    match cfg.schedule {
        Schedule::Linear => cfg.peak_lr * (1.0 - progress),
        Schedule::Cosine => cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
    }
}

/// One held-out evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub heldout_ppl: f64,
    /// Wall-clock seconds since the run started.
    pub seconds: f64,
    /// Estimated peak bytes of parameters, optimizer state and tape.
    pub mem_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EvalRecord>,
    pub best_step: usize,
    /// Loss of every optimizer step, in order.
    pub train_losses: Vec<f64>,
}

pub const RUNLOG_HEADER: &str = "step,loss,heldout_ppl,seconds,mem_bytes";

impl RunLog {
    pub fn best(&self) -> Option<&EvalRecord> {
        self.records.iter().find(|r| r.step == self.best_step)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{RUNLOG_HEADER}\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.loss, r.heldout_ppl, r.seconds, r.mem_bytes
            ));
        }
        out
    }

    /// The log with wall-clock times zeroed, for determinism checks.
    pub fn without_timing(&self) -> RunLog {
        let mut out = self.clone();
        for r in &mut out.records {
            r.seconds = 0.0;
        }
        out
    }

    pub fn total_seconds(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.seconds)
    }

    pub fn peak_mem_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.mem_bytes).max().unwrap_or(0)
    }
}

/// Causal LM loss: position `t` predicts token `t + 1` wherever the batch
/// marks `t + 1` as a target.
pub fn clm_loss(tape: &mut Tape, spec: &ModelSpec, b: &Bindings, batch: &Batch) -> std::result::Result<Var, ModelError> {
    let seqs: Vec<&[usize]> = batch.tokens.iter().map(Vec::as_slice).collect();
    let out = forward_tape(tape, spec, b, &seqs)?;
    let t = out.seq_len;
    let mut targets = Vec::with_capacity(out.batch * t);
    let mut keep = Vec::with_capacity(out.batch * t);
    for (row, mask) in batch.tokens.iter().zip(&batch.target) {
        for p in 0..t {
            if p + 1 < t {
                targets.push(row[p + 1]);
                keep.push(mask[p + 1]);
            } else {
                targets.push(0);
                keep.push(false);
            }
        }
    }
    Ok(tape.cross_entropy_mean(out.logits, &targets, &keep)?)
}

/// Summed negative log-likelihood and target count over `batches`.
pub fn nll_sum(spec: &ModelSpec, tensors: &[&BTreeMap<String, Tensor>], batches: &[Batch]) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let mut total = 0.0;
    let mut count = 0;
    for batch in batches {
        let n = batch.target_count();
        if n == 0 {
            continue;
        }
        tape.reset();
        let b = Bindings::bind(&mut tape, tensors.iter().copied(), &|_| false)?;
        let loss = clm_loss(&mut tape, spec, &b, batch)?;
        total += tape.value(loss).item()? * n as f64;
        count += n;
    }
    Ok((total, count))
}

/// `exp` of the mean per-token NLL over `batches`.
pub fn batches_perplexity(spec: &ModelSpec, tensors: &[&BTreeMap<String, Tensor>], batches: &[Batch]) -> Result<f64> {
    let (total, count) = nll_sum(spec, tensors, batches)?;
    if count == 0 {
        return Err(TrainError::EmptyData("no target tokens to evaluate".into()));
    }
    Ok((total / count as f64).exp())
}

/// Largest relative error between the tape gradient of [`clm_loss`] and
/// central differences, over every scalar of every tensor in `ckpt`
/// (adapter tensors included, masks excluded).
pub fn clm_gradient_error(ckpt: &Checkpoint, batch: &Batch, epsilon: f64) -> Result<f64> {
    let spec = ckpt.spec();
    let loss_of = |tensors: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut tape = Tape::new();
        let b = Bindings::bind(&mut tape, [tensors], &|_| false)?;
        let loss = clm_loss(&mut tape, spec, &b, batch)?;
        Ok(tape.value(loss).item()?)
    };
    let mut tape = Tape::new();
    let b = Bindings::bind(&mut tape, [ckpt.tensors()], &|_| true)?;
    let loss = clm_loss(&mut tape, spec, &b, batch)?;
    let mut grads = tape.backward(loss)?;
    let mut probe = ckpt.tensors().clone();
    let mut worst: f64 = 0.0;
    for (name, t) in ckpt.tensors() {
        let Some(leaf) = b.leaf(name) else { continue };
        let analytic = grads.take(leaf).expect("every bound tensor requires a gradient");
        for i in 0..t.len() {
            let orig = t.data()[i];
            probe.get_mut(name).expect("name").data_mut()[i] = orig + epsilon;
            let up = loss_of(&probe)?;
            probe.get_mut(name).expect("name").data_mut()[i] = orig - epsilon;
            let down = loss_of(&probe)?;
            probe.get_mut(name).expect("name").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
    }
    Ok(worst)
}

/// Training and held-out batches.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub train: Vec<Batch>,
    pub heldout: Vec<Batch>,
}

impl TrainData {
    /// Holds out the last `cfg.heldout_size` documents and packs both parts
    /// with the end-of-document id as separator.
    pub fn from_documents(docs: &[Vec<usize>], cfg: &TrainConfig, pad_id: usize, eod_id: usize) -> Result<Self> {
        if docs.len() <= cfg.heldout_size {
            return Err(TrainError::EmptyData(format!(
                "{} documents leave nothing to train on after holding out {}",
                docs.len(),
                cfg.heldout_size
            )));
        }
        let split = docs.len() - cfg.heldout_size;
        let train = pack_sequences(&docs[..split], cfg.seq_len, cfg.batch_size, pad_id, eod_id)?;
        let heldout = pack_sequences(&docs[split..], cfg.seq_len, cfg.batch_size, pad_id, eod_id)?;
        Ok(Self {
            train: train.batches(),
            heldout: heldout.batches(),
        })
    }
}

/// Batch index for every step: seeded permutations of the batches,
/// reshuffled each time the stream is exhausted.
pub fn batch_order(batches: usize, steps: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(steps);
    let mut epoch: u64 = 0;
    while out.len() < steps && batches > 0 {
        let mut idx: Vec<usize> = (0..batches).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        out.extend(idx);
        epoch += 1;
    }
    out.truncate(steps);
    out
}

/// Base and adapter tensors during training.
struct Params {
    base: BTreeMap<String, Tensor>,
    adapters: BTreeMap<String, Tensor>,
}

impl Params {
    fn get_mut(&mut self, name: &str) -> &mut Tensor {
        match self.adapters.get_mut(name) {
            Some(t) => t,
            None => self.base.get_mut(name).expect("trainable name exists"),
        }
    }

    fn get(&self, name: &str) -> &Tensor {
        self.adapters
            .get(name)
            .or_else(|| self.base.get(name))
            .expect("trainable name exists")
    }

    fn bytes(&self) -> usize {
        self.base.values().chain(self.adapters.values()).map(Tensor::len).sum::<usize>() * 8
    }
}

/// Runs `cfg.steps` Adam updates over `trainable` and leaves the best
/// evaluated values in `params`. Steps in the log are offset by
/// `step_offset`.
fn optimize(
    spec: &ModelSpec,
    params: &mut Params,
    trainable: &BTreeSet<String>,
    data: &TrainData,
    cfg: &TrainConfig,
    step_offset: usize,
) -> Result<RunLog> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyData("training stream is empty".into()));
    }
    if data.heldout.is_empty() {
        return Err(TrainError::EmptyData("held-out stream is empty".into()));
    }
    if trainable.is_empty() {
        return Err(TrainError::EmptyData("nothing to train".into()));
    }
    let start = Instant::now();
    let masks: BTreeMap<&str, Vec<f64>> = trainable
        .iter()
        .filter_map(|n| {
            let base = n.strip_prefix("adapter.delta.")?;
            let m = params.adapters.get(&format!("adapter.mask.{base}"))?;
            Some((n.as_str(), m.data().to_vec()))
        })
        .collect();
    let mut m_state: BTreeMap<&str, Vec<f64>> = trainable
        .iter()
        .map(|n| (n.as_str(), vec![0.0; params.get(n).len()]))
        .collect();
    let mut v_state = m_state.clone();
    let trainable_bytes: usize = m_state.values().map(Vec::len).sum::<usize>() * 8;
    let fixed_bytes = params.bytes() + 3 * trainable_bytes;
    let order = batch_order(data.train.len(), cfg.steps, cfg.seed);

    let mut log = RunLog {
        records: Vec::new(),
        best_step: 0,
        train_losses: Vec::with_capacity(cfg.steps),
    };
    let mut best: Option<(f64, BTreeMap<String, Tensor>)> = None;
    let mut peak_tape = 0usize;
    let mut since_eval = 0.0;
    let mut since_count = 0usize;
    let mut tape = Tape::new();

    for step in 0..cfg.steps {
        let batch = &data.train[order[step]];
        tape.reset();
        let b = Bindings::bind(&mut tape, [&params.base, &params.adapters], &|n| trainable.contains(n))?;
        // Diverged parameters can surface as a NaN row inside the forward
        // pass before the loss exists; both cases abort the same way.
        let value = match clm_loss(&mut tape, spec, &b, batch) {
            Ok(loss) => Some((loss, tape.value(loss).item()?)),
            Err(ModelError::Tensor(TensorError::NonFinite(_))) => None,
            Err(e) => return Err(e.into()),
        };
        let Some((loss, value)) = value.filter(|(_, v)| v.is_finite()) else {
            return Err(TrainError::NonFinite {
                step: step_offset + step + 1,
                fingerprint: batch.fingerprint(),
                log: Box::new(log),
            });
        };
        let mut grads = tape.backward(loss)?;
        peak_tape = peak_tape.max(tape.value_bytes());

        let mut gathered: Vec<(&str, Vec<f64>)> = Vec::with_capacity(trainable.len());
        for name in trainable {
            let leaf = b.leaf(name).expect("trainable tensor is bound");
            let mut g = grads.take(leaf).expect("trainable leaf has a gradient");
            if let Some(mask) = masks.get(name.as_str()) {
                for (gi, mi) in g.iter_mut().zip(mask) {
                    *gi *= mi;
                }
            }
            gathered.push((name.as_str(), g));
        }
        let norm = gathered
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let clip = if norm > GRAD_CLIP_NORM { GRAD_CLIP_NORM / norm } else { 1.0 };

        let lr = lr_at(step, cfg);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, g) in gathered {
            let m = m_state.get_mut(name).expect("state");
            let v = v_state.get_mut(name).expect("state");
            let mask = masks.get(name);
            let p = params.get_mut(name).data_mut();
            for i in 0..p.len() {
                let gi = g[i] * clip;
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mut update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                if let Some(mask) = mask {
                    update *= mask[i];
                }
                p[i] -= update;
            }
        }

        log.train_losses.push(value);
        since_eval += value;
        since_count += 1;
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let ppl = batches_perplexity(spec, &[&params.base, &params.adapters], &data.heldout)?;
            let record = EvalRecord {
                step: step_offset + done,
                loss: since_eval / since_count as f64,
                heldout_ppl: ppl,
                seconds: start.elapsed().as_secs_f64(),
                mem_bytes: (fixed_bytes + peak_tape) as u64,
            };
            since_eval = 0.0;
            since_count = 0;
            if best.as_ref().map_or(true, |(b, _)| ppl < *b) {
                log.best_step = record.step;
                let snap = trainable.iter().map(|n| (n.clone(), params.get(n).clone())).collect();
                best = Some((ppl, snap));
            }
            log.records.push(record);
        }
    }
    if let Some((_, snap)) = best {
        for (name, t) in snap {
            *params.get_mut(&name) = t;
        }
    }
    Ok(log)
}

/// A trained model: base tensors (updated only by continued pretraining)
/// plus the strategy's adapter tensors, with the strategy in the metadata.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: RunLog,
}

impl TrainOutcome {
    pub fn state(&self) -> Result<StrategyState> {
        Ok(StrategyState::from_bundle(&self.checkpoint.adapter_bundle())?)
    }
}

fn assemble(ckpt: &Checkpoint, params: Params, spec: &StrategySpec, log: &RunLog) -> Checkpoint {
    let mut tensors = params.base;
    tensors.extend(params.adapters);
    let mut out = Checkpoint::new(*ckpt.spec(), tensors);
    for (k, v) in ckpt.metadata() {
        out.set_meta(k, v.clone());
    }
    out.set_meta("strategy", serde_json::to_value(spec).expect("strategy serializes"));
    out.set_meta("best_step", Value::from(log.best_step));
    out
}

fn mask_is_empty(state: &StrategyState) -> bool {
    state
        .tensors
        .iter()
        .filter(|(n, _)| n.starts_with("adapter.mask."))
        .all(|(_, t)| t.data().iter().all(|&v| v == 0.0))
}

/// Adapts `ckpt` with an attached strategy.
///
/// Only the strategy's trainable tensors change; every other tensor is
/// carried over bit-identically. A FishMask strategy without a selected
/// mask first selects one from the first [`FISHER_BATCHES`] training
/// batches. A C-SFT strategy without a mask runs [`csft_two_stage`].
pub fn train(ckpt: &Checkpoint, state: &StrategyState, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = ckpt.spec();
    state.spec.validate(model)?;
    let mut state = state.clone();
    if state.spec.variant.is_masked() && mask_is_empty(&state) {
        let k = mask_size(state.spec.mask_density, crate::peft::mask_eligible_count(model));
        match state.spec.variant {
            Variant::Fishmask => {
                let mask = fishmask_select(ckpt, &data.train, k, FISHER_BATCHES)?;
                state.set_mask(&mask)?;
            }
            _ => return Ok(csft_two_stage(ckpt, data, cfg, state.spec.mask_density)?.outcome),
        }
    }
    let mut trainable: BTreeSet<String> = state.trainable_names(ckpt).into_iter().collect();
    if !state.frozen_base() {
        trainable.extend(state.tensors.keys().filter(|k| !k.starts_with("adapter.mask.")).cloned());
    }
    let mut params = Params {
        base: ckpt.base_tensors(),
        adapters: state.tensors.clone(),
    };
    let log = optimize(model, &mut params, &trainable, data, cfg, 0)?;
    let checkpoint = assemble(ckpt, params, &state.spec, &log);
    Ok(TrainOutcome { checkpoint, log })
}

#[derive(Debug, Clone)]
pub struct CsftOutcome {
    /// Stage-2 result; its log's steps continue after stage 1.
    pub outcome: TrainOutcome,
    pub stage1_log: RunLog,
    pub mask: Mask,
}

/// Two-stage C-SFT: full finetuning (minus the frozen names) for half the
/// steps, top-k selection by absolute movement, then masked finetuning from
/// the original base values for the other half.
pub fn csft_two_stage(ckpt: &Checkpoint, data: &TrainData, cfg: &TrainConfig, mask_density: f64) -> Result<CsftOutcome> {
    cfg.validate()?;
    if cfg.steps % 2 != 0 {
        return Err(invalid("steps", format!("C-SFT splits steps evenly, got odd {}", cfg.steps)));
    }
    let model = ckpt.spec();
    let half = cfg.with_steps(cfg.steps / 2);
    let frozen = crate::peft::default_frozen_names(ckpt);
    let base = ckpt.base_tensors();
    let trainable: BTreeSet<String> = base.keys().filter(|n| !frozen.contains(*n)).cloned().collect();
    let eligible: usize = trainable.iter().map(|n| base[n].len()).sum();
    let mut stage1 = Params {
        base,
        adapters: BTreeMap::new(),
    };
    let stage1_log = optimize(model, &mut stage1, &trainable, data, &half, 0)?;
    let moved = Checkpoint::new(*model, stage1.base);

    let spec = StrategySpec::new(Variant::Csft).with_density(mask_density);
    let k = mask_size(mask_density, eligible);
    let mask = csft_select_mask(ckpt, &moved, k, &frozen)?;
    let mut state = attach(ckpt, &spec, cfg.seed)?;
    state.set_mask(&mask)?;
    let trainable: BTreeSet<String> = state.trainable_names(ckpt).into_iter().collect();
    let mut params = Params {
        base: ckpt.base_tensors(),
        adapters: state.tensors,
    };
    let log = optimize(model, &mut params, &trainable, data, &half, half.steps)?;
    let checkpoint = assemble(ckpt, params, &spec, &log);
    Ok(CsftOutcome {
        outcome: TrainOutcome { checkpoint, log },
        stage1_log,
        mask,
    })
}

/// Full-parameter finetuning of every base tensor on `data`.
pub(crate) fn full_finetune(ckpt: &Checkpoint, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let base = ckpt.base_tensors();
    let trainable: BTreeSet<String> = base.keys().cloned().collect();
    let mut params = Params {
        base,
        adapters: ckpt.adapter_bundle().into_tensors(),
    };
    let log = optimize(ckpt.spec(), &mut params, &trainable, data, cfg, 0)?;
    let mut tensors = params.base;
    tensors.extend(params.adapters);
    let mut checkpoint = Checkpoint::new(*ckpt.spec(), tensors);
    for (k, v) in ckpt.metadata() {
        checkpoint.set_meta(k, v.clone());
    }
    checkpoint.set_meta("best_step", Value::from(log.best_step));
    Ok(TrainOutcome { checkpoint, log })
}

/// Trains a fresh model on `data` with every parameter trainable.
pub fn pretrain(ckpt: &Checkpoint, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    full_finetune(ckpt, data, cfg)
}
