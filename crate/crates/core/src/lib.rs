//! Desk-scale laboratory for parameter-efficient language adaptation of
//! small decoder-only language models.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: `f64` tensors and a reverse-mode differentiation tape.
//! - [`tokenizer`]: byte-level BPE.
//! - [`model`]: an ALiBi decoder with tied embeddings and checkpoints.
//! - [`peft`]: adaptation strategies (bottleneck and invertible adapters,
//!   (IA)³, LoRA, BitFit, sparse masks, continued pretraining).
//! - [`train`]: Adam training loops, two-stage sparse finetuning and
//!   instruction tuning.
//! - [`eval`]: prompt scoring, perplexity, retrieval probes, forgetting and
//!   resource accounting.
//! - [`data`]: corpus ingestion, sampling, packing and a synthetic
//!   bilingual corpus generator.

pub mod data;
pub mod eval;
pub mod model;
pub mod peft;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use tensor::{finite_difference_check, Gradients, Tape, Tensor, TensorError, Var};
pub use tokenizer::{count_tokens, train_bpe, TokenizerModel};
pub use data::{Batch, CorpusSpec, ParallelCorpus, SynthSpec, TaskDataset, TaskExample, TaskKind};
pub use model::{forward, init_model, param_count, Checkpoint, HiddenStates, ModelSpec};
pub use peft::{attach, trainable_params, StrategySpec, StrategyState, Variant};
pub use train::{lr_at, train, RunLog, Schedule, TrainConfig, TrainData};
