use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{full_finetune, invalid, Result, RunLog, TrainConfig, TrainData, TrainError};
use crate::data::Batch;
use crate::model::Checkpoint;
use crate::tokenizer::TokenizerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureMode {
    /// Only examples tagged with the target language.
    TargetOnly,
    /// The whole mixture, target-language examples included.
    MixturePlusTarget,
}

impl std::str::FromStr for MixtureMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "target_only" => Ok(Self::TargetOnly),
            "mixture_plus_target" => Ok(Self::MixturePlusTarget),
            _ => Err(format!("unknown mixture mode `{s}`")),
        }
    }
}

/// A prompt rendered into the text before the answer and the answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptedExample {
    pub task: String,
    pub language: String,
    pub input: String,
    pub target: String,
}

/// Token ids `[eod] ++ input ++ target` and the loss mask, which is true
/// exactly at the target tokens.
pub fn encode_prompted(tok: &TokenizerModel, ex: &PromptedExample) -> Result<(Vec<usize>, Vec<bool>)> {
    let eod = tok
        .eod_id()
        .ok_or_else(|| invalid("tokenizer", "instruction tuning needs an end-of-document id"))?;
    let input = tok.encode(ex.input.as_bytes());
    let target = tok.encode(ex.target.as_bytes());
    let mut ids = Vec::with_capacity(1 + input.len() + target.len());
    ids.push(eod);
    ids.extend(&input);
    let mut mask = vec![false; ids.len()];
    ids.extend(&target);
    mask.resize(ids.len(), true);
    Ok((ids, mask))
}

#[derive(Debug, Clone)]
pub struct InstructOutcome {
    pub checkpoint: Checkpoint,
    pub log: RunLog,
    /// Examples dropped because they exceed `seq_len`.
    pub skipped: usize,
    pub train_examples: usize,
    pub task_types: BTreeSet<String>,
}

fn make_batches(rows: &[(Vec<usize>, Vec<bool>)], batch_size: usize, pad: usize) -> Vec<Batch> {
    rows.chunks(batch_size.max(1))
        .map(|chunk| {
            let len = chunk.iter().map(|(ids, _)| ids.len()).max().unwrap_or(0);
            let mut tokens = Vec::with_capacity(chunk.len());
            let mut target = Vec::with_capacity(chunk.len());
            for (ids, mask) in chunk {
                let mut t = ids.clone();
                let mut m = mask.clone();
                t.resize(len, pad);
                m.resize(len, false);
                tokens.push(t);
                target.push(m);
            }
            Batch { tokens, target }
        })
        .collect()
}

/// Full-parameter finetuning on prompted examples with the loss on target
/// tokens only.
///
/// The pool is the target-language subset or the whole mixture, shuffled
/// by `cfg.seed`; its last `cfg.heldout_size` examples are held out. Rows
/// longer than `cfg.seq_len` are skipped and counted.
pub fn instruction_tune(
    ckpt: &Checkpoint,
    tok: &TokenizerModel,
    mixture: &[PromptedExample],
    target_language: &str,
    mode: MixtureMode,
    cfg: &TrainConfig,
) -> Result<InstructOutcome> {
    cfg.validate()?;
    if mixture.is_empty() {
        return Err(TrainError::EmptyData("instruction mixture is empty".into()));
    }
    let pad = tok
        .pad_id()
        .ok_or_else(|| invalid("tokenizer", "instruction tuning needs a padding id"))?;
    let pool: Vec<&PromptedExample> = mixture
        .iter()
        .filter(|e| mode == MixtureMode::MixturePlusTarget || e.language == target_language)
        .collect();
    let mut rows = Vec::with_capacity(pool.len());
    let mut tasks = Vec::with_capacity(pool.len());
    let mut skipped = 0;
    for ex in pool {
        let (ids, mask) = encode_prompted(tok, ex)?;
        if ids.len() > cfg.seq_len {
            skipped += 1;
            continue;
        }
        rows.push((ids, mask));
        tasks.push(ex.task.clone());
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} prompted examples longer than seq_len {}", cfg.seq_len);
    }
    if rows.len() <= cfg.heldout_size {
        return Err(TrainError::EmptyData(format!(
            "{} usable examples leave nothing to train on after holding out {}",
            rows.len(),
            cfg.heldout_size
        )));
    }
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let split = rows.len() - cfg.heldout_size;
    let train_rows: Vec<_> = idx[..split].iter().map(|&i| rows[i].clone()).collect();
    let heldout_rows: Vec<_> = idx[split..].iter().map(|&i| rows[i].clone()).collect();
    let task_types = idx[..split].iter().map(|&i| tasks[i].clone()).collect();
    let data = TrainData {
        train: make_batches(&train_rows, cfg.batch_size, pad),
        heldout: make_batches(&heldout_rows, cfg.batch_size, pad),
    };
    let out = full_finetune(ckpt, &data, cfg)?;
    Ok(InstructOutcome {
        checkpoint: out.checkpoint,
        log: out.log,
        skipped,
        train_examples: split,
        task_types,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_covers_exactly_the_target_tokens() {
        let tok = TokenizerModel::bytes_only().with_specials();
        let ex = PromptedExample {
            task: "nli".into(),
            language: "en".into(),
            input: "P, right? ".into(),
            target: "Yes, H".into(),
        };
        let (ids, mask) = encode_prompted(&tok, &ex).unwrap();
        assert_eq!(ids[0], tok.eod_id().unwrap());
        assert_eq!(ids.len(), 1 + 10 + 6);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 6);
        assert!(mask[..11].iter().all(|&m| !m));
        assert_eq!(tok.decode(&ids[11..]).unwrap(), b"Yes, H");
    }

    #[test]
    fn padding_is_never_a_target() {
        let rows = vec![(vec![1, 2, 3], vec![false, true, true]), (vec![4, 5], vec![false, true])];
        let b = &make_batches(&rows, 2, 9)[0];
        assert_eq!(b.tokens[1], vec![4, 5, 9]);
        assert_eq!(b.target[1], vec![false, true, false]);
        assert_eq!(b.target_count(), 3);
    }
}
