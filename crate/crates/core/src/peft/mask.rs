use std::collections::{BTreeMap, BTreeSet};

use super::{PeftError, Result};
use crate::data::Batch;
use crate::model::{is_layer_norm, Bindings, Checkpoint};
use crate::tensor::Tape;
use crate::train::clm_loss;

/// Per-tensor boolean selection, keyed by base parameter name.
pub type Mask = BTreeMap<String, Vec<bool>>;

/// Base parameters the sparse variants may select: everything except the
/// (tied) output embedding and the layer norms.
pub fn is_mask_eligible(name: &str) -> bool {
    !name.starts_with("adapter.") && name != "embed.weight" && !is_layer_norm(name)
}

/// Selects the `k` largest scores. Entries are visited in the given tensor
/// order and then by index, and ties keep that order.
pub fn mask_from_scores(scores: &[(String, Vec<f64>)], k: usize) -> Result<Mask> {
    let total: usize = scores.iter().map(|(_, s)| s.len()).sum();
    if k == 0 {
        return Err(PeftError::Invalid {
            field: "k",
            message: "mask size must be positive".into(),
        });
    }
    if k > total {
        return Err(PeftError::Invalid {
            field: "k",
            message: format!("mask size {k} exceeds the {total} eligible scalars"),
        });
    }
    let mut flat: Vec<(usize, usize, f64)> = Vec::with_capacity(total);
    for (t, (_, s)) in scores.iter().enumerate() {
        flat.extend(s.iter().enumerate().map(|(i, &v)| (t, i, v)));
    }
    // Stable sort: equal scores stay in canonical order.
    flat.sort_by(|a, b| b.2.total_cmp(&a.2));
    let mut mask: Mask = scores
        .iter()
        .map(|(n, s)| (n.clone(), vec![false; s.len()]))
        .collect();
    for &(t, i, _) in &flat[..k] {
        mask.get_mut(&scores[t].0).expect("name present")[i] = true;
    }
    Ok(mask)
}

/// The output embedding and every layer-norm parameter.
pub fn default_frozen_names(ckpt: &Checkpoint) -> BTreeSet<String> {
    ckpt.base_tensors()
        .into_keys()
        .filter(|n| !is_mask_eligible(n))
        .collect()
}

/// Top-`k` scalars by `|stage1 - base|` among parameters outside
/// `frozen_names`.
pub fn csft_select_mask(
    base: &Checkpoint,
    stage1: &Checkpoint,
    k: usize,
    frozen_names: &BTreeSet<String>,
) -> Result<Mask> {
    super::check_same_architecture(base.spec(), stage1.spec())?;
    let scores: Vec<(String, Vec<f64>)> = base
        .base_tensors()
        .into_iter()
        .filter(|(n, _)| !frozen_names.contains(n))
        .map(|(n, t)| {
            let other = stage1.get(&n)?;
            let diffs = t.data().iter().zip(other.data()).map(|(a, b)| (b - a).abs()).collect();
            Ok((n, diffs))
        })
        .collect::<Result<_>>()?;
    mask_from_scores(&scores, k)
}

/// Top-`k` scalars by diagonal Fisher information, estimated as the mean
/// squared gradient of the language-modeling loss over the first `batches`
/// batches of `stream`.
pub fn fishmask_select(ckpt: &Checkpoint, stream: &[Batch], k: usize, batches: usize) -> Result<Mask> {
    if batches == 0 {
        return Err(PeftError::Invalid {
            field: "batches",
            message: "at least one batch is required".into(),
        });
    }
    if stream.is_empty() {
        return Err(PeftError::EmptyStream);
    }
    let used = &stream[..batches.min(stream.len())];
    let mut fisher: BTreeMap<String, Vec<f64>> = ckpt
        .base_tensors()
        .into_iter()
        .filter(|(n, _)| is_mask_eligible(n))
        .map(|(n, t)| (n, vec![0.0; t.len()]))
        .collect();
    let mut tape = Tape::new();
    for batch in used {
        tape.reset();
        let b = Bindings::bind(&mut tape, [ckpt.tensors()], &|n| is_mask_eligible(n))?;
        let loss = clm_loss(&mut tape, ckpt.spec(), &b, batch)?;
        let mut grads = tape.backward(loss)?;
        for (name, acc) in fisher.iter_mut() {
            let leaf = b.leaf(name).expect("bound");
            if let Some(g) = grads.take(leaf) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v * v;
                }
            }
        }
    }
    let n = used.len() as f64;
    let scores: Vec<(String, Vec<f64>)> = fisher
        .into_iter()
        .map(|(name, acc)| (name, acc.into_iter().map(|v| v / n).collect()))
        .collect();
    mask_from_scores(&scores, k)
}
