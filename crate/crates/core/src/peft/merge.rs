use std::collections::BTreeMap;

use super::{PeftError, Result, StrategyState, Variant};
use crate::model::Checkpoint;
use crate::tensor::Tensor;

/// A checkpoint with (IA)³ vectors folded in, plus the adapter tensors that
/// cannot be folded (the invertible coupling of `ia3_inv`).
#[derive(Debug, Clone)]
pub struct Merged {
    pub checkpoint: Checkpoint,
    pub carried: BTreeMap<String, Tensor>,
}

/// Scales output column `j` of a `[in x out]` weight and entry `j` of its
/// bias by `l[j]`.
fn scale_outputs(w: &mut Tensor, b: &mut Tensor, l: &[f64]) {
    let cols = w.cols();
    for row in w.data_mut().chunks_mut(cols) {
        for (v, s) in row.iter_mut().zip(l) {
            *v *= s;
        }
    }
    for (v, s) in b.data_mut().iter_mut().zip(l) {
        *v *= s;
    }
}

/// Scales input row `i` of a `[in x out]` weight by `l[i]`.
fn scale_inputs(w: &mut Tensor, l: &[f64]) {
    let cols = w.cols();
    for (row, s) in w.data_mut().chunks_mut(cols).zip(l) {
        for v in row.iter_mut() {
            *v *= s;
        }
    }
}

/// Folds `l_k` and `l_v` into the key and value projections and `l_ff`
/// into the FFN down projection.
pub fn ia3_merge(ckpt: &Checkpoint, state: &StrategyState) -> Result<Merged> {
    if !matches!(state.spec.variant, Variant::Ia3 | Variant::Ia3Inv) {
        return Err(PeftError::Unsupported(format!(
            "ia3_merge needs an ia3 strategy, got {}",
            state.spec.variant
        )));
    }
    let mut tensors = ckpt.base_tensors();
    let mut carried = BTreeMap::new();
    for (name, l) in &state.tensors {
        let Some(rest) = name.strip_prefix("adapter.block.") else {
            carried.insert(name.clone(), l.clone());
            continue;
        };
        let (block, kind) = rest
            .split_once(".ia3.")
            .ok_or_else(|| PeftError::Unsupported(format!("unexpected adapter tensor `{name}`")))?;
        let p = format!("block.{block}");
        let mut take = |n: String| {
            tensors
                .remove(&n)
                .ok_or(PeftError::Model(crate::model::ModelError::MissingParam(n)))
        };
        match kind {
            "key" | "value" => {
                let proj = if kind == "key" { "k" } else { "v" };
                let wn = format!("{p}.attn.{proj}.weight");
                let bn = format!("{p}.attn.{proj}.bias");
                let (mut w, mut b) = (take(wn.clone())?, take(bn.clone())?);
                scale_outputs(&mut w, &mut b, l.data());
                tensors.insert(wn, w);
                tensors.insert(bn, b);
            }
            "ffn" => {
                let wn = format!("{p}.ffn.down.weight");
                let mut w = take(wn.clone())?;
                scale_inputs(&mut w, l.data());
                tensors.insert(wn, w);
            }
            _ => return Err(PeftError::Unsupported(format!("unexpected adapter tensor `{name}`"))),
        }
    }
    let mut checkpoint = Checkpoint::new(*ckpt.spec(), tensors);
    for (k, v) in ckpt.metadata() {
        checkpoint.set_meta(k, v.clone());
    }
    Ok(Merged { checkpoint, carried })
}
