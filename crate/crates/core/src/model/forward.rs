use std::collections::{BTreeMap, HashMap};

use super::{alibi_biases, Checkpoint, ModelError, ModelSpec, Result};
use crate::peft::{coupling_forward, coupling_inverse, Coupling, Mlp};
use crate::tensor::{Tape, Tensor, Var};

/// Parameters placed on a tape.
///
/// Every tensor becomes a leaf. A tensor named `adapter.delta.<name>` is
/// added to the base parameter `<name>`, so the forward pass sees
/// `base + delta` wherever it reads `<name>`. `adapter.mask.*` tensors are
/// bookkeeping for the optimizer and are not bound.
#[derive(Debug, Default)]
pub struct Bindings {
    leaves: BTreeMap<String, Var>,
    effective: HashMap<String, Var>,
}

impl Bindings {
    pub fn bind<'a, I>(tape: &mut Tape, sources: I, trainable: &dyn Fn(&str) -> bool) -> Result<Self>
    where
        I: IntoIterator<Item = &'a BTreeMap<String, Tensor>>,
    {
        let mut out = Self::default();
        let mut deltas = Vec::new();
        for source in sources {
            for (name, t) in source {
                if name.starts_with("adapter.mask.") {
                    continue;
                }
                let var = tape.leaf(t.clone(), trainable(name));
                out.leaves.insert(name.clone(), var);
                match name.strip_prefix("adapter.delta.") {
                    Some(target) => deltas.push((target.to_string(), var)),
                    None => {
                        out.effective.insert(name.clone(), var);
                    }
                }
            }
        }
        for (target, delta) in deltas {
            let base = *out
                .effective
                .get(&target)
                .ok_or_else(|| ModelError::MissingParam(target.clone()))?;
            let sum = tape.add(base, delta)?;
            out.effective.insert(target, sum);
        }
        Ok(out)
    }

    /// The value the forward pass uses for `name` (base plus any delta).
    pub fn get(&self, name: &str) -> Result<Var> {
        self.opt(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.effective.get(name).copied()
    }

    /// The raw leaf holding `name`, for reading its gradient.
    pub fn leaf(&self, name: &str) -> Option<Var> {
        self.leaves.get(name).copied()
    }

    pub fn leaves(&self) -> &BTreeMap<String, Var> {
        &self.leaves
    }
}

/// Activations at every layer boundary: index 0 is the post-embedding norm
/// output, index `i + 1` the output of block `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub layers: Vec<Tensor>,
}

/// Tape nodes produced by [`forward_tape`] for a batch of equal-length
/// sequences stacked row-wise (`batch * seq_len` rows).
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub hidden: Vec<Var>,
    pub batch: usize,
    pub seq_len: usize,
}

fn linear(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{prefix}.weight"))?;
    let bias = b.get(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, bias)?)
}

fn layer_norm(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let g = b.get(&format!("{prefix}.gain"))?;
    let bias = b.get(&format!("{prefix}.bias"))?;
    Ok(tape.layer_norm(x, g, bias)?)
}

/// Multiplies every row of `x` elementwise by the vector `v`.
pub(crate) fn scale_columns(tape: &mut Tape, x: Var, v: Var) -> Result<Var> {
    let rows = tape.value(x).rows();
    let rep = tape.repeat_rows(v, rows)?;
    Ok(tape.mul(x, rep)?)
}

fn lora_delta(tape: &mut Tape, b: &Bindings, block: usize, proj: &str, x: Var) -> Result<Option<Var>> {
    let p = format!("adapter.block.{block}.lora.{proj}");
    let (Some(a), Some(up)) = (b.opt(&format!("{p}.a")), b.opt(&format!("{p}.b"))) else {
        return Ok(None);
    };
    // Scaling alpha / r with alpha = r is exactly one.
    let xa = tape.matmul(x, a)?;
    Ok(Some(tape.matmul(xa, up)?))
}

fn attention(
    tape: &mut Tape,
    spec: &ModelSpec,
    b: &Bindings,
    block: usize,
    x: Var,
    shape: (usize, usize),
    biases: &[Var],
) -> Result<Var> {
    let (batch, t) = shape;
    let p = format!("block.{block}");
    let ia3 = format!("adapter.block.{block}.ia3");
    let mut q = linear(tape, b, &format!("{p}.attn.q"), x)?;
    if let Some(d) = lora_delta(tape, b, block, "q", x)? {
        q = tape.add(q, d)?;
    }
    let mut k = linear(tape, b, &format!("{p}.attn.k"), x)?;
    if let Some(lk) = b.opt(&format!("{ia3}.key")) {
        k = scale_columns(tape, k, lk)?;
    }
    let mut v = linear(tape, b, &format!("{p}.attn.v"), x)?;
    if let Some(d) = lora_delta(tape, b, block, "v", x)? {
        v = tape.add(v, d)?;
    }
    if let Some(lv) = b.opt(&format!("{ia3}.value")) {
        v = scale_columns(tape, v, lv)?;
    }

    let dh = spec.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut per_seq = Vec::with_capacity(batch);
    for s in 0..batch {
        let (qs, ks, vs) = if batch == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_rows(q, s * t, t)?,
                tape.slice_rows(k, s * t, t)?,
                tape.slice_rows(v, s * t, t)?,
            )
        };
        let mut heads = Vec::with_capacity(spec.heads);
        for (h, &bias) in biases.iter().enumerate() {
            let qh = tape.slice_cols(qs, h * dh, dh)?;
            let kh = tape.slice_cols(ks, h * dh, dh)?;
            let vh = tape.slice_cols(vs, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let scaled = tape.scale(raw, scale)?;
            let biased = tape.add(scaled, bias)?;
            let probs = tape.softmax_rows(biased)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        per_seq.push(tape.concat_last_dim(&heads)?);
    }
    let ctx = if batch == 1 {
        per_seq[0]
    } else {
        tape.concat_rows(&per_seq)?
    };
    linear(tape, b, &format!("{p}.attn.o"), ctx)
}

fn feed_forward(tape: &mut Tape, b: &Bindings, block: usize, x: Var) -> Result<Var> {
    let p = format!("block.{block}");
    let up = linear(tape, b, &format!("{p}.ffn.up"), x)?;
    let mut act = tape.gelu(up)?;
    if let Some(lff) = b.opt(&format!("adapter.block.{block}.ia3.ffn")) {
        act = scale_columns(tape, act, lff)?;
    }
    let mut out = linear(tape, b, &format!("{p}.ffn.down"), act)?;
    if let Some(mlp) = Mlp::bind(b, &format!("adapter.block.{block}.bottleneck"))? {
        out = crate::peft::bottleneck_forward(tape, out, &mlp)?;
    }
    Ok(out)
}

/// Runs the model over `seqs` (all the same length) on `tape`.
pub fn forward_tape(tape: &mut Tape, spec: &ModelSpec, b: &Bindings, seqs: &[&[usize]]) -> Result<Forward> {
    let batch = seqs.len();
    let t = seqs.first().map_or(0, |s| s.len());
    if batch == 0 || t == 0 {
        return Err(ModelError::Spec("forward needs at least one non-empty sequence".into()));
    }
    if seqs.iter().any(|s| s.len() != t) {
        return Err(ModelError::Spec("sequences in a batch must share one length".into()));
    }
    if t > spec.max_seq {
        return Err(ModelError::SeqTooLong {
            len: t,
            max: spec.max_seq,
        });
    }
    let mut ids = Vec::with_capacity(batch * t);
    for &id in seqs.iter().flat_map(|s| s.iter()) {
        if id >= spec.vocab {
            return Err(ModelError::TokenOutOfRange { id, vocab: spec.vocab });
        }
        ids.push(id);
    }

    let embed = b.get("embed.weight")?;
    let coupling = Coupling::bind(b)?;
    let mut h = tape.gather_rows(embed, &ids)?;
    if let Some(c) = &coupling {
        h = coupling_forward(tape, h, c)?;
    }
    h = layer_norm(tape, b, "embed.norm", h)?;
    let mut hidden = vec![h];

    let alibi = alibi_biases(spec.heads, t);
    let biases: Vec<Var> = (0..spec.heads)
        .map(|hd| {
            let data = alibi.data()[hd * t * t..(hd + 1) * t * t].to_vec();
            tape.constant(Tensor::new(vec![t, t], data).expect("alibi slice"))
        })
        .collect();

    for i in 0..spec.layers {
        let a = layer_norm(tape, b, &format!("block.{i}.attn_norm"), h)?;
        let attn = attention(tape, spec, b, i, a, (batch, t), &biases)?;
        let h1 = tape.add(h, attn)?;
        let f_in = layer_norm(tape, b, &format!("block.{i}.ffn_norm"), h1)?;
        let f = feed_forward(tape, b, i, f_in)?;
        h = tape.add(h1, f)?;
        hidden.push(h);
    }

    let mut z = layer_norm(tape, b, "embed.final_norm", h)?;
    if let Some(c) = &coupling {
        z = coupling_inverse(tape, z, c)?;
    }
    let et = tape.transpose(embed)?;
    let logits = tape.matmul(z, et)?;
    Ok(Forward {
        logits,
        hidden,
        batch,
        seq_len: t,
    })
}

/// Logits `[T x V]` and hidden states for one sequence, with optional
/// adapter tensors layered over the checkpoint.
pub fn forward(
    ckpt: &Checkpoint,
    adapters: Option<&BTreeMap<String, Tensor>>,
    tokens: &[usize],
) -> Result<(Tensor, HiddenStates)> {
    let mut tape = Tape::new();
    let b = Bindings::bind(&mut tape, std::iter::once(ckpt.tensors()).chain(adapters), &|_| false)?;
    let out = forward_tape(&mut tape, ckpt.spec(), &b, &[tokens])?;
    let logits = tape.value(out.logits).clone();
    let layers = out.hidden.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((logits, HiddenStates { layers }))
}
