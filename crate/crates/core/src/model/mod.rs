//! ALiBi decoder-only transformer with a post-embedding layer norm and a
//! tied output projection.
//!
//! Blocks are pre-norm: `h += attn(ln(h))`, then `h += ffn(ln(h))`.
//! Weights are stored `[in x out]` and applied as `y = x W + b`. The
//! output logits are `h E^T` where `E` is `embed.weight`.
//!
//! Parameter names:
//!
//! ```text
//! embed.weight                      [V x d]
//! embed.norm.{gain,bias}            [d]   (after the embedding lookup)
//! embed.final_norm.{gain,bias}      [d]   (before the output projection)
//! block.<i>.attn_norm.{gain,bias}   [d]
//! block.<i>.attn.{q,k,v,o}.weight   [d x d]
//! block.<i>.attn.{q,k,v,o}.bias     [d]
//! block.<i>.ffn_norm.{gain,bias}    [d]
//! block.<i>.ffn.up.{weight,bias}    [d x f], [f]
//! block.<i>.ffn.down.{weight,bias}  [f x d], [d]
//! ```

mod alibi;
mod checkpoint;
mod forward;

pub use alibi::{alibi_biases, alibi_slopes};
pub use checkpoint::{Checkpoint, CKPT_VERSION};
pub use forward::{forward, forward_tape, Bindings, Forward, HiddenStates};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("sequence length {len} exceeds max_seq {max}")]
    SeqTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter name `{0}` is outside the embed.*, block.<i>.*, adapter.* scheme")]
    BadName(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architectural hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelSpec {
    /// Spec with the default feed-forward width `4 * width`.
    pub fn new(layers: usize, width: usize, heads: usize, vocab: usize, max_seq: usize, seed: u64) -> Self {
        Self {
            layers,
            width,
            heads,
            ffn_width: 4 * width,
            vocab,
            max_seq,
            seed,
        }
    }

    /// Two blocks, width 64, four heads, vocabulary 512.
    pub fn toy() -> Self {
        Self::new(2, 64, 4, 512, 128, 0)
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("width", self.width),
            ("heads", self.heads),
            ("ffn_width", self.ffn_width),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(ModelError::Spec(format!("{name} must be positive")));
            }
        }
        if self.width % self.heads != 0 {
            return Err(ModelError::Spec(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Every base parameter with its shape, in canonical (sorted) order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.width, self.ffn_width);
        let mut out = vec![
            ("embed.weight".to_string(), vec![self.vocab, d]),
            ("embed.norm.gain".into(), vec![d]),
            ("embed.norm.bias".into(), vec![d]),
            ("embed.final_norm.gain".into(), vec![d]),
            ("embed.final_norm.bias".into(), vec![d]),
        ];
        for i in 0..self.layers {
            let p = format!("block.{i}");
            for norm in ["attn_norm", "ffn_norm"] {
                out.push((format!("{p}.{norm}.gain"), vec![d]));
                out.push((format!("{p}.{norm}.bias"), vec![d]));
            }
            for proj in ["q", "k", "v", "o"] {
                out.push((format!("{p}.attn.{proj}.weight"), vec![d, d]));
                out.push((format!("{p}.attn.{proj}.bias"), vec![d]));
            }
            out.push((format!("{p}.ffn.up.weight"), vec![d, f]));
            out.push((format!("{p}.ffn.up.bias"), vec![f]));
            out.push((format!("{p}.ffn.down.weight"), vec![f, d]));
            out.push((format!("{p}.ffn.down.bias"), vec![d]));
        }
        out.sort();
        out
    }
}

/// Closed-form number of base parameters.
pub fn param_count(spec: &ModelSpec) -> usize {
    let (v, d, f, l) = (spec.vocab, spec.width, spec.ffn_width, spec.layers);
    let block = 4 * d * d + 4 * d + 2 * d * f + d + f + 4 * d;
    v * d + 2 * d + l * block + 2 * d
}

/// Whether a base parameter is a layer-norm gain or bias.
pub fn is_layer_norm(name: &str) -> bool {
    name.contains("norm.")
}

/// Whether a base parameter is a bias vector (layer-norm biases included).
pub fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

/// Projections whose output feeds the residual stream directly.
fn is_residual_output(name: &str) -> bool {
    name.ends_with("attn.o.weight") || name.ends_with("ffn.down.weight")
}

/// Fresh randomly initialized base model.
///
/// Weight matrices are drawn from `N(0, 0.02)`, with the attention output
/// and FFN down projections further scaled by `1/sqrt(2L)`. Biases start at
/// zero and layer-norm gains at one.
pub fn init_model(spec: &ModelSpec) -> Result<Checkpoint> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let residual_scale = 1.0 / ((2 * spec.layers.max(1)) as f64).sqrt();
    let mut tensors = BTreeMap::new();
    for (name, shape) in spec.param_shapes() {
        let t = if name.ends_with(".gain") {
            Tensor::ones(&shape)
        } else if is_bias(&name) {
            Tensor::zeros(&shape)
        } else {
            let scale = if is_residual_output(&name) { residual_scale } else { 1.0 };
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng) * scale).collect();
            Tensor::new(shape, data)?
        };
        tensors.insert(name, t);
    }
    Ok(Checkpoint::new(*spec, tensors))
}
