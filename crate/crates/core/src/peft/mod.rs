//! Adaptation strategies as parameter bundles over a base checkpoint.
//!
//! Every strategy except continued pretraining keeps the base frozen and
//! trains only tensors in the `adapter.*` namespace:
//!
//! ```text
//! adapter.block.<i>.bottleneck.{down,up}.{weight,bias}   bottleneck adapter
//! adapter.invertible.{f,g}.{down,up}.{weight,bias}       invertible coupling
//! adapter.block.<i>.ia3.{key,value,ffn}                  (IA)³ vectors
//! adapter.block.<i>.lora.{q,v}.{a,b}                     LoRA factors
//! adapter.delta.<base name>                              additive delta
//! adapter.mask.<base name>                               0/1 update mask
//! ```
//!
//! BitFit, C-SFT and FishMask are expressed as deltas added to base
//! tensors; the sparse variants restrict updates with a mask.

mod adapters;
mod mask;
mod merge;

pub use adapters::{bottleneck_forward, coupling_forward, coupling_inverse, Coupling, Mlp};
pub use mask::{csft_select_mask, default_frozen_names, fishmask_select, is_mask_eligible, mask_from_scores, Mask};
pub use merge::{ia3_merge, Merged};

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{is_bias, param_count, Checkpoint, ModelError, ModelSpec, INIT_STD};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PeftError {
    #[error("invalid strategy `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("model specs differ in `{0}`")]
    SpecMismatch(&'static str),
    #[error("strategy specs differ: {0}")]
    StrategyMismatch(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("data stream is empty")]
    EmptyStream,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, PeftError>;

fn invalid(field: &'static str, message: impl Into<String>) -> PeftError {
    PeftError::Invalid {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Continued,
    Madx,
    Ia3,
    Ia3Inv,
    Lora,
    Bitfit,
    Csft,
    Fishmask,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Continued,
        Variant::Madx,
        Variant::Ia3,
        Variant::Ia3Inv,
        Variant::Lora,
        Variant::Bitfit,
        Variant::Csft,
        Variant::Fishmask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Continued => "continued",
            Variant::Madx => "madx",
            Variant::Ia3 => "ia3",
            Variant::Ia3Inv => "ia3_inv",
            Variant::Lora => "lora",
            Variant::Bitfit => "bitfit",
            Variant::Csft => "csft",
            Variant::Fishmask => "fishmask",
        }
    }

    pub fn is_masked(self) -> bool {
        matches!(self, Variant::Csft | Variant::Fishmask)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = PeftError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid("variant", format!("unknown variant {s:?}")))
    }
}

/// Which strategy to attach and its knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub variant: Variant,
    /// Bottleneck reduction factor: adapter width is `d / reduction`.
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    /// Attach the invertible embedding adapter.
    #[serde(default)]
    pub invertible: bool,
    /// Blocks that receive block-level adapters; `None` means all blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Vec<usize>>,
    #[serde(default = "default_lora_rank")]
    pub lora_rank: usize,
    /// Fraction of eligible scalars selected by the sparse variants.
    #[serde(default = "default_mask_density")]
    pub mask_density: f64,
    /// Single bottleneck at this block, widened by the layer count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub single_layer_scaled: Option<usize>,
}

fn default_reduction() -> usize {
    16
}

fn default_lora_rank() -> usize {
    4
}

fn default_mask_density() -> f64 {
    0.005
}

impl StrategySpec {
    /// Defaults for a variant. MAD-X and `ia3_inv` carry the invertible
    /// adapter.
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            reduction: default_reduction(),
            invertible: matches!(variant, Variant::Madx | Variant::Ia3Inv),
            placement: None,
            lora_rank: default_lora_rank(),
            mask_density: default_mask_density(),
            single_layer_scaled: None,
        }
    }

    pub fn with_reduction(mut self, r: usize) -> Self {
        self.reduction = r;
        self
    }

    pub fn with_invertible(mut self, on: bool) -> Self {
        self.invertible = on;
        self
    }

    pub fn with_placement(mut self, blocks: Vec<usize>) -> Self {
        self.placement = Some(blocks);
        self
    }

    pub fn with_density(mut self, density: f64) -> Self {
        self.mask_density = density;
        self
    }

    pub fn has_invertible(&self) -> bool {
        self.invertible || self.variant == Variant::Ia3Inv
    }

    /// Blocks receiving block-level adapters, sorted and deduplicated.
    pub fn blocks(&self, model: &ModelSpec) -> Vec<usize> {
        let set: BTreeSet<usize> = match (&self.single_layer_scaled, &self.placement) {
            (Some(l), _) => [*l].into(),
            (None, Some(p)) => p.iter().copied().collect(),
            (None, None) => (0..model.layers).collect(),
        };
        set.into_iter().collect()
    }

    /// Bottleneck hidden width, including the single-layer scaling.
    pub fn bottleneck_width(&self, model: &ModelSpec) -> usize {
        let base = model.width / self.reduction.max(1);
        match self.single_layer_scaled {
            Some(_) => base * model.layers,
            None => base,
        }
    }

    /// Largest bottleneck width accepted for single-layer scaling.
    pub fn bottleneck_cap(model: &ModelSpec) -> usize {
        4 * model.width
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        let d = model.width;
        if self.variant == Variant::Madx {
            if self.reduction == 0 || d % self.reduction != 0 {
                return Err(invalid(
                    "reduction",
                    format!("reduction factor {} does not divide width {d}", self.reduction),
                ));
            }
        }
        if self.has_invertible() && d % 2 != 0 {
            return Err(invalid("invertible", format!("invertible adapter needs an even width, got {d}")));
        }
        if let Some(p) = &self.placement {
            if p.is_empty() {
                return Err(invalid("placement", "placement set is empty"));
            }
            if let Some(bad) = p.iter().find(|&&b| b >= model.layers) {
                return Err(invalid(
                    "placement",
                    format!("block {bad} is outside 0..{}", model.layers),
                ));
            }
        }
        if !(self.mask_density > 0.0 && self.mask_density <= 1.0) {
            return Err(invalid(
                "mask_density",
                format!("density {} is outside (0, 1]", self.mask_density),
            ));
        }
        if self.variant == Variant::Lora && (self.lora_rank == 0 || self.lora_rank > d) {
            return Err(invalid(
                "lora_rank",
                format!("rank {} must be in 1..={d}", self.lora_rank),
            ));
        }
        if let Some(l) = self.single_layer_scaled {
            if self.variant != Variant::Madx {
                return Err(invalid("single_layer_scaled", "only applies to madx"));
            }
            if l >= model.layers {
                return Err(invalid(
                    "single_layer_scaled",
                    format!("block {l} is outside 0..{}", model.layers),
                ));
            }
            let w = self.bottleneck_width(model);
            let cap = Self::bottleneck_cap(model);
            if w > cap {
                return Err(invalid(
                    "single_layer_scaled",
                    format!("scaled bottleneck width {w} exceeds the cap {cap}"),
                ));
            }
        }
        Ok(())
    }
}

/// A single bottleneck at `block`, widened `L`-fold so its parameter count
/// approaches that of one bottleneck in every block.
pub fn single_layer_scaled(base: &StrategySpec, model: &ModelSpec, block: usize) -> Result<StrategySpec> {
    let mut spec = base.clone();
    spec.variant = Variant::Madx;
    spec.placement = Some(vec![block]);
    spec.single_layer_scaled = Some(block);
    spec.validate(model)?;
    Ok(spec)
}

fn mlp_count(input: usize, hidden: usize) -> usize {
    2 * input * hidden + hidden + input
}

/// Hidden width of each invertible coupling network (reduction factor 2).
pub fn coupling_hidden(width: usize) -> usize {
    (width / 4).max(1)
}

/// Number of scalars eligible for the sparse variants.
pub fn mask_eligible_count(model: &ModelSpec) -> usize {
    model
        .param_shapes()
        .iter()
        .filter(|(n, _)| is_mask_eligible(n))
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Closed-form number of trainable parameters.
pub fn trainable_params(model: &ModelSpec, spec: &StrategySpec) -> usize {
    let (d, f) = (model.width, model.ffn_width);
    let blocks = spec.blocks(model).len();
    let inv = if spec.has_invertible() {
        2 * mlp_count(d / 2, coupling_hidden(d))
    } else {
        0
    };
    let core = match spec.variant {
        Variant::Continued => return param_count(model),
        Variant::Madx => blocks * mlp_count(d, spec.bottleneck_width(model)),
        Variant::Ia3 | Variant::Ia3Inv => blocks * (2 * d + f),
        Variant::Lora => blocks * 2 * (2 * d * spec.lora_rank),
        Variant::Bitfit => model.layers * (7 * d + f) + 2 * d,
        Variant::Csft | Variant::Fishmask => mask_size(spec.mask_density, mask_eligible_count(model)),
    };
    core + inv
}

/// `round(density * eligible)`, at least one.
pub fn mask_size(density: f64, eligible: usize) -> usize {
    ((density * eligible as f64).round() as usize).clamp(1, eligible.max(1))
}

/// Trainable tensors of an attached strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyState {
    pub spec: StrategySpec,
    pub tensors: BTreeMap<String, Tensor>,
}

impl StrategyState {
    /// Whether base tensors are left untouched by training.
    pub fn frozen_base(&self) -> bool {
        self.spec.variant != Variant::Continued
    }

    /// Names updated by the optimizer: all base names for continued
    /// pretraining, otherwise every non-mask adapter tensor.
    pub fn trainable_names(&self, base: &Checkpoint) -> Vec<String> {
        if self.spec.variant == Variant::Continued {
            return base.base_tensors().into_keys().collect();
        }
        self.tensors
            .keys()
            .filter(|k| !k.starts_with("adapter.mask."))
            .cloned()
            .collect()
    }

    /// Update mask for a trainable tensor, if it has one.
    pub fn mask_for(&self, name: &str) -> Option<&Tensor> {
        let base = name.strip_prefix("adapter.delta.")?;
        self.tensors.get(&format!("adapter.mask.{base}"))
    }

    /// Number of scalars the optimizer can change.
    pub fn trainable_count(&self, base: &Checkpoint) -> usize {
        self.trainable_names(base)
            .iter()
            .map(|n| match self.mask_for(n) {
                Some(m) => m.data().iter().filter(|&&v| v != 0.0).count(),
                None => self
                    .tensors
                    .get(n)
                    .or_else(|| base.tensors().get(n))
                    .map_or(0, Tensor::len),
            })
            .sum()
    }

    /// Replaces the masks of a sparse variant.
    pub fn set_mask(&mut self, mask: &Mask) -> Result<()> {
        if !self.spec.variant.is_masked() {
            return Err(PeftError::Unsupported(format!("{} has no mask", self.spec.variant)));
        }
        for (name, bits) in mask {
            let key = format!("adapter.mask.{name}");
            let t = self
                .tensors
                .get_mut(&key)
                .ok_or_else(|| invalid("mask", format!("`{name}` is not mask-eligible")))?;
            if t.len() != bits.len() {
                return Err(invalid("mask", format!("mask for `{name}` has the wrong length")));
            }
            for (v, &b) in t.data_mut().iter_mut().zip(bits) {
                *v = if b { 1.0 } else { 0.0 };
            }
        }
        Ok(())
    }

    /// Adapter bundle: only `adapter.*` tensors, with the strategy in the
    /// metadata.
    pub fn to_bundle(&self, model: &ModelSpec) -> Checkpoint {
        let mut ckpt = Checkpoint::new(*model, self.tensors.clone());
        ckpt.set_meta(
            "strategy",
            serde_json::to_value(&self.spec).expect("strategy serializes"),
        );
        ckpt
    }

    pub fn from_bundle(bundle: &Checkpoint) -> Result<Self> {
        let spec = bundle
            .meta("strategy")
            .cloned()
            .ok_or_else(|| PeftError::Unsupported("bundle has no strategy metadata".into()))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| PeftError::Unsupported(format!("bundle strategy: {e}")))
            })?;
        Ok(Self {
            spec,
            tensors: bundle.adapter_bundle().into_tensors(),
        })
    }
}

/// Attaches freshly initialized strategy parameters to `ckpt`.
///
/// Every variant starts as the identity: bottleneck and coupling
/// up-projections and LoRA `B` are zero, (IA)³ vectors are one, and deltas
/// are zero. Down-projections are `N(0, 0.02)`; LoRA `A` is `N(0, 1/d)`.
pub fn attach(ckpt: &Checkpoint, spec: &StrategySpec, seed: u64) -> Result<StrategyState> {
    let model = ckpt.spec();
    spec.validate(model)?;
    let (d, f) = (model.width, model.ffn_width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adapter_normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let lora_normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
    let mut tensors = BTreeMap::new();
    let mut normal = |shape: &[usize], dist: &Normal<f64>| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("shape")
    };
    let mut add_mlp = |tensors: &mut BTreeMap<String, Tensor>, prefix: &str, input: usize, hidden: usize| {
        tensors.insert(
            format!("{prefix}.down.weight"),
            normal(&[input, hidden], &adapter_normal),
        );
        tensors.insert(format!("{prefix}.down.bias"), Tensor::zeros(&[hidden]));
        tensors.insert(format!("{prefix}.up.weight"), Tensor::zeros(&[hidden, input]));
        tensors.insert(format!("{prefix}.up.bias"), Tensor::zeros(&[input]));
    };

    if spec.has_invertible() {
        let hidden = coupling_hidden(d);
        add_mlp(&mut tensors, "adapter.invertible.f", d / 2, hidden);
        add_mlp(&mut tensors, "adapter.invertible.g", d / 2, hidden);
    }
    let blocks = spec.blocks(model);
    match spec.variant {
        Variant::Continued => {}
        Variant::Madx => {
            let w = spec.bottleneck_width(model);
            for &i in &blocks {
                add_mlp(&mut tensors, &format!("adapter.block.{i}.bottleneck"), d, w);
            }
        }
        Variant::Ia3 | Variant::Ia3Inv => {
            for &i in &blocks {
                let p = format!("adapter.block.{i}.ia3");
                tensors.insert(format!("{p}.key"), Tensor::ones(&[d]));
                tensors.insert(format!("{p}.value"), Tensor::ones(&[d]));
                tensors.insert(format!("{p}.ffn"), Tensor::ones(&[f]));
            }
        }
        Variant::Lora => {
            let r = spec.lora_rank;
            for &i in &blocks {
                for proj in ["q", "v"] {
                    let p = format!("adapter.block.{i}.lora.{proj}");
                    tensors.insert(format!("{p}.a"), normal(&[d, r], &lora_normal));
                    tensors.insert(format!("{p}.b"), Tensor::zeros(&[r, d]));
                }
            }
        }
        Variant::Bitfit => {
            for (name, t) in ckpt.base_tensors() {
                if is_bias(&name) {
                    tensors.insert(format!("adapter.delta.{name}"), Tensor::zeros(t.shape()));
                }
            }
        }
        Variant::Csft | Variant::Fishmask => {
            for (name, t) in ckpt.base_tensors() {
                if is_mask_eligible(&name) {
                    tensors.insert(format!("adapter.delta.{name}"), Tensor::zeros(t.shape()));
                    tensors.insert(format!("adapter.mask.{name}"), Tensor::zeros(t.shape()));
                }
            }
        }
    }
    Ok(StrategyState {
        spec: spec.clone(),
        tensors,
    })
}

/// Compares two model specs on every architectural field (the seed is
/// allowed to differ).
pub fn check_same_architecture(a: &ModelSpec, b: &ModelSpec) -> Result<()> {
    let fields: [(&'static str, usize, usize); 6] = [
        ("layers", a.layers, b.layers),
        ("width", a.width, b.width),
        ("heads", a.heads, b.heads),
        ("ffn_width", a.ffn_width, b.ffn_width),
        ("vocab", a.vocab, b.vocab),
        ("max_seq", a.max_seq, b.max_seq),
    ];
    match fields.iter().find(|(_, x, y)| x != y) {
        Some((name, _, _)) => Err(PeftError::SpecMismatch(name)),
        None => Ok(()),
    }
}

/// Loads the adapters of `bundle` for use over `target`.
///
/// Base tensors of `target` are not touched; the returned state is used
/// together with `target` in the forward pass.
pub fn transplant(bundle: &Checkpoint, target: &Checkpoint, expected: Option<&StrategySpec>) -> Result<StrategyState> {
    check_same_architecture(bundle.spec(), target.spec())?;
    let state = StrategyState::from_bundle(bundle)?;
    if let Some(spec) = expected {
        if spec != &state.spec {
            return Err(PeftError::StrategyMismatch(format!(
                "bundle has {:?}, expected {:?}",
                state.spec, spec
            )));
        }
    }
    if !state.frozen_base() {
        return Err(PeftError::Unsupported("continued pretraining has no adapters to transplant".into()));
    }
    for name in state.tensors.keys() {
        if let Some(base) = name
            .strip_prefix("adapter.delta.")
            .or_else(|| name.strip_prefix("adapter.mask."))
        {
            let want = target.get(base)?.shape();
            if state.tensors[name].shape() != want {
                return Err(PeftError::StrategyMismatch(format!("`{name}` does not fit the target")));
            }
        }
    }
    Ok(state)
}
