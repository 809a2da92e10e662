//! End-to-end acceptance suite. Prints one PASS or FAIL line per
//! criterion. Numeric arguments select criteria, e.g.
//! `cargo test --test acceptance -- 8 13`.
//!
//! Failing criteria do not fail the test target unless
//! `ADAPTKIT_ACCEPTANCE_STRICT` is set.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use adaptkit::config::SweepSpec;
use adaptkit::core::data::{TaskKind, LANG_B};
use adaptkit::core::eval::{
    evaluate_task, label_histogram, layer_sweep_retrieval, prompted_examples, ScoreSpan,
};
use adaptkit::core::model::init_model;
use adaptkit::core::peft::{
    attach, coupling_forward, coupling_inverse, ia3_merge, is_mask_eligible, mask_from_scores,
    single_layer_scaled, trainable_params, Coupling, StrategyState,
};
use adaptkit::core::model::Bindings;
use adaptkit::core::tokenizer::BYTE_VOCAB;
use adaptkit::core::train::{
    clm_gradient_error, encode_prompted, instruction_tune, MixtureMode, PromptedExample,
};
use adaptkit::core::{
    finite_difference_check, forward, param_count, train, train_bpe, Batch, Checkpoint, ModelSpec,
    ParallelCorpus, StrategySpec, Tape, Tensor, TokenizerModel, TrainConfig, TrainData, Var, Variant,
};
use adaptkit::lab::Lab;
use adaptkit::{Axis, ExperimentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const SCRIPTS: &str = include_str!("../../core/tests/fixtures/scripts.tsv");

/// Shared state: the pretrained toy experiment and its MAD-X run.
struct Ctx {
    cache: PathBuf,
    scratch: tempfile::TempDir,
    toy: Option<Lab>,
    madx_seed0: Option<Checkpoint>,
}

impl Ctx {
    fn toy_config(&self, name: &str) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::toy(self.scratch.path().join(name));
        cfg.cache_dir = self.cache.clone();
        cfg
    }

    fn toy(&mut self) -> &mut Lab {
        if self.toy.is_none() {
            let cfg = self.toy_config("toy");
            self.toy = Some(Lab::open(&cfg).expect("toy experiment opens"));
        }
        self.toy.as_mut().unwrap()
    }
}

fn detail(line: impl AsRef<str>) {
    println!("      {}", line.as_ref());
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

fn jitter(tensors: &mut std::collections::BTreeMap<String, Tensor>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in tensors.iter_mut() {
        if name.starts_with("adapter.mask.") {
            continue;
        }
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn adapter_variants() -> Vec<Variant> {
    vec![
        Variant::Madx,
        Variant::Ia3,
        Variant::Ia3Inv,
        Variant::Lora,
        Variant::Bitfit,
        Variant::Csft,
        Variant::Fishmask,
    ]
}

/// Attaches `spec` and, for sparse variants, selects a random mask of the
/// configured size.
fn attached(base: &Checkpoint, spec: &StrategySpec, seed: u64) -> StrategyState {
    let mut state = attach(base, spec, seed).unwrap();
    if spec.variant.is_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<(String, Vec<f64>)> = base
            .tensors()
            .iter()
            .filter(|(n, _)| is_mask_eligible(n))
            .map(|(n, t)| (n.clone(), (0..t.len()).map(|_| rng.random::<f64>()).collect()))
            .collect();
        let k = trainable_params(base.spec(), spec);
        state.set_mask(&mask_from_scores(&scores, k).unwrap()).unwrap();
    }
    state
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn non_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] <= w[0])
}

// ------------------------------------------------------------- criteria

type Primitive = Box<dyn Fn(&mut Tape, Var) -> adaptkit::core::tensor::Result<Var>>;

fn gradients(_: &mut Ctx) -> Outcome {
    let b = random(&[4, 3], 1);
    let a = random(&[2, 4], 3);
    let other = random(&[3, 4], 5);
    let bias = random(&[4], 16);
    let ln_x = random(&[3, 5], 22);
    let (g, beta) = (random(&[5], 19), random(&[5], 20));
    let mask = Tensor::from_rows(&[&[0.0, f64::NEG_INFINITY, 0.0], &[0.0, 0.0, f64::NEG_INFINITY]]);
    let c = |t: Tensor| move |tape: &mut Tape| tape.constant(t.clone());
    let mut checks: Vec<(&str, Tensor, Primitive)> = Vec::new();
    {
        let b = c(b);
        checks.push(("matmul lhs", random(&[2, 4], 2), Box::new(move |t, x| {
            let b = b(t);
            t.matmul(x, b)
        })));
        let a = c(a);
        checks.push(("matmul rhs", random(&[4, 3], 4), Box::new(move |t, x| {
            let a = a(t);
            t.matmul(a, x)
        })));
        let o = c(other.clone());
        checks.push(("add", random(&[3, 4], 6), Box::new(move |t, x| {
            let o = o(t);
            t.add(x, o)
        })));
        let o = c(other.clone());
        checks.push(("sub", random(&[3, 4], 7), Box::new(move |t, x| {
            let o = o(t);
            t.sub(o, x)
        })));
        let o = c(other);
        checks.push(("mul", random(&[3, 4], 8), Box::new(move |t, x| {
            let o = o(t);
            t.mul(x, o)
        })));
        checks.push(("scale", random(&[3, 4], 10), Box::new(|t, x| t.scale(x, -2.5))));
        checks.push(("gelu", random(&[3, 4], 11), Box::new(|t, x| t.gelu(x))));
        checks.push(("sum", random(&[3, 4], 12), Box::new(|t, x| t.sum(x))));
        let x = c(random(&[3, 4], 13));
        checks.push(("add_row bias", random(&[4], 14), Box::new(move |t, b| {
            let x = x(t);
            t.add_row(x, b)
        })));
        let bias = c(bias);
        checks.push(("add_row input", random(&[3, 4], 15), Box::new(move |t, x| {
            let b = bias(t);
            t.add_row(x, b)
        })));
        checks.push(("repeat_rows", random(&[4], 17), Box::new(|t, v| t.repeat_rows(v, 5))));
        checks.push(("softmax_rows", random(&[3, 5], 18), Box::new(|t, x| t.softmax_rows(x))));
        let m = c(mask);
        checks.push(("masked softmax", random(&[2, 3], 25), Box::new(move |t, x| {
            let m = m(t);
            let y = t.add(x, m)?;
            t.softmax_rows(y)
        })));
        let (gg, bb) = (c(g), c(beta));
        checks.push(("layer_norm input", random(&[3, 5], 21), Box::new(move |t, x| {
            let (g, b) = (gg(t), bb(t));
            t.layer_norm(x, g, b)
        })));
        let xx = c(ln_x.clone());
        checks.push(("layer_norm gain", random(&[5], 23), Box::new(move |t, g| {
            let x = xx(t);
            let b = t.constant(Tensor::zeros(&[5]));
            t.layer_norm(x, g, b)
        })));
        let xx = c(ln_x);
        checks.push(("layer_norm bias", random(&[5], 24), Box::new(move |t, b| {
            let x = xx(t);
            let g = t.constant(Tensor::ones(&[5]));
            t.layer_norm(x, g, b)
        })));
        checks.push(("gather_rows", random(&[5, 3], 26), Box::new(|t, x| t.gather_rows(x, &[4, 0, 4, 2]))));
        checks.push(("transpose", random(&[3, 4], 27), Box::new(|t, x| t.transpose(x))));
        checks.push(("slice_cols", random(&[3, 6], 28), Box::new(|t, x| t.slice_cols(x, 2, 3))));
        checks.push(("slice_rows", random(&[5, 2], 29), Box::new(|t, x| t.slice_rows(x, 1, 3))));
        checks.push(("split and concat", random(&[3, 6], 30), Box::new(|t, x| {
            let p = t.split_last_dim(x, 3)?;
            t.concat_last_dim(&[p[2], p[0], p[1]])
        })));
        checks.push(("concat_rows", random(&[2, 3], 31), Box::new(|t, x| {
            let s = t.scale(x, 3.0)?;
            t.concat_rows(&[x, s, x])
        })));
        checks.push(("cross_entropy_mean", random(&[4, 5], 32), Box::new(|t, x| {
            t.cross_entropy_mean(x, &[2, 0, 1, 4], &[true, false, true, true])
        })));
    }
    let mut worst_primitive = (0.0f64, "");
    for (name, point, f) in &checks {
        // Weighted sum so every output coordinate carries a distinct weight.
        let err = finite_difference_check(
            |t, x| {
                let y = f(t, x)?;
                let shape = t.value(y).shape().to_vec();
                let w = t.constant(random(&shape, 99));
                let p = t.mul(y, w)?;
                t.sum(p)
            },
            point,
            1e-6,
        )
        .map_err(|e| format!("{name}: {e}"))?;
        if err > worst_primitive.0 {
            worst_primitive = (err, name);
        }
    }

    let spec = ModelSpec::new(1, 8, 2, 16, 8, 7);
    let base = init_model(&spec).unwrap();
    let batch = Batch {
        tokens: vec![vec![1, 5, 9, 2, 15, 3], vec![0, 4, 4, 8, 11, 7]],
        target: vec![vec![false, true, true, true, true, true], vec![false, true, true, false, true, true]],
    };
    let mut worst_model = (0.0f64, "base".to_string());
    let mut plain = base.clone();
    jitter(plain.tensors_mut(), 1);
    let mut models = vec![("base".to_string(), plain)];
    for variant in [Variant::Madx, Variant::Ia3Inv, Variant::Lora, Variant::Bitfit] {
        let state = attach(&base, &StrategySpec::new(variant).with_reduction(2), 3).unwrap();
        let mut tensors = base.tensors().clone();
        tensors.extend(state.tensors);
        let mut ckpt = Checkpoint::new(spec, tensors);
        jitter(ckpt.tensors_mut(), 2);
        models.push((variant.name().to_string(), ckpt));
    }
    for (name, ckpt) in &models {
        let err = clm_gradient_error(ckpt, &batch, 1e-6).map_err(|e| format!("{name}: {e}"))?;
        if err > worst_model.0 {
            worst_model = (err, name.clone());
        }
    }
    let msg = format!(
        "{} primitives, worst {} {:.2e}; end-to-end loss worst {} {:.2e}",
        checks.len(),
        worst_primitive.1,
        worst_primitive.0,
        worst_model.1,
        worst_model.0
    );
    if worst_primitive.0 < 1e-4 && worst_model.0 < 1e-3 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn identity_at_attach(_: &mut Ctx) -> Outcome {
    let base = init_model(&ModelSpec::toy()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs: Vec<Vec<usize>> = (0..10).map(|_| random_tokens(&mut rng, 512, 12)).collect();
    let mut worst = 0.0f64;
    for variant in adapter_variants() {
        let state = attached(&base, &StrategySpec::new(variant), 8);
        for tokens in &inputs {
            let (plain, _) = forward(&base, None, tokens).unwrap();
            let (adapted, _) = forward(&base, Some(&state.tensors), tokens).unwrap();
            worst = worst.max(plain.max_abs_diff(&adapted));
        }
    }
    let msg = format!("7 strategies x 10 inputs, max |logit diff| {worst:e}");
    if worst <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ia3_merge_equivalence(_: &mut Ctx) -> Outcome {
    let base = init_model(&ModelSpec::toy()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for variant in [Variant::Ia3, Variant::Ia3Inv] {
        let mut state = attach(&base, &StrategySpec::new(variant), 1).unwrap();
        jitter(&mut state.tensors, 10);
        let merged = ia3_merge(&base, &state).map_err(|e| e.to_string())?;
        let carried = (!merged.carried.is_empty()).then_some(&merged.carried);
        for _ in 0..20 {
            let tokens = random_tokens(&mut rng, 512, 10);
            let (a, _) = forward(&base, Some(&state.tensors), &tokens).unwrap();
            let (b, _) = forward(&merged.checkpoint, carried, &tokens).unwrap();
            worst = worst.max(a.max_abs_diff(&b));
        }
    }
    let msg = format!("ia3 and ia3_inv x 20 inputs, max |logit diff| {worst:e}");
    if worst < 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn invertible_round_trip(_: &mut Ctx) -> Outcome {
    let base = init_model(&ModelSpec::toy()).unwrap();
    let mut state = attach(&base, &StrategySpec::new(Variant::Ia3Inv), 2).unwrap();
    jitter(&mut state.tensors, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let e = Tensor::new(vec![100, 64], (0..6400).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let mut tape = Tape::new();
    let b = Bindings::bind(&mut tape, [&state.tensors], &|_| false).unwrap();
    let c = Coupling::bind(&b).unwrap().ok_or("no coupling tensors")?;
    let x = tape.constant(e.clone());
    let y = coupling_forward(&mut tape, x, &c).unwrap();
    let back = coupling_inverse(&mut tape, y, &c).unwrap();
    let moved = tape.value(y).max_abs_diff(&e);
    let err = tape.value(back).max_abs_diff(&e);
    let msg = format!("100 embeddings, forward moves {moved:.3}, round-trip error {err:e}");
    if err < 1e-10 && moved > 0.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn tokenizer_round_trip(_: &mut Ctx) -> Outcome {
    let fixtures: Vec<(&str, &str)> = SCRIPTS.lines().filter_map(|l| l.split_once('\t')).collect();
    let corpus: Vec<&str> = fixtures.iter().map(|(_, s)| *s).collect();
    let tok = train_bpe(&corpus, 400, 0).map_err(|e| e.to_string())?.with_specials();
    let known = |tok: &TokenizerModel, ids: &[usize]| {
        ids.iter()
            .all(|&id| id < BYTE_VOCAB + tok.merges().len() && tok.piece(id).is_ok())
    };
    let mut unknown = 0;
    let mut mismatches = Vec::new();
    for (lang, text) in &fixtures {
        let ids = tok.encode(text.as_bytes());
        unknown += usize::from(!known(&tok, &ids));
        if tok.decode(&ids).ok().as_deref() != Some(text.as_bytes()) {
            mismatches.push(lang.to_string());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut random_failures = 0;
    for _ in 0..10_000 {
        let len = rng.random_range(0..64);
        let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let ids = tok.encode(&bytes);
        unknown += usize::from(!known(&tok, &ids));
        if tok.decode(&ids).ok() != Some(bytes) {
            random_failures += 1;
        }
    }
    let msg = format!(
        "{} scripts, 10000 random byte strings: {} script mismatches, {random_failures} random mismatches, {unknown} with unknown ids",
        fixtures.len(),
        mismatches.len()
    );
    if mismatches.is_empty() && random_failures == 0 && unknown == 0 {
        Ok(msg)
    } else {
        Err(format!("{msg} {mismatches:?}"))
    }
}

fn parameter_accounting(_: &mut Ctx) -> Outcome {
    let model = ModelSpec::toy();
    let base = init_model(&model).unwrap();
    let mut bad = Vec::new();
    for variant in adapter_variants().into_iter().chain([Variant::Continued]) {
        let spec = StrategySpec::new(variant);
        let state = attached(&base, &spec, 0);
        let (closed, counted) = (trainable_params(&model, &spec), state.trainable_count(&base));
        detail(format!("{:<9} closed form {closed:>7}  enumerated {counted:>7}", variant.name()));
        if closed != counted {
            bad.push(variant.name());
        }
    }
    let ia3 = trainable_params(&model, &StrategySpec::new(Variant::Ia3));
    let madx = trainable_params(&model, &StrategySpec::new(Variant::Madx).with_reduction(16));
    let continued = trainable_params(&model, &StrategySpec::new(Variant::Continued));
    let msg = format!("ia3 {ia3} < madx(r=16) {madx} < continued {continued}");
    if !bad.is_empty() {
        return Err(format!("counts differ for {bad:?}"));
    }
    if ia3 < madx && madx < continued && continued == param_count(&model) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn frozen_base(ctx: &mut Ctx) -> Outcome {
    let lab = ctx.toy();
    let cfg = TrainConfig {
        steps: 500,
        batch_size: 2,
        seq_len: 16,
        eval_every: 500,
        heldout_size: 10,
        ..lab.cfg.train.clone()
    };
    let data = TrainData::from_documents(&lab.new_docs[..200], &cfg, lab.pad(), lab.eod()).unwrap();
    let is_base = |n: &str| !n.starts_with("adapter.");
    let before = lab.base.checksum(is_base);
    let probe = &lab.new_docs[0][..24.min(lab.new_docs[0].len())];
    let (reference, _) = forward(&lab.base, None, probe).unwrap();
    let mut bad = Vec::new();
    for variant in adapter_variants() {
        let state = attach(&lab.base, &StrategySpec::new(variant), 0).unwrap();
        let out = train(&lab.base, &state, &data, &cfg).map_err(|e| format!("{variant}: {e}"))?;
        let same = out.checkpoint.checksum(is_base) == before;
        let detached = Checkpoint::new(*lab.base.spec(), out.checkpoint.base_tensors());
        let (logits, _) = forward(&detached, None, probe).unwrap();
        let (adapted, _) = forward(&out.checkpoint, None, probe).unwrap();
        let changed = adapted.max_abs_diff(&reference);
        detail(format!(
            "{:<9} base checksum {}  detached logits {}  adapted differs by {changed:.3e}",
            variant.name(),
            if same { "same" } else { "CHANGED" },
            if logits == reference { "bit-exact" } else { "DIFFER" }
        ));
        if !same || logits != reference || changed == 0.0 {
            bad.push(variant.name());
        }
    }
    if bad.is_empty() {
        Ok("7 variants x 500 steps: base unchanged, detaching restores base logits".into())
    } else {
        Err(format!("failed for {bad:?}"))
    }
}

/// Adaptation settings shared by every strategy in the toy comparison.
fn toy_protocol(lab: &mut Lab, variant: Variant, seed: u64) {
    lab.cfg.strategy = StrategySpec::new(variant);
    let warmup = if matches!(variant, Variant::Ia3 | Variant::Ia3Inv) { 0.1 } else { 0.0 };
    lab.cfg.train = TrainConfig {
        peak_lr: 1e-3,
        warmup_ratio: warmup,
        seed,
        ..TrainConfig::toy()
    };
}

fn toy_adaptation(ctx: &mut Ctx) -> Outcome {
    let mut failures = Vec::new();
    let variants = [
        Variant::Continued,
        Variant::Madx,
        Variant::Ia3,
        Variant::Ia3Inv,
        Variant::Lora,
        Variant::Bitfit,
        Variant::Csft,
        Variant::Fishmask,
    ];
    let mut forgetting: Vec<(u64, f64, f64)> = Vec::new();
    let mut factors = |variant: Variant, m: &adaptkit::lab::AdaptMetrics, seed: u64| {
        let f = m.seen_ppl_after / m.seen_ppl_before;
        match forgetting.iter_mut().find(|r| r.0 == seed) {
            Some(r) if variant == Variant::Continued => r.1 = f,
            Some(r) => r.2 = f,
            None if variant == Variant::Continued => forgetting.push((seed, f, f64::NAN)),
            None => forgetting.push((seed, f64::NAN, f)),
        }
    };
    for variant in variants {
        let lab = ctx.toy();
        toy_protocol(lab, variant, 0);
        let run = lab.adapt(&[]).map_err(|f| format!("{variant}: {}", f.error))?;
        let m = &run.metrics;
        let reduction = 1.0 - m.heldout_ppl / m.heldout_ppl_before;
        detail(format!(
            "{:<9} seed 0  new ppl {:.4e} -> {:.4e} ({:.1}% lower)  seen ppl x{:.3}",
            variant.name(),
            m.heldout_ppl_before,
            m.heldout_ppl,
            100.0 * reduction,
            m.seen_ppl_after / m.seen_ppl_before
        ));
        if reduction < 0.30 {
            failures.push(format!("{} reduces new-language ppl by {:.1}%", variant.name(), 100.0 * reduction));
        }
        if matches!(variant, Variant::Continued | Variant::Madx) {
            factors(variant, m, 0);
        }
        if variant == Variant::Madx {
            ctx.madx_seed0 = Some(run.outcome.checkpoint);
        }
    }
    for seed in [1, 2] {
        for variant in [Variant::Continued, Variant::Madx] {
            let lab = ctx.toy();
            toy_protocol(lab, variant, seed);
            let run = lab.adapt(&[]).map_err(|f| format!("{variant} seed {seed}: {}", f.error))?;
            factors(variant, &run.metrics, seed);
        }
    }
    for (seed, continued, madx) in &forgetting {
        detail(format!("seed {seed}  seen ppl factor: continued x{continued:.3}  madx x{madx:.3}"));
        if continued.is_nan() || madx.is_nan() || continued <= madx {
            failures.push(format!("seed {seed}: continued x{continued:.3} does not exceed madx x{madx:.3}"));
        }
    }
    if failures.is_empty() {
        Ok("8 strategies reduce new-language ppl by >= 30%; continued forgets more than madx on seeds 0-2".into())
    } else {
        Err(failures.join("; "))
    }
}

fn random_classifier(ctx: &mut Ctx) -> Outcome {
    let lab = ctx.toy();
    let dataset = lab
        .synth
        .as_ref()
        .and_then(|s| s.task(TaskKind::Nli, LANG_B))
        .cloned()
        .ok_or("no synthetic NLI task")?;
    let labels: Vec<usize> = dataset.examples.iter().map(|e| e.label).collect();
    let hist = label_histogram(&labels);
    let balanced = hist.len() == 3 && hist.values().all(|&c| c == labels.len() / 3);
    let templates = lab.templates().map_err(|e| e.to_string())?;
    let template = templates
        .iter()
        .find(|t| t.name == format!("toy-nli-{LANG_B}"))
        .ok_or("no toy NLI template")?;
    let mut acc = Vec::new();
    for seed in 0..5 {
        let spec = ModelSpec {
            seed,
            ..*lab.base.spec()
        };
        let model = init_model(&spec).unwrap();
        let r = evaluate_task(&model, &lab.tok, template, &dataset, ScoreSpan::Whole, "random", "none")
            .map_err(|e| e.to_string())?;
        acc.push(r.accuracy);
    }
    let m = mean(&acc);
    let per_seed: Vec<String> = acc.iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
    let msg = format!(
        "labels {hist:?}, per-seed accuracy [{}]%, mean {:.2}%",
        per_seed.join(", "),
        100.0 * m
    );
    if balanced && (m - 1.0 / 3.0).abs() <= 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Runs a three-seed CLI sweep and returns (value, params, mean ppl) rows
/// of `sweep.csv`.
fn cli_sweep(cfg: &ExperimentConfig, name: &str) -> Result<Vec<(String, usize, f64)>, String> {
    let path = common::write_config(&cfg.out_dir.join(format!("{name}.toml")), cfg);
    let out = common::run("sweep", &path, &["--seeds", "3"]);
    if common::code(&out) != 0 {
        return Err(format!("sweep exited {}: {}", common::code(&out), common::stderr(&out)));
    }
    for row in common::rows(&common::read(cfg.out_dir.join("sweep_runs.csv"))) {
        detail(format!("{}={} seed {}  params {}  heldout ppl {}", row[0], row[1], row[2], row[4], row[5]));
    }
    common::rows(&common::read(cfg.out_dir.join("sweep.csv")))
        .into_iter()
        .map(|r| {
            let params = r[4].parse().map_err(|_| format!("bad params in {r:?}"))?;
            let ppl = r[5].parse().map_err(|_| format!("bad ppl in {r:?}"))?;
            Ok((r[1].clone(), params, ppl))
        })
        .collect()
}

fn data_size_sweep(ctx: &mut Ctx) -> Outcome {
    let mut cfg = ctx.toy_config("data-size");
    cfg.train.steps = 1000;
    cfg.sweep = Some(SweepSpec {
        axis: Axis::DataSize,
        values: [0.01, 0.1, 1.0].into_iter().map(toml::Value::Float).collect(),
    });
    let rows = cli_sweep(&cfg, "data-size")?;
    let ppl: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let msg = format!(
        "seed-mean heldout ppl {}",
        rows.iter().map(|r| format!("{}: {:.3}", r.0, r.2)).collect::<Vec<_>>().join(", ")
    );
    if rows.len() == 3 && non_increasing(&ppl) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn reduction_sweep(ctx: &mut Ctx) -> Outcome {
    let mut cfg = ctx.toy_config("reduction");
    cfg.model = ModelSpec::new(2, 48, 4, 512, 128, 0);
    cfg.train.steps = 1000;
    cfg.sweep = Some(SweepSpec {
        axis: Axis::ReductionFactor,
        values: [48, 16, 4].into_iter().map(toml::Value::Integer).collect(),
    });
    let rows = cli_sweep(&cfg, "reduction")?;
    let params: Vec<usize> = rows.iter().map(|r| r.1).collect();
    let expected: Vec<usize> = [48, 16, 4]
        .iter()
        .map(|&r| trainable_params(&cfg.model, &StrategySpec::new(Variant::Madx).with_reduction(r)))
        .collect();
    let ppl: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let msg = format!(
        "params {params:?}, seed-mean heldout ppl {}",
        rows.iter().map(|r| format!("r={}: {:.3}", r.0, r.2)).collect::<Vec<_>>().join(", ")
    );
    let increasing = params.windows(2).all(|w| w[1] > w[0]);
    if rows.len() == 3 && params == expected && increasing && non_increasing(&ppl) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn placement_counts(_: &mut Ctx) -> Outcome {
    let model = ModelSpec::toy();
    let all = StrategySpec::new(Variant::Madx).with_invertible(false);
    let (l, d, w) = (model.layers, model.width, model.width / 16);
    let expected_all = l * (2 * d * w + w + d);
    let count_all = trainable_params(&model, &all);
    if count_all != expected_all {
        return Err(format!("all-blocks count {count_all} differs from {expected_all}"));
    }
    let base = init_model(&model).unwrap();
    let mut worst = 0.0f64;
    for block in 0..l {
        let spec = single_layer_scaled(&all, &model, block).map_err(|e| e.to_string())?;
        let count = trainable_params(&model, &spec);
        let enumerated = attach(&base, &spec, 0).unwrap().trainable_count(&base);
        let gap = (count as f64 - count_all as f64).abs() / count_all as f64;
        detail(format!(
            "block {block}: {count} (enumerated {enumerated}) vs all blocks {count_all}, gap {:.2}%",
            100.0 * gap
        ));
        if count != enumerated {
            return Err(format!("block {block}: closed form {count} != enumerated {enumerated}"));
        }
        worst = worst.max(gap);
    }
    let msg = format!("largest gap {:.2}% (limit 1%)", 100.0 * worst);
    if worst <= 0.01 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Central 99% interval of Binomial(n, p) hit counts.
fn binomial_99(n: usize, p: f64) -> (usize, usize) {
    let mut pmf = (1.0 - p).powi(n as i32);
    let mut cdf = 0.0;
    let (mut lo, mut hi) = (None, n);
    for k in 0..=n {
        cdf += pmf;
        if lo.is_none() && cdf > 0.005 {
            lo = Some(k);
        }
        if cdf >= 0.995 {
            hi = k;
            break;
        }
        pmf *= (n - k) as f64 / (k + 1) as f64 * p / (1.0 - p);
    }
    (lo.unwrap_or(0), hi)
}

fn random_sentences(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    while seen.len() < n {
        let words: Vec<String> = (0..rng.random_range(5..10))
            .map(|_| (0..rng.random_range(2..7)).map(|_| rng.random_range(b'a'..=b'z') as char).collect())
            .collect();
        seen.insert(words.join(" "));
    }
    let mut out: Vec<String> = seen.into_iter().collect();
    for i in (1..out.len()).rev() {
        out.swap(i, rng.random_range(0..=i));
    }
    out
}

fn retrieval_probe(ctx: &mut Ctx) -> Outcome {
    if ctx.madx_seed0.is_none() {
        let lab = ctx.toy();
        toy_protocol(lab, Variant::Madx, 0);
        let run = lab.adapt(&[]).map_err(|f| f.error.to_string())?;
        ctx.madx_seed0 = Some(run.outcome.checkpoint);
    }
    let adapted = ctx.madx_seed0.clone().unwrap();
    let lab = ctx.toy();
    let n = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random_sentences(&mut rng, n);
    let b = random_sentences(&mut rng, n);
    let identical = ParallelCorpus {
        pairs: a.iter().map(|s| (s.clone(), s.clone())).collect(),
    };
    let unrelated = ParallelCorpus {
        pairs: a.into_iter().zip(b).collect(),
    };
    let ident = layer_sweep_retrieval(&lab.base, &lab.base, &lab.tok, &identical).map_err(|e| e.to_string())?;
    let rand_acc = layer_sweep_retrieval(&lab.base, &lab.base, &lab.tok, &unrelated).map_err(|e| e.to_string())?;
    let (lo, hi) = binomial_99(n, 1.0 / n as f64);
    let parallel = lab.parallel().map_err(|e| e.to_string())?;
    let before = layer_sweep_retrieval(&lab.base, &lab.base, &lab.tok, &parallel).map_err(|e| e.to_string())?;
    let after = layer_sweep_retrieval(&adapted, &lab.base, &lab.tok, &parallel).map_err(|e| e.to_string())?;
    let best = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    detail(format!("identical text by layer {ident:?}"));
    detail(format!("unrelated text by layer {rand_acc:?}, 99% band {lo}..={hi} hits of {n}"));
    detail(format!("parallel pairs before {before:?}"));
    detail(format!("parallel pairs after  {after:?}"));
    let ident_ok = ident.iter().all(|&x| x == 1.0);
    let chance_ok = rand_acc.iter().all(|&x| {
        let hits = (x * n as f64).round() as usize;
        (lo..=hi).contains(&hits)
    });
    let improved = best(&after) > best(&before);
    let msg = format!(
        "identical all 1.0: {ident_ok}; unrelated within band: {chance_ok}; best layer {:.3} -> {:.3}",
        best(&before),
        best(&after)
    );
    if ident_ok && chance_ok && improved {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn instruction_tuning(ctx: &mut Ctx) -> Outcome {
    let lab = ctx.toy();
    let synth = lab.synth.clone().ok_or("no synthetic corpus")?;
    let templates = lab.templates().map_err(|e| e.to_string())?;
    let template_for = |kind: TaskKind, lang: &str| {
        templates
            .iter()
            .find(|t| t.kind == kind && t.language == lang && t.name.starts_with("toy-"))
            .cloned()
            .ok_or_else(|| format!("no toy template for {} {lang}", kind.name()))
    };

    // Loss mask: true exactly on the target tokens at the end.
    let ex = PromptedExample {
        task: "toy-nli".into(),
        language: LANG_B.into(),
        input: "premise text, right? ".into(),
        target: "yes, hypothesis".into(),
    };
    let (ids, mask) = encode_prompted(&lab.tok, &ex).map_err(|e| e.to_string())?;
    let target_ids = lab.tok.encode(ex.target.as_bytes());
    let first = mask.iter().position(|&m| m).unwrap_or(mask.len());
    let mask_ok = ids.len() == mask.len()
        && ids[0] == lab.eod()
        && mask.iter().filter(|&&m| m).count() == target_ids.len()
        && mask[first..].iter().all(|&m| m)
        && ids[first..] == target_ids[..]
        && !mask[0];

    let test_template = template_for(TaskKind::Nli, LANG_B)?;
    let nli_b = synth.task(TaskKind::Nli, LANG_B).ok_or("no NLI task")?.clone();
    let split = nli_b.examples.len() * 3 / 4;
    let test = adaptkit::core::TaskDataset {
        examples: nli_b.examples[split..].to_vec(),
        ..nli_b.clone()
    };
    let mut mixture = Vec::new();
    for dataset in &synth.tasks {
        let template = template_for(dataset.kind, &dataset.language)?;
        let mut d = dataset.clone();
        if d.kind == TaskKind::Nli && d.language == LANG_B {
            d.examples.truncate(split);
        }
        mixture.extend(prompted_examples(&template, &d).map_err(|e| e.to_string())?);
    }
    let target_count = mixture.iter().filter(|e| e.language == LANG_B).count();
    let span = lab.cfg.eval.score_span;
    let mut scores = [Vec::new(), Vec::new()];
    for seed in 0..3 {
        let cfg = TrainConfig {
            steps: 1500,
            batch_size: 8,
            seq_len: lab.base.spec().max_seq,
            peak_lr: 3e-3,
            warmup_ratio: 0.1,
            eval_every: 250,
            heldout_size: 40,
            seed,
            ..TrainConfig::toy()
        };
        for (i, mode) in [MixtureMode::TargetOnly, MixtureMode::MixturePlusTarget].into_iter().enumerate() {
            let tuned = instruction_tune(&lab.base, &lab.tok, &mixture, LANG_B, mode, &cfg).map_err(|e| e.to_string())?;
            if mode == MixtureMode::TargetOnly && tuned.train_examples + tuned.skipped + cfg.heldout_size != target_count {
                return Err(format!("target-only pool has {} examples, expected {target_count}", tuned.train_examples));
            }
            let r = evaluate_task(&tuned.checkpoint, &lab.tok, &test_template, &test, span, "tuned", "")
                .map_err(|e| e.to_string())?;
            detail(format!(
                "seed {seed} {:<19} {} train examples, {} task types, test accuracy {:.3}",
                format!("{mode:?}"),
                tuned.train_examples,
                tuned.task_types.len(),
                r.accuracy
            ));
            scores[i].push(r.accuracy);
        }
    }
    let (target_only, mixture_plus) = (mean(&scores[0]), mean(&scores[1]));
    let msg = format!(
        "loss mask ok: {mask_ok}; seed-mean accuracy on {} held-out examples: mixture_plus_target {mixture_plus:.3} vs target_only {target_only:.3}",
        test.examples.len()
    );
    if mask_ok && mixture_plus >= target_only {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn determinism(ctx: &mut Ctx) -> Outcome {
    let dir = ctx.scratch.path().join("determinism");
    let mut cfg = common::tiny_config(&dir);
    cfg.sweep = Some(SweepSpec {
        axis: Axis::ReductionFactor,
        values: vec![toml::Value::Integer(8), toml::Value::Integer(4)],
    });
    let path = common::write_config(&dir.join("tiny.toml"), &cfg);
    let mut checked = Vec::new();
    for command in ["adapt", "eval", "probe", "sweep", "report"] {
        let manifest = if command == "report" {
            cfg.out_dir.join("report").join("manifest-report.json")
        } else {
            cfg.out_dir.join(format!("manifest-{command}.json"))
        };
        let mut bytes = Vec::new();
        for _ in 0..2 {
            let out = common::run(command, &path, &[]);
            if common::code(&out) != 0 {
                return Err(format!("{command} exited {}: {}", common::code(&out), common::stderr(&out)));
            }
            bytes.push(std::fs::read(&manifest).map_err(|e| format!("{}: {e}", manifest.display()))?);
        }
        if bytes[0] != bytes[1] {
            return Err(format!("{command} manifest differs between runs"));
        }
        checked.push(command);
    }
    Ok(format!("byte-identical manifests on rerun for {}", checked.join(", ")))
}

// ----------------------------------------------------------------- runner

type Criterion = fn(&mut Ctx) -> Outcome;

const CRITERIA: [(&str, Criterion); 15] = [
    ("gradient suite", gradients),
    ("identity at attach", identity_at_attach),
    ("ia3 merge equivalence", ia3_merge_equivalence),
    ("invertible adapter round trip", invertible_round_trip),
    ("tokenizer round trip", tokenizer_round_trip),
    ("parameter accounting", parameter_accounting),
    ("frozen base invariance", frozen_base),
    ("toy adaptation", toy_adaptation),
    ("random classifier", random_classifier),
    ("data-size sweep", data_size_sweep),
    ("reduction-factor sweep", reduction_sweep),
    ("placement sweep counts", placement_counts),
    ("retrieval probe", retrieval_probe),
    ("instruction tuning", instruction_tuning),
    ("determinism", determinism),
];

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cache")
}

fn main() {
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut ctx = Ctx {
        cache: cache_dir(),
        scratch: tempfile::tempdir().expect("scratch dir"),
        toy: None,
        madx_seed0: None,
    };
    let start = Instant::now();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut ctx))).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS {n:>2} {name} ({secs:.1}s): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {n:>2} {name} ({secs:.1}s): {msg}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        ran - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 && std::env::var_os("ADAPTKIT_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
