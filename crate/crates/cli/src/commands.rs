//! The five commands. Each writes its outputs and a manifest into the
//! output directory and returns the deterministic part of its result.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use adaptkit_core::eval::{
    evaluate_task, forgetting_delta, layer_sweep_retrieval, reports_to_csv, with_adapters, EvalReport, ScoreSpan,
    SeenSet, REPORT_HEADER,
};
use adaptkit_core::peft::{check_same_architecture, transplant};
use adaptkit_core::Checkpoint;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, ModelRef, ADAPTED_REF, BASE_REF};
use crate::error::{runtime, validation, CliError, Result};
use crate::lab::{adapted_path, AdaptMetrics, Failed, Lab};
use crate::manifest::{split_csv, ArtifactWriter, Manifest, MANIFEST_SCHEMA};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const ADAPTERS_FILE: &str = "adapters.ckpt";
pub const RUNLOG_FILE: &str = "runlog.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_SCHEMA: &str = "adaptkit-report/1";

/// Command-line settings layered over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub score_span: Option<ScoreSpan>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
            if out.is_relative() {
                cfg.out_dir = std::env::current_dir().map(|d| d.join(out)).unwrap_or_else(|_| out.clone());
            }
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(span) = self.score_span {
            cfg.eval.score_span = span;
        }
    }
}

/// Result of `adapt`.
#[derive(Debug, Clone)]
pub struct AdaptSummary {
    pub metrics: AdaptMetrics,
    pub train_seconds: f64,
}

pub fn cmd_adapt(cfg: &ExperimentConfig) -> Result<AdaptSummary> {
    let lab = Lab::open(cfg)?;
    let tasks = lab.tasks()?;
    let out = cfg.out();
    let config_toml = cfg.to_toml();
    let mut w = ArtifactWriter::new(&out)?;
    std::fs::write(out.join(CONFIG_FILE), &config_toml)?;
    match lab.adapt(&tasks) {
        Ok(a) => {
            let ckpt = &a.outcome.checkpoint;
            w.write(CHECKPOINT_FILE, &ckpt.to_bytes()?)?;
            w.write(ADAPTERS_FILE, &ckpt.adapter_bundle().to_bytes()?)?;
            w.write_csv(RUNLOG_FILE, &a.outcome.log.to_csv())?;
            let metrics = json!({ "status": "ok", "adapt": a.metrics });
            w.finish("adapt", &config_toml, cfg.train.seed, metrics)?;
            Ok(AdaptSummary {
                metrics: a.metrics,
                train_seconds: a.outcome.log.total_seconds(),
            })
        }
        Err(Failed { error, log }) => {
            if let Some(log) = log {
                w.write_csv(RUNLOG_FILE, &log.to_csv())?;
            }
            let metrics = json!({ "status": "failed", "error": error.to_string() });
            w.finish("adapt", &config_toml, cfg.train.seed, metrics)?;
            Err(error)
        }
    }
}

/// A model to evaluate, with the labels it is reported under.
pub struct LoadedModel {
    pub label: String,
    pub strategy: String,
    pub checkpoint: Checkpoint,
}

fn strategy_of(ckpt: &Checkpoint) -> String {
    ckpt.meta("strategy")
        .and_then(|v| v.get("variant"))
        .and_then(Value::as_str)
        .unwrap_or("none")
        .to_string()
}

fn load_ref(lab: &Lab, reference: &str, path: &str, adapters: bool) -> Result<Checkpoint> {
    let file = match reference {
        BASE_REF if !adapters => return Ok(lab.base.clone()),
        ADAPTED_REF => {
            let p = adapted_path(&lab.cfg);
            if adapters {
                p.with_file_name(ADAPTERS_FILE)
            } else {
                p
            }
        }
        other => lab.cfg.resolve(Path::new(other)),
    };
    if !file.exists() {
        return Err(validation(path, format!("{} does not exist", file.display())));
    }
    let ckpt = Checkpoint::load(&file).map_err(|e| runtime(format!("{}: {e}", file.display())))?;
    if !adapters {
        check_same_architecture(ckpt.spec(), &lab.cfg.model)
            .map_err(|e| validation(path, format!("{e} from the `model` section")))?;
    }
    Ok(ckpt)
}

/// Models named in `eval.models`, or the base and the adapted checkpoint.
pub fn resolve_models(lab: &Lab) -> Result<Vec<LoadedModel>> {
    let refs = if lab.cfg.eval.models.is_empty() {
        let mut refs = vec![ModelRef {
            label: "base".into(),
            checkpoint: BASE_REF.into(),
            adapters: None,
        }];
        if adapted_path(&lab.cfg).exists() {
            refs.push(ModelRef {
                label: "adapted".into(),
                checkpoint: ADAPTED_REF.into(),
                adapters: None,
            });
        }
        refs
    } else {
        lab.cfg.eval.models.clone()
    };
    let mut out = Vec::new();
    for (i, r) in refs.iter().enumerate() {
        let ckpt = load_ref(lab, &r.checkpoint, &format!("eval.models[{i}].checkpoint"), false)?;
        let model = match &r.adapters {
            None => LoadedModel {
                label: r.label.clone(),
                strategy: strategy_of(&ckpt),
                checkpoint: ckpt,
            },
            Some(a) => {
                let bundle = load_ref(lab, a, &format!("eval.models[{i}].adapters"), true)?;
                let state = transplant(&bundle, &ckpt, None).map_err(|e| CliError::from(e).within(&format!("eval.models[{i}]")))?;
                LoadedModel {
                    label: r.label.clone(),
                    strategy: format!("{}+transplant", state.spec.variant),
                    checkpoint: with_adapters(&ckpt, &state),
                }
            }
        };
        out.push(model);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub model: String,
    pub measure: String,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

pub const FORGETTING_HEADER: &str = "model,measure,before,after,delta";
pub const TIMING_HEADER: &str = "model,task,prompts,seconds,seconds_per_prompt";

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    let lab = Lab::open(cfg)?;
    let tasks = lab.tasks()?;
    if tasks.is_empty() && !cfg.eval.paired {
        return Err(validation("eval.tasks", "nothing to evaluate"));
    }
    let models = resolve_models(&lab)?;
    let span = cfg.eval.score_span;
    let mut reports = Vec::new();
    let mut timing = format!("{TIMING_HEADER}\n");
    for m in &models {
        for t in &tasks {
            let start = Instant::now();
            let r = evaluate_task(&m.checkpoint, &lab.tok, &t.template, &t.dataset, span, &m.label, &m.strategy)?;
            let secs = start.elapsed().as_secs_f64();
            timing.push_str(&format!("{},{},{},{},{}\n", m.label, t.key(), r.n, secs, secs / r.n as f64));
            reports.push(r);
        }
    }
    let out = cfg.out();
    let mut w = ArtifactWriter::new(&out)?;
    w.write("eval.csv", reports_to_csv(&reports).as_bytes())?;
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n";
    w.write("eval.json", json.as_bytes())?;
    w.write_csv("eval_timing.csv", &timing)?;

    let mut forgetting = Vec::new();
    if cfg.eval.paired {
        let perplexity = SeenSet::Perplexity {
            docs: lab.seen_heldout(),
            seq_len: cfg.train.seq_len,
            pad_id: lab.pad(),
            eod_id: lab.eod(),
        };
        for m in &models {
            let f = forgetting_delta(&lab.base, &m.checkpoint, &perplexity)?;
            forgetting.push(ForgettingRow {
                model: m.label.clone(),
                measure: "seen_ppl".into(),
                before: f.before,
                after: f.after,
                delta: f.delta,
            });
            for t in tasks.iter().filter(|t| t.dataset.language == lab.seen_language) {
                let set = SeenSet::Accuracy {
                    tok: &lab.tok,
                    template: &t.template,
                    dataset: &t.dataset,
                    span,
                };
                let f = forgetting_delta(&lab.base, &m.checkpoint, &set)?;
                forgetting.push(ForgettingRow {
                    model: m.label.clone(),
                    measure: format!("accuracy:{}", t.key()),
                    before: f.before,
                    after: f.after,
                    delta: f.delta,
                });
            }
        }
        let mut csv = format!("{FORGETTING_HEADER}\n");
        for r in &forgetting {
            csv.push_str(&format!("{},{},{},{},{}\n", r.model, r.measure, r.before, r.after, r.delta));
        }
        w.write("forgetting.csv", csv.as_bytes())?;
    }
    let metrics = json!({
        "reports": reports.len(),
        "accuracy": reports.iter().map(|r| json!({
            "model": r.model, "task": r.task, "template": r.template, "accuracy": r.accuracy,
        })).collect::<Vec<_>>(),
        "forgetting": forgetting,
    });
    w.finish("eval", &cfg.to_toml(), cfg.train.seed, metrics)?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRow {
    pub condition: String,
    pub layer: usize,
    pub accuracy: f64,
}

pub const RETRIEVAL_HEADER: &str = "condition,layer,accuracy";

/// Retrieval accuracy per layer before adaptation (the base on both sides)
/// and after (the adapted model on the new-language side).
pub fn cmd_probe(cfg: &ExperimentConfig) -> Result<Vec<RetrievalRow>> {
    let lab = Lab::open(cfg)?;
    let pairs = lab.parallel()?;
    let adapted = match cfg.eval.models.first() {
        Some(_) => resolve_models(&lab)?.remove(0).checkpoint,
        None => load_ref(&lab, ADAPTED_REF, "out_dir", false)?,
    };
    let before = layer_sweep_retrieval(&lab.base, &lab.base, &lab.tok, &pairs)?;
    let after = layer_sweep_retrieval(&adapted, &lab.base, &lab.tok, &pairs)?;
    let layers: Vec<usize> = cfg.eval.layers.clone().unwrap_or_else(|| (0..=cfg.model.layers).collect());
    let mut rows = Vec::new();
    for (condition, accs) in [("before", &before), ("after", &after)] {
        for &l in &layers {
            rows.push(RetrievalRow {
                condition: condition.into(),
                layer: l,
                accuracy: accs[l],
            });
        }
    }
    let mut csv = format!("{RETRIEVAL_HEADER}\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.condition, r.layer, r.accuracy));
    }
    let best = |accs: &[f64]| accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let out = cfg.out();
    let mut w = ArtifactWriter::new(&out)?;
    w.write("retrieval.csv", csv.as_bytes())?;
    let metrics = json!({ "pairs": pairs.len(), "best_before": best(&before), "best_after": best(&after) });
    w.finish("probe", &cfg.to_toml(), cfg.train.seed, metrics)?;
    Ok(rows)
}

/// One (value, seed) run of a sweep.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub value: String,
    pub seed: u64,
    pub result: std::result::Result<AdaptSummary, String>,
}

pub const SWEEP_HEADER: &str = "axis,value,seeds,status,trainable_params,heldout_ppl,accuracy,train_seconds";
pub const SWEEP_RUNS_HEADER: &str = "axis,value,seed,status,trainable_params,heldout_ppl,accuracy,train_seconds";

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every axis value for `seeds` consecutive training seeds on
/// `workers` threads. Failed runs are recorded and the sweep continues;
/// the command fails afterwards if any run failed.
pub fn cmd_sweep(cfg: &ExperimentConfig, workers: usize, seeds: usize) -> Result<Vec<SweepRun>> {
    let sweep = cfg.sweep.clone().ok_or_else(|| validation("sweep", "the config has no sweep section"))?;
    cfg.validate()?;
    let out = cfg.out();
    let seeds = seeds.max(1);
    let mut jobs = Vec::new();
    for i in 0..sweep.values.len() {
        let label = crate::config::SweepSpec::label(&sweep.values[i]);
        for k in 0..seeds as u64 {
            let mut run = sweep.apply(cfg, i)?;
            run.train.seed = cfg.train.seed + k;
            run.out_dir = out.join("runs").join(format!("{}-{label}", sweep.axis.name())).join(format!("seed-{}", run.train.seed));
            run.cache_dir = cfg.cache();
            jobs.push((label.clone(), run));
        }
    }
    // Builds the shared tokenizer and base once before the runs start.
    Lab::open(cfg)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SweepRun>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((label, run)) = jobs.get(i) else { break };
                let result = cmd_adapt(run).map_err(|e| e.to_string());
                if let Err(e) = &result {
                    eprintln!("sweep run {}={label} seed {} failed: {e}", sweep.axis.name(), run.train.seed);
                }
                results.lock().expect("no poisoned runs")[i] = Some(SweepRun {
                    value: label.clone(),
                    seed: run.train.seed,
                    result,
                });
            });
        }
    });
    let runs: Vec<SweepRun> = results
        .into_inner()
        .expect("no poisoned runs")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect();

    let axis = sweep.axis.name();
    let mut per_run = format!("{SWEEP_RUNS_HEADER}\n");
    for r in &runs {
        match &r.result {
            Ok(s) => per_run.push_str(&format!(
                "{axis},{},{},ok,{},{},{},{}\n",
                r.value,
                r.seed,
                s.metrics.trainable_params,
                s.metrics.heldout_ppl,
                opt(s.metrics.mean_accuracy()),
                s.train_seconds
            )),
            Err(_) => per_run.push_str(&format!("{axis},{},{},failed,,,,\n", r.value, r.seed)),
        }
    }
    let mut table = format!("{SWEEP_HEADER}\n");
    let mut failed = 0;
    for chunk in runs.chunks(seeds) {
        let ok: Vec<&AdaptSummary> = chunk.iter().filter_map(|r| r.result.as_ref().ok()).collect();
        failed += chunk.len() - ok.len();
        if ok.len() < chunk.len() {
            table.push_str(&format!("{axis},{},{},failed,,,,\n", chunk[0].value, chunk.len()));
            continue;
        }
        table.push_str(&format!(
            "{axis},{},{},ok,{},{},{},{}\n",
            chunk[0].value,
            chunk.len(),
            ok[0].metrics.trainable_params,
            opt(mean(ok.iter().map(|s| s.metrics.heldout_ppl))),
            opt(mean(ok.iter().filter_map(|s| s.metrics.mean_accuracy()))),
            opt(mean(ok.iter().map(|s| s.train_seconds)))
        ));
    }
    let mut w = ArtifactWriter::new(&out)?;
    w.write_csv("sweep.csv", &table)?;
    w.write_csv("sweep_runs.csv", &per_run)?;
    let metrics = json!({ "axis": axis, "runs": runs.len(), "failed": failed });
    w.finish("sweep", &cfg.to_toml(), cfg.train.seed, metrics)?;
    if failed > 0 {
        return Err(runtime(format!("{failed} of {} sweep runs failed", runs.len())));
    }
    Ok(runs)
}

fn find_manifests(dir: &Path, skip: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir == skip {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_manifests(&p, skip, out)?;
        } else if p
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("manifest-") && n.ends_with(".json"))
        {
            out.push(p);
        }
    }
    Ok(())
}

fn rel(root: &Path, p: &Path) -> String {
    let r = p.strip_prefix(root).unwrap_or(p).display().to_string();
    if r.is_empty() {
        ".".into()
    } else {
        r
    }
}

/// Parsed `runlog.csv` rows: step, loss, held-out perplexity, seconds, bytes.
fn read_runlog(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect())
}

pub const RESOURCES_HEADER: &str = "run,strategy,trainable_params,train_seconds,seconds_per_prompt,peak_mem_bytes";

/// Merges the manifests, run logs, evaluation tables and sweep tables found
/// under the output directory into `<out>/report`.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<Value> {
    let root = cfg.out();
    let report_dir = root.join("report");
    let mut manifests = Vec::new();
    if root.is_dir() {
        find_manifests(&root, &report_dir, &mut manifests)?;
    }
    if manifests.is_empty() {
        return Err(validation("out_dir", format!("{} holds no manifests", root.display())));
    }
    let mut runs = Vec::new();
    let mut runlogs = String::from("run,step,loss,heldout_ppl,seconds,mem_bytes\n");
    let mut evals = format!("run,{REPORT_HEADER}\n");
    let mut sweeps = String::new();
    let mut resources: Vec<(usize, String, String)> = Vec::new();
    for path in &manifests {
        let m = Manifest::load(path)?;
        let dir = path.parent().expect("manifest has a directory");
        let run = rel(&root, dir);
        match m.command.as_str() {
            "adapt" => {
                if m.artifacts.iter().any(|a| a.path == RUNLOG_FILE) {
                    let rows = read_runlog(&dir.join(RUNLOG_FILE))?;
                    for r in &rows {
                        runlogs.push_str(&format!("{run},{}\n", r.join(",")));
                    }
                    if let Some(a) = m.metrics.get("adapt") {
                        let train_seconds = rows.last().and_then(|r| r.get(3)).cloned().unwrap_or_default();
                        let peak = rows.iter().filter_map(|r| r.get(4)?.parse::<u64>().ok()).max().unwrap_or(0);
                        let params = a["trainable_params"].as_u64().unwrap_or(0) as usize;
                        let per_prompt = mean_seconds_per_prompt(&dir.join("eval_timing.csv"));
                        resources.push((
                            params,
                            run.clone(),
                            format!(
                                "{run},{},{params},{train_seconds},{per_prompt},{peak}\n",
                                a["variant"].as_str().unwrap_or("")
                            ),
                        ));
                    }
                }
            }
            "eval" => {
                let text = std::fs::read_to_string(dir.join("eval.csv"))?;
                for line in text.lines().skip(1) {
                    evals.push_str(&format!("{run},{line}\n"));
                }
            }
            "sweep" => {
                let text = std::fs::read_to_string(dir.join("sweep.csv"))?;
                let mut lines = text.lines();
                let header = lines.next().unwrap_or(SWEEP_HEADER);
                if sweeps.is_empty() {
                    sweeps = format!("{header}\n");
                }
                for l in lines {
                    sweeps.push_str(l);
                    sweeps.push('\n');
                }
            }
            _ => {}
        }
        runs.push(json!({
            "dir": run,
            "command": m.command,
            "config_sha256": m.config_sha256,
            "seed": m.seed,
            "metrics": m.metrics,
        }));
    }
    resources.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    let mut res_csv = format!("{RESOURCES_HEADER}\n");
    for (_, _, row) in &resources {
        res_csv.push_str(row);
    }

    let report = json!({ "schema": REPORT_SCHEMA, "manifest_schema": MANIFEST_SCHEMA, "runs": runs });
    let mut w = ArtifactWriter::new(&report_dir)?;
    w.write("report.json", (serde_json::to_string_pretty(&report).expect("report serializes") + "\n").as_bytes())?;
    w.write_csv("runlogs.csv", &runlogs)?;
    w.write("eval.csv", evals.as_bytes())?;
    w.write_csv("resources.csv", &res_csv)?;
    if !sweeps.is_empty() {
        w.write_csv("sweep.csv", &sweeps)?;
    }
    w.finish("report", &cfg.to_toml(), cfg.train.seed, json!({ "manifests": manifests.len() }))?;
    Ok(report)
}

/// Mean prompt time over an `eval_timing.csv`, or NaN when the run was
/// not evaluated.
fn mean_seconds_per_prompt(path: &Path) -> f64 {
    let Ok(text) = std::fs::read_to_string(path) else {
        return f64::NAN;
    };
    mean(text.lines().skip(1).filter_map(|l| split_csv(l).get(4)?.parse().ok())).unwrap_or(f64::NAN)
}
