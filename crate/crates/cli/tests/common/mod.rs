//! Small configs and a process runner shared by the CLI test targets.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adaptkit::core::{ModelSpec, StrategySpec, SynthSpec, TrainConfig, Variant};
use adaptkit::ExperimentConfig;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_adaptkit")
}

/// A seconds-scale experiment: two blocks of width 16 on a small
/// synthetic corpus.
pub fn tiny_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy(dir.join("run"));
    cfg.cache_dir = dir.join("cache");
    cfg.model = ModelSpec::new(2, 16, 2, 300, 128, 0);
    cfg.strategy = StrategySpec::new(Variant::Madx).with_reduction(4);
    cfg.train = TrainConfig {
        steps: 40,
        batch_size: 4,
        seq_len: 16,
        eval_every: 20,
        heldout_size: 10,
        ..cfg.train
    };
    cfg.base.pretrain = Some(TrainConfig {
        steps: 60,
        batch_size: 4,
        seq_len: 16,
        eval_every: 30,
        heldout_size: 10,
        ..TrainConfig::toy()
    });
    cfg.data.tokenizer_docs = 40;
    cfg.data.synthetic = Some(SynthSpec {
        n_docs: 80,
        n_parallel: 30,
        n_task: 30,
        ..SynthSpec::default()
    });
    cfg.eval.retrieval_size = 30;
    cfg
}

pub fn write_config(path: &Path, cfg: &ExperimentConfig) -> PathBuf {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, cfg.to_toml()).unwrap();
    path.to_path_buf()
}

pub fn run(command: &str, config: &Path, extra: &[&str]) -> Output {
    Command::new(bin())
        .arg(command)
        .arg("--config")
        .arg(config)
        .args(extra)
        .env_remove("ADAPTKIT_OUT")
        .env_remove("ADAPTKIT_WORKERS")
        .output()
        .expect("adaptkit runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

/// Parsed CSV rows without the header.
pub fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}
