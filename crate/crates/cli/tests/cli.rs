//! End-to-end behaviour of the `adaptkit` binary on seconds-scale configs.

mod common;

use std::path::Path;
use std::process::Command;

use adaptkit::commands::{ADAPTERS_FILE, CHECKPOINT_FILE, RUNLOG_FILE};
use adaptkit::config::{ModelRef, SweepSpec};
use adaptkit::core::peft::single_layer_scaled;
use adaptkit::core::{trainable_params, ModelSpec, StrategySpec, Variant};
use adaptkit::manifest::Manifest;
use adaptkit::{Axis, ExperimentConfig};
use common::{code, read, rows, run, stderr, tiny_config, write_config};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn shipped_toy_config_is_the_default_and_round_trips() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    let mut expected = ExperimentConfig::toy("../runs/toy");
    expected.cache_dir = "../.adaptkit-cache".into();
    expected.root = cfg.root.clone();
    assert_eq!(cfg, expected);
    cfg.validate().unwrap();
    let mut back = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
    back.root = cfg.root.clone();
    assert_eq!(back, cfg);
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        prop::sample::select(Variant::ALL.to_vec()),
        prop::sample::select(vec![2usize, 4, 8, 16]),
        1usize..5000,
        1e-6f64..1e-1,
        any::<u64>(),
        prop::option::of(0.01f64..1.0),
        prop::sample::select(vec![Axis::DataSize, Axis::ReductionFactor, Axis::BatchSize, Axis::SeqLen]),
        prop::collection::vec(1i64..64, 1..4),
    )
        .prop_map(|(variant, r, steps, lr, seed, fraction, axis, values)| {
            let mut cfg = ExperimentConfig::toy("out");
            cfg.strategy = StrategySpec::new(variant).with_reduction(r);
            cfg.train.steps = steps;
            cfg.train.eval_every = steps.min(250);
            cfg.train.peak_lr = lr;
            cfg.train.seed = seed;
            cfg.data.sample_fraction = fraction;
            cfg.sweep = Some(SweepSpec {
                axis,
                values: values.into_iter().map(toml::Value::Integer).collect(),
            });
            cfg
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn configs_round_trip_through_toml(cfg in arb_config()) {
        let text = cfg.to_toml();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml(), text);
    }
}

#[test]
fn unknown_keys_are_validation_errors_with_a_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = tiny_config(dir.path()).to_toml();
    text = text.replace("[strategy]\n", "[strategy]\nreduktion = 3\n");
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let out = run("adapt", &path, &[]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("strategy"), "{}", stderr(&out));
}

#[test]
fn reduction_that_does_not_divide_the_width_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.model = ModelSpec { width: 64, heads: 4, ffn_width: 256, ..cfg.model };
    cfg.strategy.reduction = 7;
    let path = write_config(&dir.path().join("c.toml"), &cfg);
    let out = run("adapt", &path, &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("strategy.reduction"), "{}", stderr(&out));
    assert!(!dir.path().join("run").exists(), "validation must precede any work");
}

#[test]
fn adapt_writes_three_hashed_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(&dir.path().join("c.toml"), &tiny_config(dir.path()));
    let out = run("adapt", &path, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run_dir = dir.path().join("run");
    let manifest_path = run_dir.join(Manifest::file_name("adapt"));
    let first = read(&manifest_path);
    let m: Manifest = serde_json::from_str(&first).unwrap();
    let names: Vec<&str> = m.artifacts.iter().map(|a| a.path.as_str()).collect();
    assert_eq!(names, [CHECKPOINT_FILE, ADAPTERS_FILE, RUNLOG_FILE]);
    for a in &m.artifacts {
        assert!(run_dir.join(&a.path).is_file());
    }
    assert_eq!(m.metrics["status"], "ok");

    // The second run reads the cached base instead of pretraining it.
    assert_eq!(code(&run("adapt", &path, &[])), 0);
    assert_eq!(read(&manifest_path), first);

    assert_eq!(code(&run("adapt", &path, &["--seed", "5"])), 0);
    let other: Manifest = serde_json::from_str(&read(&manifest_path)).unwrap();
    assert_eq!(other.seed, 5);
    assert_ne!(other.artifacts[0].sha256, m.artifacts[0].sha256);
}

#[test]
fn divergence_exits_1_and_keeps_the_partial_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.strategy = StrategySpec::new(Variant::Continued);
    cfg.train.peak_lr = 1e300;
    let path = write_config(&dir.path().join("c.toml"), &cfg);
    let out = run("adapt", &path, &[]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"), "{}", stderr(&out));
    let log = read(dir.path().join("run").join(RUNLOG_FILE));
    assert!(log.starts_with("step,loss,heldout_ppl,seconds,mem_bytes"));
    let m: Manifest = serde_json::from_str(&read(dir.path().join("run/manifest-adapt.json"))).unwrap();
    assert_eq!(m.metrics["status"], "failed");
}

#[test]
fn eval_is_repeatable_and_paired_mode_on_the_same_model_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.eval.models = vec![
        ModelRef {
            label: "one".into(),
            checkpoint: "@base".into(),
            adapters: None,
        },
        ModelRef {
            label: "two".into(),
            checkpoint: "@base".into(),
            adapters: None,
        },
    ];
    let path = write_config(&dir.path().join("c.toml"), &cfg);
    let out = run("eval", &path, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = read(dir.path().join("run/eval.csv"));
    let json = read(dir.path().join("run/eval.json"));
    assert_eq!(rows(&csv).len(), 2 * cfg.eval.tasks.len());
    let reports: Vec<serde_json::Value> = serde_json::from_str(&json).unwrap();
    assert_eq!(reports.len(), rows(&csv).len());

    assert_eq!(code(&run("eval", &path, &[])), 0);
    assert_eq!(read(dir.path().join("run/eval.csv")), csv);
    let forgetting = read(dir.path().join("run/forgetting.csv"));
    let deltas = rows(&forgetting);
    assert!(!deltas.is_empty());
    assert!(deltas.iter().all(|r| r[4] == "0"), "{forgetting}");

    assert_eq!(code(&run("eval", &path, &["--score-span", "continuation"])), 0);
    assert!(rows(&read(dir.path().join("run/eval.csv"))).iter().all(|r| r[7] == "continuation"));
}

#[test]
fn transplanted_adapters_are_labeled_and_mismatches_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny_config(dir.path());
    let a_path = write_config(&dir.path().join("a.toml"), &a);
    assert_eq!(code(&run("adapt", &a_path, &[])), 0);

    let mut b = tiny_config(dir.path());
    b.out_dir = dir.path().join("run-b");
    b.model.seed = 1;
    let b_path = write_config(&dir.path().join("b.toml"), &b);
    assert_eq!(code(&run("adapt", &b_path, &[])), 0);

    let mut swap = a.clone();
    swap.out_dir = dir.path().join("swap");
    swap.eval.paired = false;
    swap.eval.models = vec![ModelRef {
        label: "b-with-a".into(),
        checkpoint: dir.path().join("run-b").join(CHECKPOINT_FILE).display().to_string(),
        adapters: Some(dir.path().join("run").join(ADAPTERS_FILE).display().to_string()),
    }];
    let swap_path = write_config(&dir.path().join("swap.toml"), &swap);
    let out = run("eval", &swap_path, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = read(dir.path().join("swap/eval.csv"));
    assert!(rows(&csv).iter().all(|r| r[0] == "b-with-a" && r[1] == "madx+transplant"), "{csv}");

    let mut wide = tiny_config(dir.path());
    wide.out_dir = dir.path().join("run-wide");
    wide.model = ModelSpec::new(2, 32, 2, 300, 128, 0);
    let wide_path = write_config(&dir.path().join("wide.toml"), &wide);
    assert_eq!(code(&run("adapt", &wide_path, &[])), 0);
    swap.eval.models[0].adapters = Some(dir.path().join("run-wide").join(ADAPTERS_FILE).display().to_string());
    let bad_path = write_config(&dir.path().join("bad.toml"), &swap);
    let out = run("eval", &bad_path, &[]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn probe_emits_two_rows_per_layer_and_identical_text_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    let path = write_config(&dir.path().join("c.toml"), &cfg);
    assert_eq!(code(&run("probe", &path, &[])), 2, "probe needs an adapted checkpoint");
    assert_eq!(code(&run("adapt", &path, &[])), 0);
    let out = run("probe", &path, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = rows(&read(dir.path().join("run/retrieval.csv")));
    assert_eq!(table.len(), 2 * (cfg.model.layers + 1));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs: String = (0..25)
        .map(|_| {
            let s: Vec<String> = (0..6)
                .map(|_| (0..rng.random_range(2..7)).map(|_| char::from(b'a' + rng.random_range(0..26u8))).collect())
                .collect();
            format!("{0}\t{0}\n", s.join(" "))
        })
        .collect();
    std::fs::write(dir.path().join("same.tsv"), pairs).unwrap();
    cfg.eval.retrieval_pairs = Some(dir.path().join("same.tsv"));
    cfg.eval.models = vec![ModelRef {
        label: "base".into(),
        checkpoint: "@base".into(),
        adapters: None,
    }];
    let path = write_config(&dir.path().join("same.toml"), &cfg);
    assert_eq!(code(&run("probe", &path, &[])), 0);
    let table = rows(&read(dir.path().join("run/retrieval.csv")));
    assert!(table.iter().all(|r| r[2] == "1"), "{table:?}");
}

#[test]
fn reduction_sweep_params_grow_and_report_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.eval.tasks.clear();
    cfg.sweep = Some(SweepSpec {
        axis: Axis::ReductionFactor,
        values: [8, 4, 2].into_iter().map(toml::Value::Integer).collect(),
    });
    let path = write_config(&dir.path().join("c.toml"), &cfg);
    let out = run("sweep", &path, &["--workers", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let sweep = read(dir.path().join("run/sweep.csv"));
    let params: Vec<usize> = rows(&sweep).iter().map(|r| r[4].parse().unwrap()).collect();
    assert_eq!(params.len(), 3);
    assert!(params.windows(2).all(|w| w[0] < w[1]), "{params:?}");

    let out = run("report", &path, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read(dir.path().join("run/report/sweep.csv")), sweep);
    let report: serde_json::Value = serde_json::from_str(&read(dir.path().join("run/report/report.json"))).unwrap();
    assert_eq!(report["schema"], "adaptkit-report/1");
    assert_eq!(report["runs"].as_array().unwrap().len(), 4);
}

#[test]
fn placement_sweep_has_one_row_per_block() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.eval.tasks.clear();
    cfg.train.steps = 10;
    cfg.train.eval_every = 10;
    cfg.sweep = Some(SweepSpec {
        axis: Axis::Placement,
        values: (0..cfg.model.layers as i64).map(toml::Value::Integer).collect(),
    });
    let path = write_config(&dir.path().join("c.toml"), &cfg);
    let out = run("sweep", &path, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = rows(&read(dir.path().join("run/sweep.csv")));
    assert_eq!(table.len(), cfg.model.layers);
    for (block, row) in table.iter().enumerate() {
        let spec = single_layer_scaled(&cfg.strategy, &cfg.model, block).unwrap();
        assert_eq!(row[4], trainable_params(&cfg.model, &spec).to_string());
    }
}

#[test]
fn failed_sweep_runs_are_recorded_and_the_rest_continue() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.eval.tasks.clear();
    cfg.train.steps = 10;
    cfg.train.eval_every = 10;
    cfg.sweep = Some(SweepSpec {
        axis: Axis::DataSize,
        values: vec![toml::Value::Integer(10_000), toml::Value::Float(0.5)],
    });
    let path = write_config(&dir.path().join("c.toml"), &cfg);
    let out = run("sweep", &path, &[]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    let table = rows(&read(dir.path().join("run/sweep.csv")));
    assert_eq!(table[0][3], "failed");
    assert_eq!(table[1][3], "ok");
}

#[test]
fn report_on_an_empty_directory_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(&dir.path().join("c.toml"), &tiny_config(dir.path()));
    std::fs::create_dir_all(dir.path().join("run")).unwrap();
    let out = run("report", &path, &[]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn resource_table_orders_ia3_madx_continued() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid");
    for variant in [Variant::Continued, Variant::Madx, Variant::Ia3] {
        let mut cfg = tiny_config(dir.path());
        cfg.eval.tasks.clear();
        cfg.model = ModelSpec::toy();
        cfg.model.vocab = 300;
        cfg.strategy = StrategySpec::new(variant);
        cfg.train.steps = 4;
        cfg.train.eval_every = 4;
        cfg.out_dir = grid.join(variant.name());
        let path = write_config(&dir.path().join(format!("{variant}.toml")), &cfg);
        let out = run("adapt", &path, &[]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let mut cfg = tiny_config(dir.path());
    cfg.out_dir = grid.clone();
    let path = write_config(&dir.path().join("report.toml"), &cfg);
    assert_eq!(code(&run("report", &path, &[])), 0);
    let table = rows(&read(grid.join("report/resources.csv")));
    let order: Vec<&str> = table.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(order, ["ia3", "madx", "continued"]);
}

#[test]
fn environment_overrides_the_output_directory_and_workers_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.eval.tasks.clear();
    let path = write_config(&dir.path().join("c.toml"), &cfg);
    let env_out = dir.path().join("from-env");
    let out = Command::new(common::bin())
        .args(["adapt", "--config"])
        .arg(&path)
        .env("ADAPTKIT_OUT", &env_out)
        .env("ADAPTKIT_WORKERS", "3")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(env_out.join(CHECKPOINT_FILE).is_file());
    assert!(!dir.path().join("run").exists());

    let flag_out = dir.path().join("from-flag");
    let out = Command::new(common::bin())
        .args(["adapt", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&flag_out)
        .env("ADAPTKIT_OUT", &env_out)
        .env("ADAPTKIT_SEED", "9")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m: Manifest = serde_json::from_str(&read(flag_out.join("manifest-adapt.json"))).unwrap();
    assert_eq!(m.seed, cfg.train.seed);
}
