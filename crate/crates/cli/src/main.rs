use std::path::PathBuf;
use std::process::ExitCode;

use adaptkit::commands::{cmd_adapt, cmd_eval, cmd_probe, cmd_report, cmd_sweep, Overrides};
use adaptkit::core::eval::ScoreSpan;
use adaptkit::{CliError, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adaptkit", version, about = "Language adaptation experiments on small decoder models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adapt the base model to the new language.
    Adapt(Common),
    /// Score prompted tasks; optionally emit forgetting deltas.
    Eval(Common),
    /// Sentence retrieval per layer before and after adaptation.
    Probe(Common),
    /// Run one adaptation per value of the configured axis.
    Sweep(Common),
    /// Merge manifests, run logs and tables under the output directory.
    Report(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long, env = "ADAPTKIT_OUT")]
    out: Option<PathBuf>,
    /// Training seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(ScoreSpanArg))]
    score_span: Option<ScoreSpanArg>,
    /// Parallel sweep runs.
    #[arg(long, env = "ADAPTKIT_WORKERS", default_value_t = 1)]
    workers: usize,
    /// Repeat every sweep value with this many consecutive seeds and report
    /// means.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ScoreSpanArg {
    Whole,
    Continuation,
}

impl From<ScoreSpanArg> for ScoreSpan {
    fn from(s: ScoreSpanArg) -> Self {
        match s {
            ScoreSpanArg::Whole => ScoreSpan::Whole,
            ScoreSpanArg::Continuation => ScoreSpan::Continuation,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (Command::Adapt(c) | Command::Eval(c) | Command::Probe(c) | Command::Sweep(c) | Command::Report(c)) = &cli.command;
    let mut cfg = ExperimentConfig::load(&c.config)?;
    Overrides {
        out: c.out.clone(),
        seed: c.seed,
        score_span: c.score_span.map(Into::into),
    }
    .apply(&mut cfg);
    match cli.command {
        Command::Adapt(_) => {
            let s = cmd_adapt(&cfg)?;
            println!(
                "{}: held-out perplexity {:.4} -> {:.4} (best step {}), {} trainable parameters",
                s.metrics.variant, s.metrics.heldout_ppl_before, s.metrics.heldout_ppl, s.metrics.best_step, s.metrics.trainable_params
            );
        }
        Command::Eval(_) => {
            for r in cmd_eval(&cfg)? {
                println!("{} {} {}: {:.4}", r.model, r.task, r.template, r.accuracy);
            }
        }
        Command::Probe(_) => {
            for r in cmd_probe(&cfg)? {
                println!("{} layer {}: {:.4}", r.condition, r.layer, r.accuracy);
            }
        }
        Command::Sweep(ref c) => {
            let runs = cmd_sweep(&cfg, c.workers, c.seeds)?;
            println!("{} runs written to {}", runs.len(), cfg.out().display());
        }
        Command::Report(_) => {
            cmd_report(&cfg)?;
            println!("report written to {}", cfg.out().join("report").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
