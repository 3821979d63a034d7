//! `semcert` command-line interface.
//!
//! Exit status: 0 success, 1 internal error, 2 budget or threshold
//! violation, 3 invalid configuration or input.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use semcert::pipeline::{self, parse_overrides, CommandOutcome, PipelineConfig};
use semcert::Error;

#[derive(Parser)]
#[command(name = "semcert", version, about = "Retrieval certainty scoring for product-quantized embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a product-quantization codebook on the corpus.
    TrainPq(Common),
    /// Score every query; writes scores.jsonl.
    Score(Common),
    /// Retrieve the top-K per query; writes run.trec.
    Search {
        /// Use asymmetric distance computation against PQ codes.
        #[arg(long)]
        adc: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic gravity-well corpus with queries and qrels.
    Simulate(Common),
    /// Evaluate recall and certainty against qrels; writes report.json/txt.
    Eval(Common),
    /// Run queries as a monitored stream; writes events.jsonl and summary.json.
    Monitor {
        /// Exit with status 2 when the alert rate exceeds this value.
        #[arg(long)]
        max_alert_rate: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice (overrides the config's `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `paths.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(long)]
    quiet: bool,
}

impl Common {
    fn load(&self, dotted: &[String]) -> semcert::Result<PipelineConfig> {
        let mut overrides = parse_overrides(dotted)?;
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        if let Some(out) = &self.out {
            overrides.push(("paths.out_dir".into(), serde_json::to_string(out).expect("path is valid UTF-8")));
        }
        PipelineConfig::load(self.config.as_deref(), &overrides)
    }
}

fn run(cli: Cli, dotted: &[String]) -> anyhow::Result<CommandOutcome> {
    let (name, result) = match cli.command {
        Command::TrainPq(c) => ("train-pq", c.load(dotted).and_then(|cfg| pipeline::cmd_train_pq(&cfg))),
        Command::Score(c) => ("score", c.load(dotted).and_then(|cfg| pipeline::cmd_score(&cfg))),
        Command::Search { adc, common } => (
            "search",
            common.load(dotted).and_then(|mut cfg| {
                if adc {
                    cfg.search.mode = pipeline::SearchMode::Adc;
                }
                pipeline::cmd_search(&cfg)
            }),
        ),
        Command::Simulate(c) => ("simulate", c.load(dotted).and_then(|cfg| pipeline::cmd_simulate(&cfg))),
        Command::Eval(c) => ("eval", c.load(dotted).and_then(|cfg| pipeline::cmd_eval(&cfg))),
        Command::Monitor { max_alert_rate, common } => (
            "monitor",
            common.load(dotted).and_then(|mut cfg| {
                if max_alert_rate.is_some() {
                    cfg.monitor.max_alert_rate = max_alert_rate;
                }
                pipeline::cmd_monitor(&cfg)
            }),
        ),
    };
    result.with_context(|| format!("{name} failed"))
}

fn quiet(command: &Command) -> bool {
    match command {
        Command::TrainPq(c) | Command::Score(c) | Command::Simulate(c) | Command::Eval(c) => c.quiet,
        Command::Search { common, .. } | Command::Monitor { common, .. } => common.quiet,
    }
}

/// Separates dotted config overrides (`--section.field value` or
/// `--section.field=value`) from the flags clap understands.
fn split_dotted(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<String>) {
    let (mut plain, mut dotted) = (Vec::new(), Vec::new());
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let key = arg.strip_prefix("--").map(|k| k.split_once('=').map_or(k, |(k, _)| k));
        match key {
            Some(k) if k.contains('.') => {
                let has_value = arg.contains('=');
                dotted.push(arg);
                if !has_value {
                    dotted.extend(it.next());
                }
            }
            _ => plain.push(arg),
        }
    }
    (plain, dotted)
}

fn main() -> ExitCode {
    let (plain, dotted) = split_dotted(std::env::args());
    let cli = match Cli::try_parse_from(plain) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    let level = if quiet(&cli.command) { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli, &dotted) {
        Ok(outcome) => {
            for f in &outcome.manifest.outputs {
                log::info!("wrote {} ({} bytes)", f.path, f.bytes);
            }
            if outcome.budget_exceeded {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
