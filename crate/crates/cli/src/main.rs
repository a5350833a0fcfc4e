use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use mom_core::harness::{run, ExperimentConfig, ExperimentReport};

/// Median-of-means minimax regression experiments.
#[derive(Debug, Parser)]
#[command(name = "mom", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the median-of-means estimator and the OLS baseline to one dataset.
    Fit(Common),
    /// Monte Carlo trials on generated data.
    Simulate(Common),
    /// Framed-condition checks, the lemma implication sweep and the Δ estimate.
    Verify(VerifyArgs),
    /// Paired clean/corrupted trials comparing the estimators.
    CorruptBench(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config. Flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV dataset (`x1,...,xd,y`); replaces the config's data source.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of blocks; an even value is decremented with a warning.
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write flat per-trial rows as CSV.
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Negative control: flip the sign of the regularizer in every lemma conclusion.
    #[arg(long, hide = true)]
    flip_regularizer_sign: bool,
}

impl Command {
    fn mode(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Simulate(_) => "simulate",
            Command::Verify(_) => "verify",
            Command::CorruptBench(_) => "corrupt-bench",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Fit(c) | Command::Simulate(c) | Command::CorruptBench(c) => c,
            Command::Verify(v) => &v.common,
        }
    }
}

fn build_config(command: &Command) -> anyhow::Result<ExperimentConfig> {
    let common = command.common();
    let mut doc = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<Value>(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => Value::Object(Map::new()),
    };
    let Some(fields) = doc.as_object_mut() else {
        bail!("config must be a JSON object");
    };
    fields.insert("mode".into(), json!(command.mode()));
    if let Some(path) = &common.data {
        fields.insert("data".into(), json!({ "source": "csv", "path": path }));
    }
    let overrides = [
        ("seed", common.seed.map(|v| json!(v))),
        ("blocks", common.blocks.map(|v| json!(v))),
        ("trials", common.trials.map(|v| json!(v))),
        ("workers", common.workers.map(|v| json!(v))),
        ("out", common.out.as_ref().map(|v| json!(v))),
        ("csv_out", common.csv_out.as_ref().map(|v| json!(v))),
    ];
    for (key, value) in overrides {
        if let Some(value) = value {
            fields.insert(key.into(), value);
        }
    }
    if let Command::Verify(v) = command {
        if v.flip_regularizer_sign {
            let verify = fields.entry("verify").or_insert_with(|| json!({}));
            let Some(verify) = verify.as_object_mut() else {
                bail!("`verify` must be a JSON object");
            };
            verify.insert("flip_regularizer_sign".into(), json!(true));
        }
    }
    serde_json::from_value(doc).context("invalid experiment config")
}

fn emit(report: &ExperimentReport) -> anyhow::Result<()> {
    if report.config.out.is_some() || report.config.csv_out.is_some() {
        report.write_outputs()?;
    }
    if report.config.out.is_none() {
        println!("{}", report.to_json()?);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = build_config(&cli.command).and_then(|config| Ok(run(config)?));
    let report = match result {
        Ok(report) => report,
        Err(err) => {
            eprintln!("error: {err:#}");
            return ExitCode::FAILURE;
        }
    };
    if let Err(err) = emit(&report) {
        eprintln!("error: {err:#}");
        return ExitCode::FAILURE;
    }
    if report.lemma_violated() {
        let count = report
            .verification
            .as_ref()
            .map_or(0, |v| v.lemma.violation_count);
        eprintln!("lemma implication violated in {count} checks");
        return ExitCode::from(2);
    }
    ExitCode::SUCCESS
}
