use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use testchain::dataset::load_dataset;
use testchain::run::{self, EvaluateOptions, ProviderKind, ProviderSource, RunConfig};
use testchain::Strategy;

#[derive(Parser)]
#[command(name = "testchain", version, about = "Generate unit tests with LLM agents and score them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Strip examples from dataset prompts and write a new JSONL file.
    Prepare {
        input: PathBuf,
        output: PathBuf,
        /// Re-serialize without removing examples.
        #[arg(long)]
        no_strip: bool,
    },
    /// Generate test cases into a run directory.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<Strategy>,
        /// `http` (default) or `scripted`.
        #[arg(long, value_parser = parse_provider)]
        provider: Option<ProviderKind>,
        /// Reply fixtures for the scripted provider; implies `--provider scripted`.
        #[arg(long)]
        scripts: Option<PathBuf>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        max_rounds: Option<usize>,
        /// Regenerate every question and accept a mismatched run directory.
        #[arg(long)]
        force: bool,
    },
    /// Score the case sets of a run directory.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of accuracy,coverage,cwb.
        #[arg(long)]
        metrics: Option<String>,
        /// JSONL of `{question_id, program}` faulty programs instead of mutants.
        #[arg(long)]
        faulty_file: Option<PathBuf>,
        #[arg(long)]
        faulty_count: Option<usize>,
    },
    /// Compare evaluated run directories over one dataset.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Python interpreter used for every sandbox.
    #[arg(long)]
    interpreter_path: Option<PathBuf>,
}

fn parse_provider(s: &str) -> Result<ProviderKind, String> {
    match s {
        "http" => Ok(ProviderKind::Http),
        "scripted" => Ok(ProviderKind::Scripted),
        other => Err(format!("unknown provider {other:?} (expected http or scripted)")),
    }
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.dataset {
            config.dataset = Some(v.clone());
        }
        if let Some(v) = &self.run_dir {
            config.run_dir = Some(v.clone());
        }
        if let Some(v) = self.jobs {
            config.jobs = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = &self.interpreter_path {
            config.interpreter = v.clone();
        }
        Ok(config)
    }
}

fn required(config: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let Some(dataset) = config.dataset.clone() else { bail!("no dataset given (use --dataset or the config file)") };
    let Some(run_dir) = config.run_dir.clone() else { bail!("no run directory given (use --run-dir or the config file)") };
    Ok((dataset, run_dir))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "testchain=info".into()),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    match run_cli(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {}", render_error(&err));
            ExitCode::FAILURE
        }
    }
}

/// Joins the cause chain, skipping causes already spelled out by the layer above.
fn render_error(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut previous = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !previous.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        previous = text;
    }
    out
}

fn run_cli(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Prepare { input, output, no_strip } => {
            let summary = run::prepare(&input, &output, !no_strip)
                .with_context(|| format!("preparing {}", input.display()))?;
            let changed = summary.iter().filter(|l| l.lines_before != l.lines_after).count();
            for line in &summary {
                println!("{}\t{} -> {} prompt lines", line.task_id, line.lines_before, line.lines_after);
            }
            println!("{} questions written to {}, {changed} changed", summary.len(), output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Generate { common, strategy, provider, scripts, model, endpoint, prompts, cap, max_rounds, force } => {
            let mut config = common.load()?;
            if let Some(v) = strategy {
                config.strategy = v;
            }
            if let Some(v) = scripts {
                config.provider.scripts = Some(v);
                config.provider.kind = ProviderKind::Scripted;
            }
            if let Some(v) = provider {
                config.provider.kind = v;
            }
            if let Some(v) = model {
                config.provider.model = v;
            }
            if let Some(v) = endpoint {
                config.provider.endpoint = v;
            }
            if let Some(v) = prompts {
                config.prompts = Some(v);
            }
            if let Some(v) = cap {
                config.cap = v;
            }
            if let Some(v) = max_rounds {
                config.max_rounds = v;
            }
            let (dataset_path, run_dir) = required(&config)?;
            let dataset = load_dataset(&dataset_path)?;
            let source = ProviderSource::from_config(&config.provider)?;
            let summary = run::generate(&config, &run_dir, &dataset, &source, force)?;
            println!(
                "{}: {} generated, {} already complete, {} failed",
                run_dir.display(),
                summary.generated,
                summary.skipped,
                summary.failed.len()
            );
            if summary.failed.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for id in &summary.failed {
                    eprintln!("failed: {id}");
                }
                Ok(ExitCode::from(2))
            }
        }
        Command::Evaluate { common, metrics, faulty_file, faulty_count } => {
            let mut config = common.load()?;
            if let Some(v) = metrics {
                config.metrics = v;
            }
            if let Some(v) = faulty_file {
                config.faulty_file = Some(v);
            }
            if let Some(v) = faulty_count {
                config.faulty_count = v;
            }
            let (dataset_path, run_dir) = required(&config)?;
            let dataset = load_dataset(&dataset_path)?;
            let options = EvaluateOptions::from_config(&config)?;
            let report = run::evaluate(&run_dir, &dataset, &options)?;
            print!("{}", report.render_table());
            if report.missing.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(2))
            }
        }
        Command::Report { run_dirs } => {
            print!("{}", run::compare(&run_dirs)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
