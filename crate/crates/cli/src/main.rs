use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wordorder_cli::commands::{self, Context};
use wordorder_cli::config::ExperimentConfig;
use wordorder_cli::CliError;

/// Word-order experiments with seq2seq speaker/listener agents.
///
/// Settings are resolved from defaults, then `--config`, then `--set`, then
/// the subcommand's own flags. Outputs go under `--out`.
#[derive(Parser)]
#[command(name = "wordorder", version)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; relative input paths are resolved against it.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Worker threads for independent runs.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Override one config key (repeatable), e.g. `--set lr=0.01`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Language family, optionally with a `-markers` suffix.
    #[arg(long, global = true)]
    language: Option<String>,

    /// Add phrase markers to the language.
    #[arg(long, global = true)]
    markers: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and split the corpus of the configured language.
    GenCorpus,
    /// Grid-search individual agents, then re-train the best point per seed.
    Train,
    /// Run iterated-learning lineages.
    Iterate {
        #[arg(long)]
        parents: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        generations: Option<usize>,
    },
    /// Score a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Render SVG charts and CSV tables from run directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set {kv:?}: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(l) = &cli.language {
        cfg.set("language", l)?;
    }
    if cli.markers {
        cfg.markers = true;
    }
    if let Command::Iterate {
        parents,
        seeds,
        generations,
    } = &cli.command
    {
        if let Some(p) = parents {
            cfg.parents = *p;
        }
        if let Some(s) = seeds {
            cfg.lineage_seeds = *s;
        }
        if let Some(g) = generations {
            cfg.lineage.generations = *g;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let ctx = Context { cfg, out: cli.out, jobs };
    match &cli.command {
        Command::GenCorpus => commands::gen_corpus(&ctx).map(drop),
        Command::Train => commands::train(&ctx),
        Command::Iterate { .. } => commands::iterate(&ctx),
        Command::Eval { checkpoint, split } => {
            let split = commands::parse_split(split)?;
            commands::eval(&ctx, checkpoint, split).map(drop)
        }
        Command::Report { runs } => commands::report(&ctx, runs).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
