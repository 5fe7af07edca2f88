use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use forgetir_cli::commands::{self, Run, SweepAxes};
use forgetir_cli::{exit_code, Config};
use forgetir_core::DegradationKind;

/// Train a small all-in-one restoration model on synthetic haze, rain and
/// noise, then make it forget one of them.
///
/// Every command resolves its configuration from built-in defaults, an
/// optional TOML file and `--set` overrides, and writes its artifacts
/// (config.toml, checkpoints, metrics.json, table.txt, timings.json) to
/// <OUT>/<NAME>.
///
/// Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
/// 4 I/O or file-format error.
#[derive(Parser)]
#[command(name = "forgetir", version, verbatim_doc_comment)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file layered over the defaults
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set unlearn.w_adv=1.5` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root directory for run artifacts
    #[arg(long, global = true, default_value = "runs", value_name = "DIR")]
    out: PathBuf,
    /// Run name [default: derived from the command, e.g. `unlearn-haze`]
    #[arg(long, global = true)]
    name: Option<String>,
    /// Seed for corpus, model init, training and unlearning alike
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Import this saved corpus instead of regenerating it from the config
    #[arg(long, global = true, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Print the resolved configuration and exit
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Args)]
struct Source {
    /// Degradation kind to forget
    #[arg(long, value_name = "haze|rain|noise")]
    forget: DegradationKind,
    /// Pretrained checkpoint [default: <OUT>/pretrain/ckpt-before.bin]
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and save it as corpus.bin
    GenCorpus,
    /// Train the all-in-one model on every kind (the BEFORE model)
    Pretrain,
    /// Forget one kind, starting from the pretrained checkpoint
    Unlearn(Source),
    /// Train a fresh model on the retained kinds only
    Retrain {
        /// Degradation kind left out of training
        #[arg(long, value_name = "haze|rain|noise")]
        forget: DegradationKind,
    },
    /// Evaluate a checkpoint on the held-out split
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Stage label recorded in the report
        #[arg(long, default_value = "EVAL")]
        stage: String,
    },
    /// Unlearn with adversarial-only, instance-only and both terms
    Ablate(Source),
    /// Unlearn over a grid of w_adv:w_ins ratios, learning rates and batch sizes
    Sweep {
        #[command(flatten)]
        source: Source,
        /// Comma-separated w_adv:w_ins ratios (w_ins stays as configured)
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
        /// Comma-separated unlearning learning rates
        #[arg(long, value_delimiter = ',')]
        lrs: Vec<f64>,
        /// Comma-separated unlearning batch sizes
        #[arg(long, value_delimiter = ',')]
        batch_sizes: Vec<usize>,
    },
    /// Print and refresh the tables of finished runs
    Report {
        /// Dump degraded/restored/clean strips for this checkpoint
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    fn default_name(&self) -> String {
        match self {
            Command::GenCorpus => "corpus".into(),
            Command::Pretrain => "pretrain".into(),
            Command::Unlearn(s) => format!("unlearn-{}", s.forget),
            Command::Retrain { forget } => format!("retrain-{forget}"),
            Command::Eval { .. } => "eval".into(),
            Command::Ablate(s) => format!("ablate-{}", s.forget),
            Command::Sweep { source, .. } => format!("sweep-{}", source.forget),
            Command::Report { .. } => "report".into(),
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let c = cli.common;
    let mut cfg = Config::load(c.config.as_deref(), &c.overrides)?;
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    if c.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let explicit_name = c.name.clone();
    let name = c.name.unwrap_or_else(|| cli.command.default_name());
    let mut run = Run::new(&c.out, name, cfg);
    run.corpus = c.corpus;
    match cli.command {
        Command::GenCorpus => commands::gen_corpus(&run).map(drop),
        Command::Pretrain => commands::pretrain_cmd(&run).map(drop),
        Command::Unlearn(s) => commands::unlearn_cmd(&run, s.forget, s.checkpoint.as_deref()).map(drop),
        Command::Retrain { forget } => commands::retrain_cmd(&run, forget).map(drop),
        Command::Eval { checkpoint, stage } => commands::eval_cmd(&run, &checkpoint, &stage).map(drop),
        Command::Ablate(s) => commands::ablate_cmd(&run, s.forget, s.checkpoint.as_deref()).map(drop),
        Command::Sweep {
            source,
            ratios,
            lrs,
            batch_sizes,
        } => {
            let axes = SweepAxes {
                ratios,
                lrs,
                batch_sizes,
            };
            commands::sweep_cmd(&run, source.forget, source.checkpoint.as_deref(), &axes).map(drop)
        }
        Command::Report { checkpoint } => {
            let images = checkpoint.as_deref().map(|p| (p, &run));
            commands::report_cmd(&c.out, explicit_name.as_deref(), images)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
