use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use awmf_cli::commands::{self, EvalSplit, TrainStart};
use awmf_cli::config::{schema_help, RawConfig, RunConfig};
use awmf_cli::exit_code;
use awmf_core::Result;

#[derive(Parser)]
#[command(
    name = "awmf",
    version,
    about = "Multi-field-of-view segmentation with adaptive expert weighting"
)]
#[command(after_help = schema_help())]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides run.threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides run.out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Any configuration key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic slides, label maps and a manifest to <out>/data.
    GenData,
    /// Pre-train the three experts and write pretrained.awmf.
    Pretrain,
    /// Run the full schedule (or the alternating stage) and write checkpoints.
    Train {
        /// Overrides train.max_epochs.
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Continue from <out>/epoch_<N>.awmf.
        #[arg(long, value_name = "N", conflicts_with = "from_pretrained")]
        resume: Option<usize>,
        /// Skip pre-training and start from this checkpoint.
        #[arg(long, value_name = "CHECKPOINT")]
        from_pretrained: Option<PathBuf>,
    },
    /// Segment one slide and write a label map and a coloured mask.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        slide: PathBuf,
        /// Four-class checkpoint applied inside the tumor mask (cascade).
        #[arg(long)]
        subtype_checkpoint: Option<PathBuf>,
        /// expert1 | expert2 | expert3 | fixed | adaptive
        #[arg(long, default_value = "adaptive")]
        variant: String,
    },
    /// Score every variant a checkpoint supports on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to data.manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// train | val | test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Expert agreement subsets, optionally before and after training.
    Agreement {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint to compare against (e.g. pretrained.awmf).
        #[arg(long)]
        before: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn resolve(cli: &Cli, max_epochs: Option<usize>) -> Result<RunConfig> {
    let mut raw = match &cli.config {
        Some(p) => RawConfig::load(p)?,
        None => RawConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| awmf_core::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        raw.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        raw.set("run.seed", &s.to_string())?;
    }
    if let Some(t) = cli.threads {
        raw.set("run.threads", &t.to_string())?;
    }
    if let Some(o) = &cli.out {
        raw.set("run.out", &o.display().to_string())?;
    }
    if let Some(e) = max_epochs {
        raw.set("train.max_epochs", &e.to_string())?;
    }
    raw.resolve()
}

fn run(cli: &Cli) -> Result<()> {
    let max_epochs = match &cli.command {
        Command::Train { max_epochs, .. } => *max_epochs,
        _ => None,
    };
    let cfg = resolve(cli, max_epochs)?;
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg).map(|_| ()),
        Command::Pretrain => commands::pretrain(&cfg),
        Command::Train {
            resume,
            from_pretrained,
            ..
        } => {
            let start = match (resume, from_pretrained) {
                (Some(e), _) => TrainStart::Resume(*e),
                (None, Some(p)) => TrainStart::Pretrained(p.clone()),
                (None, None) => TrainStart::Fresh,
            };
            commands::train(&cfg, start)
        }
        Command::Segment {
            checkpoint,
            slide,
            subtype_checkpoint,
            variant,
        } => commands::segment(&cfg, checkpoint, slide, subtype_checkpoint.as_deref(), variant),
        Command::Eval {
            checkpoint,
            manifest,
            split,
        } => {
            let m = manifest.clone().unwrap_or_else(|| cfg.manifest.clone());
            commands::eval(&cfg, checkpoint, &m, EvalSplit::parse(split)?).map(|_| ())
        }
        Command::Agreement {
            checkpoint,
            before,
            manifest,
            split,
        } => {
            let m = manifest.clone().unwrap_or_else(|| cfg.manifest.clone());
            commands::agreement(&cfg, checkpoint, before.as_deref(), &m, EvalSplit::parse(split)?).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
