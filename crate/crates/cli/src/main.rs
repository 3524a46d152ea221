mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dglm_core::config::RunConfig;

#[derive(Parser)]
#[command(name = "dglm", version, about = "Diffusion-guided language modeling on a toy grammar")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct GlobalArgs {
    /// Config file of `key=value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (`key=value`); repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; takes precedence over the SEED environment variable.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Build a grammar from the config and sample a corpus from it.
    GenCorpus {
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        grammar_out: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the embedding denoiser.
    TrainDiffusion {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a logistic-regression attribute classifier on clean latents.
    TrainClassifier {
        #[command(flatten)]
        data: DataArgs,
        /// `sentiment` or `topic`.
        #[arg(long)]
        attribute: String,
        #[arg(long)]
        l2: Option<f64>,
        #[arg(long)]
        balanced: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the soft-prompt decoder.
    TrainDecoder {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue corpus prefixes through diffusion proposals and the decoder.
    Generate(commands::GenerateArgs),
    /// Score a generation file.
    Eval(commands::EvalArgs),
    /// Check the sampler against analytic mixtures.
    VerifyOracle(commands::VerifyArgs),
}

#[derive(Args)]
pub struct DataArgs {
    #[arg(long)]
    grammar: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

fn resolve_config(g: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &g.config {
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
    }
    if let Ok(seed) = std::env::var("SEED") {
        cfg.set("seed", &seed)?;
    }
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects key=value, got {kv:?}"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = g.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    let run = resolve_config(&cli.global).and_then(|cfg| commands::run(cli.command, cfg));
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
