//! `aroid` command-line interface.

mod commands;
mod lock;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aroid::config::ExperimentConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug, Parser)]
#[command(name = "aroid", version, about = "Learned per-image augmentation for adversarial training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the affinity model on unaugmented data.
    PretrainAffinity(PretrainArgs),
    /// Adversarially train a target model, learning the policy online.
    Train(TrainArgs),
    /// Adversarially train a target model replaying a recorded policy log.
    TrainTransfer(TransferArgs),
    /// Clean and PGD accuracy of a saved model on the test split.
    Eval(EvalArgs),
    /// Export per-image policy distributions from a policy log.
    VisualizePolicy(VisualizeArgs),
}

/// Config selection and the overrides shared by every command.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(short, long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset: cifar10, svhn, imagenette or desk.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Override any config key, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Perturbation budget for training, hardness and evaluation attacks.
    #[arg(long)]
    eps: Option<f32>,
    /// PGD iterations for the training and evaluation attacks.
    #[arg(long)]
    pgd_steps: Option<usize>,
    /// PGD step size for the training and evaluation attacks.
    #[arg(long)]
    pgd_step_size: Option<f32>,
    /// Validate the config and print the resolved schedules without running.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory.
    #[arg(short, long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(short, long, value_name = "DIR")]
    out: PathBuf,
    /// Pretrained affinity checkpoint; trained on the fly when omitted.
    #[arg(long, value_name = "PATH")]
    affinity: Option<PathBuf>,
    /// Continue from the state saved in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct TransferArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(short, long, value_name = "DIR")]
    out: PathBuf,
    /// Policy log written by `train`.
    #[arg(long, value_name = "PATH")]
    policy_log: PathBuf,
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Target or affinity checkpoint; the seeded initial target when omitted.
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Also write `eval.json` here.
    #[arg(short, long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VisualizeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_name = "PATH")]
    policy_log: PathBuf,
    #[arg(short, long, value_name = "DIR")]
    out: PathBuf,
    /// Comma-separated logged epochs to export; all of them when omitted.
    #[arg(long = "log-epochs", value_name = "LIST", value_delimiter = ',')]
    log_epochs: Vec<usize>,
    /// Number of test images to plot.
    #[arg(long, default_value_t = 8)]
    images: usize,
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<aroid::Error> for CliError {
    fn from(e: aroid::Error) -> Self {
        match e {
            aroid::Error::Config(_) | aroid::Error::Catalog(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path).map_err(|e| match e {
                aroid::Error::Io { .. } => CliError::Usage(e.to_string()),
                other => other.into(),
            })?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => return Err(CliError::Usage("pass --config <PATH> or --preset <NAME>".into())),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(eps) = self.eps {
            cfg.train.at_attack.epsilon = eps;
            cfg.train.vul_attack.epsilon = eps;
            cfg.eval.attack.epsilon = eps;
        }
        if let Some(steps) = self.pgd_steps {
            cfg.train.at_attack.steps = steps;
            cfg.eval.attack.steps = steps;
        }
        if let Some(step) = self.pgd_step_size {
            cfg.train.at_attack.step_size = step;
            cfg.eval.attack.step_size = step;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::PretrainAffinity(a) => commands::pretrain_affinity(&a.cfg, &a.out),
        Command::Train(a) => commands::train(&a.cfg, &a.out, a.affinity.as_deref(), a.resume),
        Command::TrainTransfer(a) => commands::train_transfer(&a.cfg, &a.out, &a.policy_log, a.resume),
        Command::Eval(a) => commands::eval(&a.cfg, a.model.as_deref(), a.out.as_deref()),
        Command::VisualizePolicy(a) => commands::visualize(&a.cfg, &a.policy_log, &a.out, &a.log_epochs, a.images),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
