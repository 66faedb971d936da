use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robust_student_cli::config::{ExperimentConfig, Protocol};
use robust_student_cli::emit::Format;
use robust_student_cli::presets;
use robust_student_cli::protocols::{default_out, evaluate_checkpoint, run, RunOptions};
use robust_student_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "robust-student", version, about = "Teacher-student distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher and students and report clean test accuracy.
    Train(Common),
    /// Evaluate a stored checkpoint on the configured test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Accuracy under Gaussian noise over a list of SNRs.
    SweepNoise(Common),
    /// Accuracy under square occlusions of several sizes.
    SweepOcclusion(Common),
    /// Grid of training-noise and test-noise conditions.
    CrossNoise(Common),
    /// Train on a source dataset and test on a shifted target.
    DomainAdapt(Common),
    /// Distribution of certified radii for each student.
    BoundReport(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named desk-scale preset.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value = "csv")]
    format: Format,
    /// Checkpoint directory shared between runs.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Report training progress on stderr.
    #[arg(long, short)]
    verbose: bool,
}

impl Common {
    fn load(&self, default_preset: &str) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => presets::preset(name)?,
            (None, None) => presets::preset(default_preset)?,
        };
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn options(&self, cfg: &ExperimentConfig) -> RunOptions {
        RunOptions {
            out: default_out(cfg),
            format: self.format,
            checkpoints: self.checkpoints.clone(),
            verbose: self.verbose,
        }
    }
}

fn expect_protocol(cfg: &ExperimentConfig, verb: &str, wanted: &str) -> Result<()> {
    if cfg.protocol.name() != wanted {
        return Err(CliError::config(format!(
            "`{verb}` needs a {wanted} protocol, config has {}",
            cfg.protocol.name()
        )));
    }
    Ok(())
}

fn execute(command: Command) -> Result<PathBuf> {
    let sweep = |common: &Common, verb: &str, protocol: &str, preset: &str| -> Result<PathBuf> {
        let cfg = common.load(preset)?;
        expect_protocol(&cfg, verb, protocol)?;
        let opts = common.options(&cfg);
        run(&cfg, &opts)?;
        Ok(opts.out)
    };
    match command {
        Command::Train(common) => {
            let mut cfg = common.load("desk-train")?;
            cfg.protocol = Protocol::SingleTrain;
            let opts = common.options(&cfg);
            run(&cfg, &opts)?;
            Ok(opts.out)
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load("desk-train")?;
            let opts = common.options(&cfg);
            evaluate_checkpoint(&cfg, &checkpoint, &opts)?;
            Ok(opts.out)
        }
        Command::SweepNoise(c) => sweep(&c, "sweep-noise", "noise-sweep", "desk-noise"),
        Command::SweepOcclusion(c) => sweep(&c, "sweep-occlusion", "occlusion-sweep", "desk-occlusion"),
        Command::CrossNoise(c) => sweep(&c, "cross-noise", "cross-noise", "desk-cross-noise"),
        Command::DomainAdapt(c) => sweep(&c, "domain-adapt", "domain-adapt", "desk-domain-adapt"),
        Command::BoundReport(c) => sweep(&c, "bound-report", "bound-report", "desk-bound"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(out) => {
            println!("results written to {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
