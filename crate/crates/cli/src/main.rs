use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avm_cli::commands::{self, Split};
use avm_cli::config::RunConfig;
use avm_cli::{CliError, Result};
use avm_core::synth::ShiftKind;
use avm_core::train::Strategy;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Adaptive visual model: pretrain a frozen encoder once, then adapt small
/// modulation units to new recording conditions.
#[derive(Debug, Parser)]
#[command(name = "avm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (JSON); omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic condition, plus optional shifted conditions.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a shifted condition under `<out>/shift-<kind>`.
        #[arg(long, value_enum)]
        shift: Vec<ShiftArg>,
    },
    /// Phase 1: train backbone and readout jointly.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory with train.avmd and val.avmd.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Phase 2: adapt a phase-1 checkpoint to a new condition.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<StrategyArg>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on one split and write a metrics CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print trainable-parameter counts for every strategy.
    Params {
        #[command(flatten)]
        common: Common,
        /// Take backbone and readout sizes from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write params.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt once per modulation weight and bottleneck dimension.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated modulation weights.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        /// Comma-separated bottleneck dimensions.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
    },
    /// Exit with code 5 unless two checkpoints share the same backbone.
    CheckFreeze {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapted: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ShiftArg {
    Stimulus,
    Subject,
    Environment,
}

impl From<ShiftArg> for ShiftKind {
    fn from(s: ShiftArg) -> Self {
        match s {
            ShiftArg::Stimulus => ShiftKind::Stimulus,
            ShiftArg::Subject => ShiftKind::Subject,
            ShiftArg::Environment => ShiftKind::Environment,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Avm,
    AvmS,
    AvmB,
    FullFt,
    Frozen,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Avm => Strategy::Avm,
            StrategyArg::AvmS => Strategy::AvmS,
            StrategyArg::AvmB => Strategy::AvmB,
            StrategyArg::FullFt => Strategy::FullFinetune,
            StrategyArg::Frozen => Strategy::Frozen,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn require(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Config(format!("--{name} is required (or set paths.{name} in the config)")))
}

fn print(lines: &[String]) {
    for l in lines {
        println!("{l}");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out, shift } => {
            let cfg = load_config(&common)?.resolve()?;
            let out = require(out, &cfg.paths.out, "out")?;
            let shifts: Vec<ShiftKind> = shift.into_iter().map(Into::into).collect();
            print(&commands::cmd_synth(&cfg, &out, &shifts)?.lines);
        }
        Command::Train { common, data, out } => {
            let cfg = load_config(&common)?.resolve()?;
            let data = require(data, &cfg.paths.data, "data")?;
            let out = require(out, &cfg.paths.out, "out")?;
            print(&commands::cmd_train(&cfg, &data, &out)?.lines);
        }
        Command::Adapt {
            common,
            checkpoint,
            variant,
            data,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variant {
                cfg.variant = v.into();
            }
            let cfg = cfg.resolve()?;
            let checkpoint = require(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let data = require(data, &cfg.paths.data, "data")?;
            let out = require(out, &cfg.paths.out, "out")?;
            print(&commands::cmd_adapt(&cfg, &checkpoint, &data, &out)?.lines);
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            out,
        } => {
            let cfg = load_config(&common)?.resolve()?;
            let checkpoint = require(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let data = require(data, &cfg.paths.data, "data")?;
            let out = require(out, &cfg.paths.out, "out")?;
            print(&commands::cmd_eval(&checkpoint, &data, split.into(), &out)?.lines);
        }
        Command::Params { common, checkpoint, out } => {
            let cfg = load_config(&common)?.resolve()?;
            let checkpoint = checkpoint.or_else(|| cfg.paths.checkpoint.clone());
            let out = out.or_else(|| cfg.paths.out.clone());
            print(&commands::cmd_params(&cfg, checkpoint.as_deref(), out.as_deref())?.lines);
        }
        Command::Ablate {
            common,
            checkpoint,
            data,
            out,
            weights,
            dims,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(w) = weights {
                cfg.ablation.weights = w;
            }
            if let Some(d) = dims {
                cfg.ablation.dims = d;
            }
            let cfg = cfg.resolve()?;
            let checkpoint = require(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let data = require(data, &cfg.paths.data, "data")?;
            let out = require(out, &cfg.paths.out, "out")?;
            let report = commands::cmd_ablate(&cfg, &checkpoint, &data, &out)?;
            print(&report.lines);
            if let Some((_, _, e)) = report.failures.into_iter().next() {
                return Err(e);
            }
        }
        Command::CheckFreeze { base, adapted } => {
            print(&commands::cmd_check_freeze(Path::new(&base), Path::new(&adapted))?);
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
