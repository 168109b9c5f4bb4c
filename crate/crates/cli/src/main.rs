//! `hazeforge`: synthesize data, train, evaluate, dehaze and gradient-check.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "hazeforge", version, about = "Single-image dehazing with a detail-recovery network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArg {
    /// `key = value` config file; unset keys keep their defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write hazy, clean, depth and transmission images of a synthetic split.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory; defaults to `<out_dir>/samples`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = commands::Split::Train)]
        split: commands::Split,
    },
    /// Train and write `trace.csv` plus a checkpoint after every epoch.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Continue from this checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are complete; the schedule still spans all epochs.
        #[arg(long, value_name = "EPOCHS")]
        stop_at: Option<usize>,
    },
    /// Print per-image and mean PSNR/SSIM as CSV.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = commands::Split::Eval)]
        split: commands::Split,
    },
    /// Dehaze one PPM image.
    Dehaze {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
        /// Detail map, min-max normalized per image.
        #[arg(long, value_name = "PATH")]
        emit_detail: Option<PathBuf>,
        /// Transmission map as a gray image.
        #[arg(long, value_name = "PATH")]
        emit_t: Option<PathBuf>,
        /// Atmospheric light map.
        #[arg(long = "emit-A", alias = "emit-a", value_name = "PATH")]
        emit_a: Option<PathBuf>,
        /// Coarse scattering-model inversion, before refinement.
        #[arg(long, value_name = "PATH")]
        emit_coarse: Option<PathBuf>,
    },
    /// Run the 64-bit finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value = "all", value_name = "all|drn|transnet|atmosnet|losses")]
        module: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth { config, out, split } => commands::synth(&config, out, split),
        Command::Train { config, resume, stop_at } => commands::train(&config, resume, stop_at),
        Command::Eval { config, checkpoint, split } => commands::eval(&config, &checkpoint, split),
        Command::Dehaze { config, checkpoint, input, output, emit_detail, emit_t, emit_a, emit_coarse } => {
            let emit = commands::Emit { detail: emit_detail, t: emit_t, airlight: emit_a, coarse: emit_coarse };
            commands::dehaze(&config, &checkpoint, &input, &output, &emit)
        }
        Command::Gradcheck { module } => commands::gradcheck(&module),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("hazeforge: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::GradCheck(m) => write!(f, "{m}"),
        }
    }
}
