mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Text-conditioned linear HDR generation through exposure brackets.
#[derive(Debug, Parser)]
#[command(name = "bracketflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `key=value` overrides, shared by model-aware commands.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.batch=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write procedural scenes as PFM files plus a manifest.
    SynthData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Number of records; defaults to data.train.
        #[arg(long)]
        count: Option<usize>,
        /// Dataset seed; defaults to data.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain and fine-tune the model, writing a checkpoint and loss CSV.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Training seed; defaults to train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory written by `synth-data`; scenes are generated from the
        /// config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint; its config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps in this invocation.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Sample brackets for a prompt, fuse them and write a linear PFM.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Space- or comma-separated descriptors, e.g. "night lamp".
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Euler steps; defaults to sample.steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Tone-mapped 16-bit PPM preview.
        #[arg(long)]
        preview: Option<PathBuf>,
        /// Also write each generated bracket as a PPM into this directory.
        #[arg(long)]
        brackets_dir: Option<PathBuf>,
    },
    /// Merge bracket frames (PFM or PPM) into a linear PFM.
    Fuse {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Frames ordered darkest first.
        #[arg(required = true)]
        frames: Vec<PathBuf>,
        /// Comma-separated EVs, one per frame.
        #[arg(long, allow_hyphen_values = true)]
        ev: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        preview: Option<PathBuf>,
    },
    /// Split a linear PFM into clipped exposure brackets (16-bit PPM).
    Brackets {
        input: PathBuf,
        #[arg(long, allow_hyphen_values = true, default_value = "-4,-2,0,2")]
        ev: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Tone map a linear PFM to a display 16-bit PPM.
    Tonemap {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2.2)]
        gamma: f64,
        /// Exposure adjustment in stops applied before tone mapping.
        #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
        exposure: f64,
    },
    /// Sample held-out prompts and report metrics as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of held-out scenes; defaults to data.held_out.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the radiance scale of a PFM, optionally writing it normalized.
    Radscale {
        input: PathBuf,
        /// Exposure time in seconds; with ISO and f-number, the input is
        /// treated as a sensor signal and inverted to radiance first.
        #[arg(long)]
        exposure_time: Option<f64>,
        #[arg(long)]
        iso: Option<f64>,
        #[arg(long)]
        f_number: Option<f64>,
        #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
        ev_comp: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={first}");
            return ExitCode::from(2);
        }
    };
    let invocation = std::env::args().collect::<Vec<_>>().join(" ");
    match commands::run(cli.command, &invocation) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
