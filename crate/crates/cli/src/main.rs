mod commands;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "flowar", version, about = "Autoregressive flow image model: train, sample, distill, evaluate")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Run in 64-bit floating point.
    #[arg(long = "f64")]
    pub f64: bool,
    /// Override a config key, e.g. `--set total_steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SamplingFlags {
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long = "s_c")]
    pub s_c: Option<usize>,
    #[arg(long = "s_u")]
    pub s_u: Option<usize>,
    #[arg(long = "t_pi")]
    pub t_pi: Option<f64>,
    #[arg(long = "t_sigma")]
    pub t_sigma: Option<f64>,
    #[arg(long = "t_pi_v")]
    pub t_pi_v: Option<f64>,
    #[arg(long = "t_sigma_v")]
    pub t_sigma_v: Option<f64>,
    #[arg(long = "t_s")]
    pub t_s: Option<f64>,
    #[arg(long = "redundant-mult")]
    pub redundant_mult: Option<usize>,
    /// Multiplies the redundant mixture's scales at sampling time.
    #[arg(long = "redundant-scale")]
    pub redundant_scale: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train flow and autoregressive model jointly.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate class-conditional images.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[command(flatten)]
        sampling: SamplingFlags,
        /// Invert with the distilled student instead of the teacher.
        #[arg(long)]
        student: bool,
    },
    /// Distill the flow inverse into a one-pass student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Held-out bits per dimension next to the Gaussian baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image directory with a labels file; defaults to the held-out split.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Time latent sampling, teacher inversion and student inversion.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence lengths to time, comma separated.
        #[arg(long = "n", value_delimiter = ',', default_value = "16,64")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
    },
    /// Reconstruction error of the flow inverse (and the student).
    Roundtrip {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train { common, resume } => commands::train(&common, resume.as_deref()),
        Cmd::Sample {
            common,
            checkpoint,
            class,
            count,
            sampling,
            student,
        } => commands::sample(&common, &checkpoint, class, count, &sampling, student),
        Cmd::Distill {
            common,
            checkpoint,
            steps,
        } => commands::distill(&common, &checkpoint, steps),
        Cmd::Eval {
            common,
            checkpoint,
            data_dir,
            batch,
        } => commands::eval(&common, &checkpoint, data_dir.as_deref(), batch),
        Cmd::Bench {
            common,
            checkpoint,
            n,
            reps,
        } => commands::bench(&common, &checkpoint, &n, reps),
        Cmd::Roundtrip {
            common,
            checkpoint,
            data_dir,
            limit,
        } => commands::roundtrip(&common, &checkpoint, data_dir.as_deref(), limit),
    }
}
