mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gaintune::config::RunConfig;

fn config_help() -> String {
    format!(
        "Configuration files use `[section]` headers, `key = value` lines and `#` comments.\n\
         Every key with its default value:\n\n{}",
        RunConfig::default().to_text()
    )
}

/// Pre-train small convolutional denoisers and adapt them to single noisy
/// images by tuning per-channel gains.
///
/// Exit codes: 0 success, 1 runtime failure, 2 invalid input or arguments.
/// Noise levels are given on the 0-255 intensity scale.
#[derive(Parser, Debug)]
#[command(name = "gaintune", version, after_long_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate piecewise-constant images as PGM files (16-bit by default).
    #[command(after_long_help = config_help())]
    GenPc(GenPcArgs),
    /// Add Gaussian noise to every PGM in a directory.
    Corrupt(CorruptArgs),
    /// Supervised pre-training on a directory of clean PGM images.
    #[command(after_long_help = config_help())]
    Pretrain(PretrainArgs),
    /// Adapt a checkpoint to one noisy image.
    #[command(after_long_help = config_help())]
    Adapt(AdaptArgs),
    /// Denoise one image with a single forward pass.
    Denoise(DenoiseArgs),
    /// ΔPSNR report of estimates against a baseline, paired by file stem.
    Eval(EvalArgs),
    /// Equivalent filters and net bias.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Args, Debug)]
struct GenPcArgs {
    /// Number of images [default from config: 200].
    #[arg(long)]
    count: Option<usize>,
    /// Side length in pixels, at least 16 [default from config: 64].
    #[arg(long)]
    size: Option<usize>,
    /// Inclusive range of overpainted regions per image, `LO..HI`
    /// [default from config: 1..8].
    #[arg(long)]
    shapes: Option<String>,
    /// [default from config: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Run configuration; its [data] and [io] sections apply. Flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CorruptArgs {
    /// Directory of clean PGM images.
    #[arg(long = "in")]
    input: PathBuf,
    /// Noise level `V`, or `LO..HI` to draw one level per image uniformly.
    #[arg(long)]
    sigma255: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Run configuration; its [arch] and [pretrain] sections apply.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of clean PGM training images.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Noisy image, `.raw` (lossless) or `.pgm`.
    #[arg(long)]
    noisy: PathBuf,
    /// sure | blindspot | resample (default from config: sure).
    #[arg(long)]
    loss: Option<String>,
    /// gain | all (default gain). Without a config file, `all` runs 1000
    /// steps at a constant learning rate of 1e-5.
    #[arg(long)]
    mode: Option<String>,
    /// Noise level of the test image; required for sure and resample.
    #[arg(long)]
    sigma255: Option<f64>,
    /// Run configuration; its [adapt] section applies.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Clean reference; adds per-step PSNR to the log.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    noisy: PathBuf,
    /// 8-bit PGM output, clamped to [0, 1].
    #[arg(long)]
    out: PathBuf,
    /// Optional lossless raw output.
    #[arg(long)]
    out_raw: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Clean PGM references.
    #[arg(long)]
    clean: PathBuf,
    /// Estimates to score (`.raw` preferred over `.pgm` for a stem).
    #[arg(long)]
    estimates: PathBuf,
    /// Estimates giving `psnr_before`, e.g. the pre-trained network's.
    #[arg(long)]
    baseline: PathBuf,
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum AnalyzeCommand {
    /// Render the equivalent filter of one output pixel.
    Filter {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        noisy: PathBuf,
        /// Output pixel as `ROW,COL`.
        #[arg(long)]
        pixel: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the net bias norms as `bias_l2=... relative=...`.
    Bias {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        noisy: PathBuf,
        /// jvp | full
        #[arg(long, default_value = "jvp")]
        method: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::GenPc(a) => commands::gen_pc(
            &argv,
            &commands::GenRequest {
                count: a.count,
                size: a.size,
                shapes: a.shapes.as_deref(),
                seed: a.seed,
                config: a.config.as_deref(),
                out: &a.out,
            },
        ),
        Command::Corrupt(a) => commands::corrupt(&argv, &a.input, &a.sigma255, a.seed, &a.out),
        Command::Pretrain(a) => commands::pretrain(&argv, a.config.as_deref(), &a.data, &a.out),
        Command::Adapt(a) => commands::adapt(
            &argv,
            &commands::AdaptRequest {
                ckpt: &a.ckpt,
                noisy: &a.noisy,
                loss: a.loss.as_deref(),
                mode: a.mode.as_deref(),
                sigma255: a.sigma255,
                config: a.config.as_deref(),
                clean: a.clean.as_deref(),
                out: &a.out,
            },
        ),
        Command::Denoise(a) => commands::denoise(&argv, &a.ckpt, &a.noisy, &a.out, a.out_raw.as_deref()),
        Command::Eval(a) => commands::eval(&argv, &a.clean, &a.estimates, &a.baseline, &a.out),
        Command::Analyze(AnalyzeCommand::Filter {
            ckpt,
            noisy,
            pixel,
            out,
        }) => commands::analyze_filter(&argv, &ckpt, &noisy, &pixel, &out),
        Command::Analyze(AnalyzeCommand::Bias { ckpt, noisy, method }) => {
            commands::analyze_bias(&ckpt, &noisy, &method)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("gaintune: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
