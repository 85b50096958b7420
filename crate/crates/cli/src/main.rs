use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskmamba_cli::commands::{ablate, bench, generate, inspect, tools, train};
use maskmamba_cli::CliError;
use maskmamba_core::layers::LayerKind;
use maskmamba_core::Precision;

#[derive(Parser)]
#[command(name = "maskmamba", version, about = "Masked image modeling with Bi-Mamba-v2 / Transformer hybrids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config, or resume from a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps (a checkpoint is still written).
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Generate images from a checkpoint.
    Generate(GenerateCmd),
    /// Time single layers over a sweep of sequence lengths.
    Bench(BenchCmd),
    /// Train and compare a matched set of variants.
    Ablate {
        /// schemes, backbones, cond_pos, cfg_sweep or iter_sweep
        #[arg(long)]
        suite: String,
        #[arg(long)]
        config: PathBuf,
        /// Also write the report table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a checkpoint's config, parameter count and layer kinds.
    Inspect { checkpoint: PathBuf },
    /// Build a codebook file.
    Codebook {
        #[command(subcommand)]
        kind: CodebookCmd,
    },
    /// Write a synthetic codebook-tiled image folder with an index.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        images: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        grid: usize,
        #[arg(long, default_value_t = 4)]
        patch: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct GenerateCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    caption: Option<String>,
    #[arg(long, default_value_t = 1)]
    samples: usize,
    /// Guidance scale s.
    #[arg(long)]
    cfg: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Per-step decode trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Use the EMA weights.
    #[arg(long)]
    ema: bool,
    #[arg(long)]
    codebook: Option<PathBuf>,
}

#[derive(Args)]
struct BenchCmd {
    #[arg(long, value_delimiter = ',', default_value = "transformer,bimamba,bimamba_v2")]
    kinds: Vec<String>,
    /// Sequence lengths.
    #[arg(long = "L", value_delimiter = ',')]
    lens: Vec<usize>,
    /// Square image sides; L = (side / 16)^2.
    #[arg(long, value_delimiter = ',')]
    resolutions: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    batches: Vec<usize>,
    #[arg(long, default_value_t = 768)]
    width: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
    #[arg(long)]
    budget_mb: Option<usize>,
}

#[derive(Subcommand)]
enum CodebookCmd {
    /// Seeded random entries on the 8-bit grid.
    Random {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        patch: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// k-means over the patches of an indexed image folder.
    Kmeans {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        patch: usize,
        #[arg(long, default_value_t = 25)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    let log = &mut std::io::stdout();
    match cmd {
        Command::Train { config, out, resume, stop_after } => {
            train::run(&train::TrainArgs { config, out, resume, stop_after }, log)?;
        }
        Command::Generate(g) => {
            let args = generate::GenerateArgs {
                checkpoint: g.checkpoint,
                class: g.class,
                caption: g.caption,
                samples: g.samples,
                cfg: g.cfg,
                steps: g.steps,
                seed: g.seed,
                temperature: g.temperature,
                out: g.out,
                trace: g.trace,
                ema: g.ema,
                codebook: g.codebook,
            };
            generate::run(&args, log)?;
        }
        Command::Bench(b) => {
            let kinds = b
                .kinds
                .iter()
                .map(|k| k.parse::<LayerKind>().map_err(|e| CliError::Usage(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            let args = bench::BenchArgs {
                kinds,
                lens: b.lens,
                resolutions: b.resolutions,
                batches: b.batches,
                width: b.width,
                repeats: b.repeats,
                precision: b.precision,
                out: b.out,
                budget_mb: b.budget_mb,
            };
            bench::run(&args, log)?;
        }
        Command::Ablate { suite, config, out } => {
            ablate::run(&ablate::AblateArgs { suite: suite.parse()?, config, out }, log)?;
        }
        Command::Inspect { checkpoint } => inspect::run(&checkpoint, log)?,
        Command::Codebook { kind } => {
            let (cb, out) = match kind {
                CodebookCmd::Random { k, patch, channels, seed, out } => {
                    (tools::random_codebook(k, patch, channels, seed, &out)?, out)
                }
                CodebookCmd::Kmeans { index, k, patch, iters, seed, out } => {
                    (tools::kmeans_codebook(&index, k, patch, iters, seed, &out)?, out)
                }
            };
            println!("wrote {} entries of {}x{}x{} to {}", cb.k(), cb.r(), cb.r(), cb.channels(), out.display());
        }
        Command::Synth { out, images, classes, k, grid, patch, channels, seed } => {
            tools::synth(&tools::SynthArgs { out, images, classes, k, grid, patch, channels, seed }, log)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) | CliError::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
