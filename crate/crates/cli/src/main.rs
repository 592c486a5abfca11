use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gridsight::commands::{self, DatasetOverrides, Method, Preset, TrainOverrides};
use gridsight_core::par::{init_threads, Execution};

/// Top-view semantic grid mapping from a front-view camera.
#[derive(Parser, Debug)]
#[command(name = "gridsight", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic dataset generation.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Weak ground truth from disparity and front-view labels.
    #[command(subcommand)]
    Gt(GtCmd),
    /// Flat-plane baseline.
    #[command(subcommand)]
    Flatplane(FlatplaneCmd),
    /// Variational encoder-decoder.
    #[command(subcommand)]
    Ved(VedCmd),
    /// Metrics and perturbation sweeps.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Principal axes of the latent space.
    #[command(subcommand)]
    Pca(PcaCmd),
    /// Map rendering.
    #[command(subcommand)]
    Render(RenderCmd),
    /// Inference throughput.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Subcommand, Debug)]
enum SynthCmd {
    /// Render scenes and write a manifest.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset config JSON; the flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        render_width: Option<usize>,
        #[arg(long)]
        render_height: Option<usize>,
        #[arg(long)]
        input_width: Option<usize>,
        #[arg(long)]
        input_height: Option<usize>,
        #[arg(long)]
        slope_fraction: Option<f64>,
    },
}

#[derive(Args, Debug)]
struct MapArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    rig: PathBuf,
    /// Label-to-class mapping JSON; defaults to the synthetic label set.
    #[arg(long)]
    mapping: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum GtCmd {
    /// One grid per manifest record.
    Build {
        #[command(flatten)]
        args: MapArgs,
        /// Drop points higher than this many meters.
        #[arg(long)]
        ceiling: Option<f64>,
    },
}

#[derive(Subcommand, Debug)]
enum FlatplaneCmd {
    /// One grid per manifest record.
    Run {
        #[command(flatten)]
        args: MapArgs,
    },
}

#[derive(Subcommand, Debug)]
enum VedCmd {
    /// Train and write a checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Model config JSON; the flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of target grids named after record ids; defaults to
        /// the manifest's truth grids.
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_sampling: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        learning_rate: Option<f32>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Predict one grid.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Calibration of the label camera; sets the evaluation mask.
        #[arg(long)]
        rig: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Latent means of every manifest image, as JSON.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    /// Compare two directories of grids.
    Run {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        truth_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics under pitch and roll perturbations.
    Sweep {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        mapping: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum PcaCmd {
    /// Fit on the output of `ved encode`.
    Fit {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode maps along one principal axis.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pca: PathBuf,
        #[arg(long)]
        axis: usize,
        /// Comma-separated offsets along the axis, in latent units.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        amounts: Vec<f64>,
        /// Start from this image's latent mean instead of the embedding mean.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum RenderCmd {
    /// Color PPM of a grid.
    Map {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pixels per cell side.
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
}

#[derive(Subcommand, Debug)]
enum BenchCmd {
    /// Single-image latency and frame rate.
    Infer {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Model to time when no checkpoint is given.
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
}

fn execution() -> Result<Execution> {
    let threads = match std::env::var("GRIDSIGHT_THREADS") {
        Ok(v) => v.trim().parse::<usize>().with_context(|| format!("GRIDSIGHT_THREADS={v:?} is not a count"))?,
        Err(_) => 1,
    };
    init_threads(threads).context("initialising the thread pool")?;
    Ok(if threads > 1 { Execution::Parallel } else { Execution::Sequential })
}

fn run(cli: Cli) -> Result<()> {
    let exec = execution()?;
    match cli.command {
        Command::Synth(SynthCmd::Gen {
            n,
            out,
            seed,
            config,
            render_width,
            render_height,
            input_width,
            input_height,
            slope_fraction,
        }) => {
            let o = DatasetOverrides {
                render_width,
                render_height,
                input_width,
                input_height,
                slope_fraction,
            };
            commands::synth_gen(n, &out, seed, config.as_deref(), &o, exec)
        }
        Command::Gt(GtCmd::Build { args, ceiling }) => {
            commands::gt_build(&args.manifest, &args.rig, args.mapping.as_deref(), &args.out, ceiling, exec)
        }
        Command::Flatplane(FlatplaneCmd::Run { args }) => {
            commands::flatplane_run(&args.manifest, &args.rig, args.mapping.as_deref(), &args.out, exec)
        }
        Command::Ved(VedCmd::Train {
            manifest,
            config,
            targets,
            out,
            no_sampling,
            epochs,
            seed,
            learning_rate,
            batch_size,
        }) => {
            let o = TrainOverrides {
                no_sampling,
                epochs,
                seed,
                learning_rate,
                batch_size,
            };
            commands::ved_train(&manifest, config.as_deref(), targets.as_deref(), &out, &o, exec)
        }
        Command::Ved(VedCmd::Infer { ckpt, image, rig, out }) => commands::ved_infer(&ckpt, &image, &rig, &out, exec),
        Command::Ved(VedCmd::Encode { ckpt, manifest, out }) => commands::ved_encode(&ckpt, &manifest, &out, exec),
        Command::Eval(EvalCmd::Run { pred_dir, truth_dir, out }) => commands::eval_run(&pred_dir, &truth_dir, &out),
        Command::Eval(EvalCmd::Sweep {
            method,
            manifest,
            ckpt,
            mapping,
            out,
        }) => commands::eval_sweep(method, &manifest, ckpt.as_deref(), mapping.as_deref(), &out, exec),
        Command::Pca(PcaCmd::Fit { embeddings, out }) => commands::pca_fit_cmd(&embeddings, &out),
        Command::Pca(PcaCmd::Sweep {
            ckpt,
            pca,
            axis,
            amounts,
            image,
            out_dir,
        }) => commands::pca_sweep(&ckpt, &pca, axis, &amounts, image.as_deref(), &out_dir, exec),
        Command::Render(RenderCmd::Map { grid, out, scale }) => commands::render_map_cmd(&grid, &out, scale),
        Command::Bench(BenchCmd::Infer { ckpt, preset, n }) => {
            let r = commands::bench_infer(ckpt.as_deref(), preset, n, exec)?;
            println!(
                "{}: {} parameters, input {}, {} runs, mean {:.3} ms, median {:.3} ms, {:.2} Hz",
                r.model, r.parameters, r.input, r.runs, r.mean_ms, r.median_ms, r.hz
            );
            Ok(())
        }
    }
}

/// The error chain on one line, skipping causes already quoted by
/// their parent.
fn diagnostic(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&msg)) {
            parts.push(msg);
        }
    }
    parts.join(": ").replace('\n', " ")
}

fn main() -> ExitCode {
    // clap exits with 2 on argument errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", diagnostic(&e));
            ExitCode::from(1)
        }
    }
}
