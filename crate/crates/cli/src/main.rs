use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use glt_cli::config::{preset, ExperimentConfig, Preset};
use glt_cli::run::{self, Command, RunOptions};

#[derive(Parser)]
#[command(name = "glt", version, about = "Iterative magnitude pruning over orthonormal dictionaries")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent seeds.
    #[arg(long)]
    threads: Option<usize>,
    /// Output root; defaults to `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Synthetic,
    CifarMlp,
    CifarCnn,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train once over the full parameter space.
    Vanilla(RunArgs),
    /// Iterative magnitude pruning with rewinding.
    Imp(RunArgs),
    /// Train once in randomly chosen subspaces of the given sizes.
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        /// Subspace sizes; overrides `baseline.s_grid`.
        #[arg(long, value_delimiter = ',')]
        s_grid: Option<Vec<usize>>,
    },
    /// Plot test accuracy against compression for record CSVs.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render surviving input pixels of an identity-bottleneck export.
    InspectPixels {
        export: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a starting config.
    GenConfig {
        #[arg(long, value_enum, default_value = "synthetic")]
        preset: PresetArg,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn train(command: Command, args: RunArgs, s_grid: Option<Vec<usize>>) -> Result<()> {
    let config = ExperimentConfig::load(&args.config)?;
    let opts = RunOptions {
        seed: args.seed,
        threads: args.threads,
        out: args.out,
        s_grid,
    };
    let outcomes = run::run(config, command, &opts).with_context(|| format!("{} failed", command.name()))?;
    for o in outcomes {
        println!("seed {} -> {}", o.seed, o.dir.display());
        for r in &o.records {
            println!(
                "  round {:>3}  active {:>8}  compression {:.4}  train {:.4}  test {:.4}",
                r.round, r.active_count, r.compression_ratio, r.train_accuracy, r.test_accuracy
            );
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Cmd::Vanilla(args) => train(Command::Vanilla, args, None),
        Cmd::Imp(args) => train(Command::Imp, args, None),
        Cmd::Baseline { run, s_grid } => train(Command::Baseline, run, s_grid),
        Cmd::Plot { csv, out } => {
            run::plot_files(&csv, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Cmd::InspectPixels { export, out } => {
            let kept = run::inspect_pixels(&export, &out)?;
            println!("wrote {} ({kept} surviving inputs)", out.display());
            Ok(())
        }
        Cmd::GenConfig { preset: p, out } => {
            let p = match p {
                PresetArg::Synthetic => Preset::Synthetic,
                PresetArg::CifarMlp => Preset::CifarMlp,
                PresetArg::CifarCnn => Preset::CifarCnn,
            };
            let text = preset(p).to_toml();
            match out {
                Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}
