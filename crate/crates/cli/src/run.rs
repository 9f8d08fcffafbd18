//! Subcommand implementations. Each seed owns one output directory,
//! `<root>/<command>-<hash prefix>/seed-<n>/`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use glt_core::data::{load_cifar10, synthetic_blobs, Normalization, Splits};
use glt_core::dictionary::{ActiveSet, Dictionary};
use glt_core::nn::{Network, ParamVector, TrainConfig};
use glt_core::pruning::{
    export_factorized, run_fixed_subspace, run_imp, ImpObserver, RunRecord, SubspaceSolution,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::error::{Error, Result};
use crate::records::{write_records, CsvSink, Manifest};
use crate::{pixels, plot};

pub const MANIFEST: &str = "manifest.json";
pub const W0_CHECKPOINT: &str = "w0.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const RECORDS: &str = "records.csv";
pub const BASELINE: &str = "baseline.csv";
pub const FACTORIZED: &str = "factorized.json";
pub const ACTIVE_DIR: &str = "active";
pub const PARTIAL: &str = "PARTIAL";
pub const RUN_LOG: &str = "runs.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Vanilla,
    Imp,
    Baseline,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Vanilla => "vanilla",
            Command::Imp => "imp",
            Command::Baseline => "baseline",
        }
    }
}

/// Command-line overrides shared by the training subcommands.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    /// Baseline subspace sizes; falls back to `baseline.s_grid`.
    pub s_grid: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub records: Vec<RunRecord>,
}

struct Experiment {
    config: ExperimentConfig,
    net: Network,
    dict: Dictionary,
    data: Splits,
    normalization: Option<Normalization>,
    hash: String,
    root: PathBuf,
}

impl Experiment {
    fn prepare(mut config: ExperimentConfig, command: Command, opts: &RunOptions) -> Result<Self> {
        if let Some(seed) = opts.seed {
            config.seeds = vec![seed];
        }
        let net = config.validate()?;
        let dict = config.build_dictionary(&net)?;
        let (data, normalization) = match &config.dataset {
            DatasetConfig::Synthetic(spec) => (synthetic_blobs(spec)?, None),
            DatasetConfig::Cifar10 { .. } => {
                let c = load_cifar10(&config.data_dir()?)?;
                (c.splits, Some(c.normalization))
            }
        };
        let hash = config.hash();
        let base = opts.out.clone().unwrap_or_else(|| config.output_dir.clone());
        let root = base.join(format!("{}-{}", command.name(), &hash[..16]));
        Ok(Self {
            config,
            net,
            dict,
            data,
            normalization,
            hash,
            root,
        })
    }

    fn training(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.config.training.clone()
        }
    }

    fn seed_dir(&self, command: Command, seed: u64) -> Result<PathBuf> {
        let dir = self.root.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        let marker = dir.join(PARTIAL);
        if marker.exists() {
            fs::remove_file(&marker).map_err(Error::io(&marker))?;
        }
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.name().into(),
            config_hash: self.hash.clone(),
            seed,
            seeds: self.config.seeds.clone(),
            param_count: self.net.param_count(),
            dictionary_dim: self.dict.dim(),
            normalization: self.normalization.clone(),
            config: self.config.clone(),
        }
        .write(&dir.join(MANIFEST))?;
        Ok(dir)
    }

    fn vanilla(&self, dir: &Path, seed: u64) -> Result<Vec<RunRecord>> {
        let cfg = self.training(seed);
        let w0 = self.net.init_params(seed);
        checkpoint::write(&dir.join(W0_CHECKPOINT), &w0)?;
        let w = self.net.train(&w0, &self.data.train, &cfg, None)?;
        checkpoint::write(&dir.join(FINAL_CHECKPOINT), &w)?;
        let record = RunRecord {
            round: 0,
            active_count: self.net.param_count(),
            compression_ratio: 0.0,
            train_accuracy: self.net.evaluate(w.values(), &self.data.train)?,
            test_accuracy: self.net.evaluate(w.values(), &self.data.test)?,
            sparsify_residual: 0.0,
        };
        write_records(&dir.join(RECORDS), std::slice::from_ref(&record))?;
        Ok(vec![record])
    }

    fn imp(&self, dir: &Path, seed: u64) -> Result<Vec<RunRecord>> {
        let cfg = self.training(seed);
        let active_dir = dir.join(ACTIVE_DIR);
        fs::create_dir_all(&active_dir).map_err(Error::io(&active_dir))?;
        let mut sink = DirSink {
            dir: dir.to_path_buf(),
            csv: CsvSink::create(&dir.join(RECORDS))?,
        };
        let run = run_imp(&self.net, &self.dict, &self.config.schedule, &cfg, &self.data, &mut sink)?;
        checkpoint::write(&dir.join(FINAL_CHECKPOINT), &run.final_solution.params)?;
        if self.config.schedule.grouped {
            let export = export_factorized(&self.net, &self.dict, &run.final_active, &run.final_solution.params)?;
            let path = dir.join(FACTORIZED);
            let text = serde_json::to_string_pretty(&export).expect("export serializes");
            fs::write(&path, text + "\n").map_err(Error::io(&path))?;
        }
        Ok(run.records)
    }

    fn baseline(&self, dir: &Path, seed: u64, grid: &[usize]) -> Result<Vec<RunRecord>> {
        let cfg = self.training(seed);
        let records = grid
            .iter()
            .map(|&s| {
                let subspace_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ s as u64;
                run_fixed_subspace(&self.net, &self.dict, s, subspace_seed, &cfg, &self.data)
            })
            .collect::<glt_core::Result<Vec<_>>>()?;
        write_records(&dir.join(BASELINE), &records)?;
        Ok(records)
    }
}

/// Persists each IMP round as it happens.
struct DirSink {
    dir: PathBuf,
    csv: CsvSink,
}

fn to_core(e: Error) -> glt_core::Error {
    match e {
        Error::Core(e) => e,
        Error::Io { path, source } => glt_core::Error::Io(std::io::Error::new(
            source.kind(),
            format!("{}: {source}", path.display()),
        )),
        other => glt_core::Error::InvalidState(other.to_string()),
    }
}

impl ImpObserver for DirSink {
    fn on_init(&mut self, w0: &ParamVector) -> glt_core::Result<()> {
        let path = self.dir.join(W0_CHECKPOINT);
        checkpoint::write(&path, w0).map_err(to_core)?;
        let back = checkpoint::read(&path).map_err(to_core)?;
        if back.values() != w0.values() {
            return Err(glt_core::Error::InvalidState(format!(
                "{} does not reproduce w0 exactly",
                path.display()
            )));
        }
        Ok(())
    }

    fn on_round_start(&mut self, round: usize, active: &ActiveSet, _start: &ParamVector) -> glt_core::Result<()> {
        let path = self.dir.join(ACTIVE_DIR).join(format!("round-{round:03}.txt"));
        fs::write(&path, active.to_text()).map_err(|e| to_core(Error::io(&path)(e)))
    }

    fn on_round_end(&mut self, record: &RunRecord, _: &ActiveSet, _: &SubspaceSolution) -> glt_core::Result<()> {
        self.csv.append(record).map_err(to_core)
    }
}

fn mark_partial(dir: &Path, err: &Error) {
    // best effort: the original error is what gets reported
    let _ = fs::write(dir.join(PARTIAL), format!("{err}\n"));
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker threads: {e}")))
}

/// Runs `command` for every configured seed and returns outcomes in seed order.
pub fn run(config: ExperimentConfig, command: Command, opts: &RunOptions) -> Result<Vec<SeedOutcome>> {
    if opts.threads == Some(0) {
        return Err(Error::Usage("--threads must be at least 1".into()));
    }
    let grid = match command {
        Command::Baseline => {
            let mut grid = opts
                .s_grid
                .clone()
                .or_else(|| config.baseline.as_ref().map(|b| b.s_grid.clone()))
                .ok_or_else(|| Error::config("baseline.s_grid", "baseline needs an s-grid (config or --s-grid)"))?;
            if grid.is_empty() {
                return Err(Error::config("baseline.s_grid", "the s-grid is empty"));
            }
            grid.sort_unstable();
            grid.dedup();
            grid
        }
        _ => Vec::new(),
    };
    let exp = Experiment::prepare(config, command, opts)?;
    if let Some(&s) = grid.iter().find(|&&s| s == 0 || s > exp.dict.dim()) {
        return Err(Error::config("baseline.s_grid", format!("{s} is outside [1, {}]", exp.dict.dim())));
    }
    fs::create_dir_all(&exp.root).map_err(Error::io(&exp.root))?;

    let one = |seed: u64| -> Result<SeedOutcome> {
        let dir = exp.seed_dir(command, seed)?;
        let records = match command {
            Command::Vanilla => exp.vanilla(&dir, seed),
            Command::Imp => exp.imp(&dir, seed),
            Command::Baseline => exp.baseline(&dir, seed, &grid),
        };
        match records {
            Ok(records) => Ok(SeedOutcome { seed, dir, records }),
            Err(e) => {
                mark_partial(&dir, &e);
                Err(e)
            }
        }
    };
    let results: Vec<Result<SeedOutcome>> = pool(opts.threads)?.install(|| exp.config.seeds.par_iter().map(|&s| one(s)).collect());

    // single writer: outcomes are appended here, in seed order
    let log_path = exp.root.join(RUN_LOG);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(Error::io(&log_path))?;
    let mut outcomes = Vec::with_capacity(results.len());
    for r in results {
        let outcome = r?;
        let line = serde_json::to_string(&outcome).expect("outcome serializes");
        writeln!(log, "{line}").map_err(Error::io(&log_path))?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// Renders the record CSVs at `inputs` into one SVG at `out`.
pub fn plot_files(inputs: &[PathBuf], out: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Usage("plot needs at least one CSV".into()));
    }
    let stems: Vec<String> = inputs
        .iter()
        .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let curves = inputs
        .iter()
        .zip(&stems)
        .map(|(path, stem)| {
            let records = crate::records::read_records(path)?;
            let unique = stems.iter().filter(|s| *s == stem).count() == 1;
            let label = if unique { stem.clone() } else { path.display().to_string() };
            Ok(plot::Curve::from_records(label, &records))
        })
        .collect::<Result<Vec<_>>>()?;
    let svg = plot::render(&curves)?;
    fs::write(out, svg).map_err(Error::io(out))
}

/// Writes the pixel masks of a factorized export and returns their popcount.
pub fn inspect_pixels(export: &Path, out: &Path) -> Result<usize> {
    let layer = pixels::read_export(export)?;
    let masks = pixels::masks(&layer)?;
    fs::write(out, pixels::render(&masks)).map_err(Error::io(out))?;
    Ok(masks.popcount())
}
