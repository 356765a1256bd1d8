use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use idm_core::data::generate;
use idm_core::gradcheck::{suite, GradCheck};
use idm_core::trainer::{evaluate, sweep, train, SweepParam, SweepRow};

use crate::checkpoint::{Checkpoint, ReadOptions};
use crate::config::RunConfig;
use crate::dataset_io::{read_data, write_data, Dims};
use crate::error::{Category, CliError, CliResult, Context};
use crate::run::{eval_row, write_csv, RunDir, RunWriter, EVAL_HEADER};

#[derive(Debug, Parser)]
#[command(name = "idm", version, about = "Intermediate domain mixing for domain adaptive re-identification")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace); RUST_LOG takes precedence.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on freshly generated synthetic data and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out query/gallery split.
    Eval(EvalArgs),
    /// Train and evaluate once per value and seed of one parameter.
    Sweep(SweepArgs),
    /// Generate synthetic data and export it.
    GenData(GenDataArgs),
    /// Finite-difference check of every gradient over several seeds.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML file with [data] and [train] tables.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.mu1=0.5`; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for both data generation and training.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let config = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        Ok(match self.seed {
            Some(s) => config.with_seed(s),
            None => config,
        })
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory to create.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Reuse a non-empty run directory.
    #[arg(long)]
    pub force: bool,
    /// Write each epoch's target pseudo labels.
    #[arg(long)]
    pub pseudo_labels: bool,
    /// Keep only checkpoints/last.ckpt instead of one file per epoch.
    #[arg(long)]
    pub last_checkpoint_only: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Do not read the IDM section; the model is rebuilt without it.
    #[arg(long)]
    pub skip_idm: bool,
    /// Directory exported by `gen-data`; by default the data is regenerated from the checkpoint's config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also write the row to this CSV file.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// One of mu1, mu2, mu3, r, R_M, stage, mix_baseline.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values, e.g. `0,0.5,1` or `input:0.5,manifold:1,idm`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Comma-separated seeds; each drives data generation and training.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Output CSV with columns parameter,value,seed,mAP,R1.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory receiving NAME.csv and NAME.bin per split.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Number of seeds.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Also write the summary to this CSV file.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    let stdout = &mut std::io::stdout().lock();
    match cli.command {
        Command::Train(a) => cmd_train(&a, stdout),
        Command::Eval(a) => cmd_eval(&a, stdout),
        Command::Sweep(a) => cmd_sweep(&a, stdout),
        Command::GenData(a) => cmd_gen_data(&a, stdout),
        Command::GradCheck(a) => cmd_grad_check(&a, stdout),
    }
}

/// Trains with `config` into `dir`; on failure the checkpoints of the
/// completed epochs stay in place.
pub fn train_into(config: &RunConfig, dir: &RunDir, keep_all: bool, pseudo_labels: bool) -> CliResult<idm_core::trainer::TrainOutcome> {
    let data = generate(&config.data)?;
    let mut writer = RunWriter::new(dir, config);
    writer.keep_all = keep_all;
    writer.pseudo_labels = pseudo_labels;
    match train(&config.train, &data, &mut writer) {
        Ok(outcome) => Ok(outcome),
        Err(e) => {
            let err = writer.take_failure().unwrap_or_else(|| e.into());
            let last = dir.last_checkpoint();
            if last.exists() {
                log::error!("run aborted; last good checkpoint is {}", last.display());
            }
            Err(err)
        }
    }
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let config = a.config.resolve()?;
    let dir = RunDir::create(&a.out, &config, a.force)?;
    let outcome = train_into(&config, &dir, !a.last_checkpoint_only, a.pseudo_labels)?;
    let last = outcome.logs.last().expect("validated epochs >= 1");
    writeln!(out, "{}", EVAL_HEADER.join(","))?;
    writeln!(out, "{}", eval_row(last.epoch, &last.report).join(","))?;
    Ok(())
}

pub fn eval_checkpoint(a: &EvalArgs) -> CliResult<(usize, idm_core::eval::EvalReport)> {
    let ckpt = Checkpoint::load(&a.checkpoint, ReadOptions { skip_idm: a.skip_idm })?;
    let model = ckpt.to_model()?;
    let data = match &a.data {
        Some(dir) => {
            let (data, dims) = read_data(dir)?;
            if dims != Dims::of(&ckpt.config.data) {
                return Err(CliError::new(Category::Dimension, format!("exported data has dims {dims:?}, the model expects {:?}", Dims::of(&ckpt.config.data))));
            }
            data
        }
        None => generate(&ckpt.config.data)?,
    };
    let report = evaluate(&model, &data.query, &data.gallery)?;
    Ok((ckpt.epoch, report))
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let (epoch, report) = eval_checkpoint(a)?;
    let row = eval_row(epoch, &report);
    if let Some(path) = &a.out {
        write_csv(path, &EVAL_HEADER, [&row])?;
    }
    writeln!(out, "{}", EVAL_HEADER.join(","))?;
    writeln!(out, "{}", row.join(","))?;
    Ok(())
}

pub const SWEEP_HEADER: [&str; 5] = ["parameter", "value", "seed", "mAP", "R1"];

pub fn sweep_rows(rows: &[SweepRow]) -> Vec<[String; 5]> {
    rows.iter().map(|r| [r.param.to_string(), r.value.clone(), r.seed.to_string(), r.map.to_string(), r.rank1.to_string()]).collect()
}

fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> CliResult<()> {
    let config = a.config.resolve()?;
    let param = SweepParam::parse(&a.param)?;
    let rows = sweep(&config.train, &config.data, param, &a.values, &a.seeds)?;
    let table = sweep_rows(&rows);
    write_csv(&a.out, &SWEEP_HEADER, &table)?;
    writeln!(out, "{}", SWEEP_HEADER.join(","))?;
    for row in &table {
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs, out: &mut dyn Write) -> CliResult<()> {
    let config = a.config.resolve()?;
    let data = generate(&config.data)?;
    write_data(&a.out, &data, Dims::of(&config.data))?;
    let snapshot = a.out.join("config.toml");
    fs::write(&snapshot, config.to_toml()).context(snapshot.display())?;
    for (name, set) in [("source", &data.source), ("target", &data.target), ("query", &data.query), ("gallery", &data.gallery)] {
        writeln!(out, "{name}: {} samples", set.len())?;
    }
    Ok(())
}

/// Aggregate of one gradient check over many seeds.
#[derive(Clone, Debug)]
pub struct GradSummary {
    pub name: &'static str,
    pub seeds: usize,
    pub passed: usize,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradSummary {
    pub fn ok(&self) -> bool {
        self.passed == self.seeds
    }
}

/// Runs the gradient suite for `count` seeds from `first`.
pub fn grad_check(first: u64, count: u64) -> CliResult<(Vec<GradSummary>, Duration)> {
    let start = Instant::now();
    let bounds = GradCheck::default();
    let mut summaries: Vec<GradSummary> = Vec::new();
    for seed in first..first + count {
        for (i, case) in suite(seed)?.into_iter().enumerate() {
            if summaries.len() <= i {
                summaries.push(GradSummary { name: case.name, seeds: 0, passed: 0, entries: 0, max_rel_err: 0.0, max_abs_err: 0.0 });
            }
            let s = &mut summaries[i];
            s.seeds += 1;
            s.passed += usize::from(case.report.passes(bounds));
            s.entries += case.report.entries();
            s.max_rel_err = s.max_rel_err.max(case.report.max_rel_err);
            s.max_abs_err = s.max_abs_err.max(case.report.max_abs_err);
        }
    }
    Ok((summaries, start.elapsed()))
}

fn cmd_grad_check(a: &GradCheckArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.seeds == 0 {
        return Err(CliError::config("--seeds must be at least 1"));
    }
    let (summaries, elapsed) = grad_check(a.first_seed, a.seeds)?;
    let header = ["check", "seeds", "passed", "entries", "max_rel_err", "max_abs_err"];
    let rows: Vec<[String; 6]> = summaries
        .iter()
        .map(|s| [s.name.to_string(), s.seeds.to_string(), s.passed.to_string(), s.entries.to_string(), s.max_rel_err.to_string(), s.max_abs_err.to_string()])
        .collect();
    if let Some(path) = &a.out {
        write_csv(path, &header, &rows)?;
    }
    for s in &summaries {
        writeln!(out, "{:<4} {:<18} {}/{} seeds  max rel {:.2e}  max abs {:.2e}", if s.ok() { "ok" } else { "FAIL" }, s.name, s.passed, s.seeds, s.max_rel_err, s.max_abs_err)?;
    }
    writeln!(out, "{} checks in {:.2?}", summaries.len(), elapsed)?;
    let failed: Vec<&str> = summaries.iter().filter(|s| !s.ok()).map(|s| s.name).collect();
    if !failed.is_empty() {
        return Err(CliError::new(Category::Acceptance, format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}
