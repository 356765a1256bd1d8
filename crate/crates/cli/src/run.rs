//! Run directories.
//!
//! ```text
//! RUN/
//!   config.toml                 resolved configuration
//!   log.csv                     one row per epoch, every logged quantity
//!   eval.csv                    epoch,mAP,R1,R5,R10
//!   plots/loss_curves.csv       epoch and the mean of every loss term
//!   plots/factor_sigma.csv      epoch,factor_mean,factor_sigma
//!   plots/map_curve.csv         epoch,mAP,R1
//!   checkpoints/epoch_NNN.ckpt  after every epoch (or only the latest, see `keep_all`)
//!   checkpoints/last.ckpt       copy of the newest checkpoint
//!   pseudo_labels/epoch_NNN.csv sample_id,cluster_id (noise is -1), when enabled
//! ```
//!
//! All CSVs are rewritten in full after every epoch, so an aborted run leaves
//! consistent files covering the completed epochs. Floats use Rust's
//! shortest round-trip formatting, which makes the files byte-reproducible.

use std::fs;
use std::path::{Path, PathBuf};

use idm_core::trainer::{EpochLog, TrainObserver, Trainer};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult, Context};

pub const LOG_HEADER: [&str; 18] = [
    "epoch",
    "lr",
    "num_clusters",
    "noise",
    "loss_cls",
    "loss_triplet",
    "loss_bridge_pred",
    "loss_bridge_feat",
    "loss_diversity",
    "loss_total",
    "factor_mean",
    "factor_sigma",
    "degenerate_triplets",
    "mAP",
    "R1",
    "R5",
    "R10",
    "skipped_queries",
];

pub const EVAL_HEADER: [&str; 5] = ["epoch", "mAP", "R1", "R5", "R10"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// The `log.csv` row of one epoch.
pub fn log_row(log: &EpochLog) -> Vec<String> {
    let l = log.losses.as_ref();
    let r = &log.report;
    vec![
        log.epoch.to_string(),
        log.lr.to_string(),
        log.num_clusters.to_string(),
        log.noise.to_string(),
        opt(l.map(|l| l.cls)),
        opt(l.map(|l| l.triplet)),
        opt(l.and_then(|l| l.bridge_pred)),
        opt(l.and_then(|l| l.bridge_feat)),
        opt(l.and_then(|l| l.diversity)),
        opt(l.map(|l| l.total)),
        opt(log.factor.map(|f| f.0)),
        opt(log.factor.map(|f| f.1)),
        log.degenerate_triplets.to_string(),
        r.map.to_string(),
        r.cmc[0].to_string(),
        r.cmc[1].to_string(),
        r.cmc[2].to_string(),
        r.skipped_queries.to_string(),
    ]
}

pub fn eval_row(epoch: usize, report: &idm_core::eval::EvalReport) -> Vec<String> {
    vec![epoch.to_string(), report.map.to_string(), report.cmc[0].to_string(), report.cmc[1].to_string(), report.cmc[2].to_string()]
}

pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_path(path).context(path.display())?;
    w.write_record(header).context(path.display())?;
    for row in rows {
        w.write_record(row).context(path.display())?;
    }
    w.flush().context(path.display())
}

/// Output directory of one training run.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the layout and writes the config snapshot. An existing
    /// non-empty directory is refused unless `overwrite` is set.
    pub fn create(root: &Path, config: &RunConfig, overwrite: bool) -> CliResult<Self> {
        if !overwrite && root.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
            return Err(CliError::config(format!("run directory {} is not empty (pass --force to reuse it)", root.display())));
        }
        for sub in ["", "plots", "checkpoints"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).context(p.display())?;
        }
        let snapshot = root.join("config.toml");
        fs::write(&snapshot, config.to_toml()).context(snapshot.display())?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.path("checkpoints/last.ckpt")
    }
}

/// Observer that mirrors training progress into a [`RunDir`].
pub struct RunWriter<'a> {
    dir: &'a RunDir,
    config: &'a RunConfig,
    logs: Vec<EpochLog>,
    /// Keep one checkpoint per epoch rather than only the latest.
    pub keep_all: bool,
    pub pseudo_labels: bool,
    failure: Option<CliError>,
}

impl<'a> RunWriter<'a> {
    pub fn new(dir: &'a RunDir, config: &'a RunConfig) -> Self {
        Self { dir, config, logs: Vec::new(), keep_all: true, pseudo_labels: false, failure: None }
    }

    /// The IO error behind a failed `epoch_end`, if any.
    pub fn take_failure(&mut self) -> Option<CliError> {
        self.failure.take()
    }

    fn write_all(&mut self, log: &EpochLog, trainer: &Trainer<'_>) -> CliResult<()> {
        self.logs.push(log.clone());
        let logs = &self.logs;
        write_csv(&self.dir.path("log.csv"), &LOG_HEADER, logs.iter().map(log_row))?;
        write_csv(&self.dir.path("eval.csv"), &EVAL_HEADER, logs.iter().map(|l| eval_row(l.epoch, &l.report)))?;
        write_csv(
            &self.dir.path("plots/loss_curves.csv"),
            &["epoch", "cls", "triplet", "bridge_pred", "bridge_feat", "diversity", "total"],
            logs.iter().map(|l| {
                let row = log_row(l);
                let mut out = vec![row[0].clone()];
                out.extend_from_slice(&row[4..10]);
                out
            }),
        )?;
        write_csv(
            &self.dir.path("plots/factor_sigma.csv"),
            &["epoch", "factor_mean", "factor_sigma"],
            logs.iter().map(|l| [l.epoch.to_string(), opt(l.factor.map(|f| f.0)), opt(l.factor.map(|f| f.1))]),
        )?;
        write_csv(
            &self.dir.path("plots/map_curve.csv"),
            &["epoch", "mAP", "R1"],
            logs.iter().map(|l| [l.epoch.to_string(), l.report.map.to_string(), l.report.rank1().to_string()]),
        )?;

        let ckpt = Checkpoint::from_model(self.config, trainer.model(), log.epoch);
        let last = self.dir.last_checkpoint();
        ckpt.save(&last)?;
        if self.keep_all {
            let named = self.dir.path(&format!("checkpoints/epoch_{:03}.ckpt", log.epoch));
            fs::copy(&last, &named).context(named.display())?;
        }

        if self.pseudo_labels {
            if let Some(a) = trainer.assignment() {
                let dir = self.dir.path("pseudo_labels");
                fs::create_dir_all(&dir).context(dir.display())?;
                let rows = a.labels.iter().enumerate().map(|(i, l)| [i.to_string(), l.map_or_else(|| "-1".to_string(), |c| c.to_string())]);
                write_csv(&dir.join(format!("epoch_{:03}.csv", log.epoch)), &["sample_id", "cluster_id"], rows)?;
            }
        }
        Ok(())
    }
}

impl TrainObserver for RunWriter<'_> {
    fn epoch_end(&mut self, log: &EpochLog, trainer: &Trainer<'_>) -> idm_core::Result<()> {
        self.write_all(log, trainer).map_err(|e| {
            let msg = e.to_string();
            self.failure = Some(e);
            idm_core::Error::InvalidArgument(msg)
        })
    }
}
