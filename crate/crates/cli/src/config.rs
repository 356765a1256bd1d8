//! Run configuration: a TOML key-value file with `[data]` and `[train]`
//! tables, plus `section.key=value` overrides from the command line.
//!
//! Every key is optional; missing keys keep their defaults. Unknown keys are
//! rejected so typos do not silently fall back to defaults.

use std::fs;
use std::path::Path;

use idm_core::data::SyntheticConfig;
use idm_core::losses::LossWeights;
use idm_core::network::EncoderConfig;
use idm_core::optim::AdamConfig;
use idm_core::pseudo_label::ClusterParams;
use idm_core::trainer::{LabelSource, Mixing, TrainConfig};
use toml::{Table, Value};

use crate::error::{CliError, CliResult, Context};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_table(&Table::new()).expect("defaults are valid")
    }
}

struct Reader<'a> {
    section: &'static str,
    table: Option<&'a Table>,
    seen: Vec<&'static str>,
}

impl<'a> Reader<'a> {
    fn new(root: &'a Table, section: &'static str) -> CliResult<Self> {
        let table = match root.get(section) {
            None => None,
            Some(Value::Table(t)) => Some(t),
            Some(_) => return Err(CliError::config(format!("`{section}` must be a table"))),
        };
        Ok(Self { section, table, seen: Vec::new() })
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a Value> {
        self.seen.push(key);
        self.table.and_then(|t| t.get(key))
    }

    fn bad(&self, key: &str, want: &str, got: &Value) -> CliError {
        CliError::config(format!("{}.{key}: expected {want}, got `{got}`", self.section))
    }

    fn f64(&mut self, key: &'static str, default: f64) -> CliResult<f64> {
        match self.raw(key) {
            None => Ok(default),
            Some(Value::Float(v)) => Ok(*v),
            Some(Value::Integer(v)) => Ok(*v as f64),
            Some(v) => Err(self.bad(key, "a number", v)),
        }
    }

    fn u64(&mut self, key: &'static str, default: u64) -> CliResult<u64> {
        match self.raw(key) {
            None => Ok(default),
            Some(Value::Integer(v)) if *v >= 0 => Ok(*v as u64),
            Some(v) => Err(self.bad(key, "a non-negative integer", v)),
        }
    }

    fn usize(&mut self, key: &'static str, default: usize) -> CliResult<usize> {
        Ok(self.u64(key, default as u64)? as usize)
    }

    fn bool(&mut self, key: &'static str, default: bool) -> CliResult<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some(Value::Boolean(v)) => Ok(*v),
            Some(v) => Err(self.bad(key, "true or false", v)),
        }
    }

    fn string(&mut self, key: &'static str, default: &str) -> CliResult<String> {
        match self.raw(key) {
            None => Ok(default.to_string()),
            Some(Value::String(s)) => Ok(s.clone()),
            Some(v) => Err(self.bad(key, "a string", v)),
        }
    }

    fn usize_list(&mut self, key: &'static str, default: &[usize]) -> CliResult<Vec<usize>> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Integer(i) if *i > 0 => Ok(*i as usize),
                    other => Err(self.bad(key, "a list of positive integers", other)),
                })
                .collect(),
            Some(v) => Err(self.bad(key, "a list of positive integers", v)),
        }
    }

    fn finish(self) -> CliResult<()> {
        if let Some(t) = self.table {
            if let Some(k) = t.keys().find(|k| !self.seen.contains(&k.as_str())) {
                return Err(CliError::config(format!("unknown key `{}.{k}`", self.section)));
            }
        }
        Ok(())
    }
}

fn label_source_name(l: LabelSource) -> &'static str {
    match l {
        LabelSource::Clustering => "clustering",
        LabelSource::GroundTruth => "ground-truth",
    }
}

impl RunConfig {
    pub fn from_table(root: &Table) -> CliResult<Self> {
        if let Some(k) = root.keys().find(|k| *k != "data" && *k != "train") {
            return Err(CliError::config(format!("unknown top-level key `{k}`")));
        }
        let dd = SyntheticConfig::default();
        let mut r = Reader::new(root, "data")?;
        let data = SyntheticConfig {
            num_identities: r.usize("num_identities", dd.num_identities)?,
            num_test_identities: r.usize("num_test_identities", dd.num_test_identities)?,
            samples_per_identity: r.usize("samples_per_identity", dd.samples_per_identity)?,
            num_cameras: r.usize("num_cameras", dd.num_cameras)?,
            height: r.usize("height", dd.height)?,
            width: r.usize("width", dd.width)?,
            channels: r.usize("channels", dd.channels)?,
            prototype_std: r.f64("prototype_std", dd.prototype_std)?,
            camera_std: r.f64("camera_std", dd.camera_std)?,
            noise_std: r.f64("noise_std", dd.noise_std)?,
            nuisance_dims: r.usize("nuisance_dims", dd.nuisance_dims)?,
            nuisance_std: r.f64("nuisance_std", dd.nuisance_std)?,
            gap: r.f64("gap", dd.gap)?,
            seed: r.u64("seed", dd.seed)?,
        };
        r.finish()?;

        let td = TrainConfig::default();
        let mut r = Reader::new(root, "train")?;
        let mixing = Mixing::parse(&r.string("mixing", &td.mixing.name())?).context("train.mixing")?;
        let labels = match r.string("labels", label_source_name(td.labels))?.as_str() {
            "clustering" => LabelSource::Clustering,
            "ground-truth" => LabelSource::GroundTruth,
            other => return Err(CliError::config(format!("train.labels: expected `clustering` or `ground-truth`, got `{other}`"))),
        };
        let use_memory = r.bool("memory", td.memory_ratio.is_some())?;
        let memory_ratio = r.f64("memory_ratio", td.memory_ratio.unwrap_or(1.0))?;
        let train = TrainConfig {
            epochs: r.usize("epochs", td.epochs)?,
            iters_per_epoch: r.usize("iters_per_epoch", td.iters_per_epoch)?,
            lr: r.f64("lr", td.lr)?,
            lr_steps: [r.f64("lr_step1", td.lr_steps[0])?, r.f64("lr_step2", td.lr_steps[1])?],
            adam: AdamConfig {
                beta1: r.f64("beta1", td.adam.beta1)?,
                beta2: r.f64("beta2", td.adam.beta2)?,
                eps: r.f64("adam_eps", td.adam.eps)?,
                weight_decay: r.f64("weight_decay", td.adam.weight_decay)?,
            },
            loss: LossWeights {
                mu1: r.f64("mu1", td.loss.mu1)?,
                mu2: r.f64("mu2", td.loss.mu2)?,
                mu3: r.f64("mu3", td.loss.mu3)?,
                triplet_margin: r.f64("margin", td.loss.triplet_margin)?,
            },
            mixing,
            idm_module: r.bool("idm_module", td.idm_module)?,
            stage: r.usize("stage", td.stage)?,
            reduction: r.usize("reduction", td.reduction)?,
            memory_ratio: use_memory.then_some(memory_ratio),
            cluster: ClusterParams {
                k: r.usize("cluster_k", td.cluster.k)?,
                eps: r.f64("cluster_eps", td.cluster.eps)?,
                min_pts: r.usize("min_pts", td.cluster.min_pts)?,
            },
            labels,
            p: r.usize("p", td.p)?,
            k: r.usize("k", td.k)?,
            jitter_std: r.f64("jitter_std", td.jitter_std)?,
            encoder: EncoderConfig {
                height: data.height,
                width: data.width,
                in_channels: data.channels,
                channels: r.usize_list("stage_channels", &td.encoder.channels)?,
                normalize: r.bool("normalize", td.encoder.normalize)?,
            },
            seed: r.u64("seed", td.seed)?,
        };
        r.finish()?;
        data.validate().context("data")?;
        train.validate().context("train")?;
        Ok(Self { data, train })
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| CliError::config(e.to_string()))?;
        Self::from_table(&table)
    }

    /// Reads `path` (if given) and applies `overrides` of the form `section.key=value`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).context(p.display())?;
                text.parse::<Table>().map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(&table)
    }

    /// Sets both the data and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Every key with its resolved value.
    pub fn to_table(&self) -> Table {
        let d = &self.data;
        let mut data = Table::new();
        let int = |v: usize| Value::Integer(v as i64);
        data.insert("num_identities".into(), int(d.num_identities));
        data.insert("num_test_identities".into(), int(d.num_test_identities));
        data.insert("samples_per_identity".into(), int(d.samples_per_identity));
        data.insert("num_cameras".into(), int(d.num_cameras));
        data.insert("height".into(), int(d.height));
        data.insert("width".into(), int(d.width));
        data.insert("channels".into(), int(d.channels));
        data.insert("prototype_std".into(), Value::Float(d.prototype_std));
        data.insert("camera_std".into(), Value::Float(d.camera_std));
        data.insert("noise_std".into(), Value::Float(d.noise_std));
        data.insert("nuisance_dims".into(), int(d.nuisance_dims));
        data.insert("nuisance_std".into(), Value::Float(d.nuisance_std));
        data.insert("gap".into(), Value::Float(d.gap));
        data.insert("seed".into(), Value::Integer(d.seed as i64));

        let t = &self.train;
        let mut train = Table::new();
        train.insert("epochs".into(), int(t.epochs));
        train.insert("iters_per_epoch".into(), int(t.iters_per_epoch));
        train.insert("lr".into(), Value::Float(t.lr));
        train.insert("lr_step1".into(), Value::Float(t.lr_steps[0]));
        train.insert("lr_step2".into(), Value::Float(t.lr_steps[1]));
        train.insert("beta1".into(), Value::Float(t.adam.beta1));
        train.insert("beta2".into(), Value::Float(t.adam.beta2));
        train.insert("adam_eps".into(), Value::Float(t.adam.eps));
        train.insert("weight_decay".into(), Value::Float(t.adam.weight_decay));
        train.insert("mu1".into(), Value::Float(t.loss.mu1));
        train.insert("mu2".into(), Value::Float(t.loss.mu2));
        train.insert("mu3".into(), Value::Float(t.loss.mu3));
        train.insert("margin".into(), Value::Float(t.loss.triplet_margin));
        train.insert("mixing".into(), Value::String(t.mixing.name()));
        train.insert("idm_module".into(), Value::Boolean(t.idm_module));
        train.insert("stage".into(), int(t.stage));
        train.insert("reduction".into(), int(t.reduction));
        train.insert("memory".into(), Value::Boolean(t.memory_ratio.is_some()));
        train.insert("memory_ratio".into(), Value::Float(t.memory_ratio.unwrap_or(0.0)));
        train.insert("cluster_k".into(), int(t.cluster.k));
        train.insert("cluster_eps".into(), Value::Float(t.cluster.eps));
        train.insert("min_pts".into(), int(t.cluster.min_pts));
        train.insert("labels".into(), Value::String(label_source_name(t.labels).into()));
        train.insert("p".into(), int(t.p));
        train.insert("k".into(), int(t.k));
        train.insert("jitter_std".into(), Value::Float(t.jitter_std));
        train.insert("stage_channels".into(), Value::Array(t.encoder.channels.iter().map(|&c| int(c)).collect()));
        train.insert("normalize".into(), Value::Boolean(t.encoder.normalize));
        train.insert("seed".into(), Value::Integer(t.seed as i64));

        let mut root = Table::new();
        root.insert("data".into(), Value::Table(data));
        root.insert("train".into(), Value::Table(train));
        root
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_table()).expect("plain table serializes")
    }
}

/// Applies one `section.key=value` override. The value is read as a TOML
/// value when possible and as a bare string otherwise.
pub fn apply_override(table: &mut Table, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| CliError::config(format!("override `{assignment}` is not of the form section.key=value")))?;
    let (section, key) = path.trim().split_once('.').ok_or_else(|| CliError::config(format!("override key `{path}` needs a section, e.g. train.{path}")))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let entry = table.entry(section.to_string()).or_insert_with(|| Value::Table(Table::new()));
    match entry {
        Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(CliError::config(format!("`{section}` must be a table"))),
    }
}
