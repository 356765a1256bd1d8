//! Staged encoder, global average pooling and the hybrid classifier.
//!
//! A batch of `n` samples with `h×w` spatial positions and `c` channels is
//! carried as a `[n·h·w, c]` matrix, sample-major then position-major. Each
//! stage is a per-position channel map (a 1×1 convolution) followed by relu
//! and a domain-specific batch normalization.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{BatchStats, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::idm::{Idm, IdmConfig};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::{gaussian_vec, stream, Stream};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const CLASSIFIER_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
    /// Mixed representations; normalized with their own batch statistics.
    Intermediate,
}

impl Domain {
    fn slot(self) -> Option<usize> {
        match self {
            Domain::Source => Some(0),
            Domain::Target => Some(1),
            Domain::Intermediate => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
            Domain::Intermediate => "intermediate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Output width of every stage; its length is the stage count.
    pub channels: Vec<usize>,
    /// Disabling removes every encoder batch norm (the classifier keeps its own).
    pub normalize: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { height: 4, width: 2, in_channels: 8, channels: vec![8, 16, 16, 32, 32], normalize: true }
    }
}

impl EncoderConfig {
    pub fn num_stages(&self) -> usize {
        self.channels.len()
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn input_len(&self) -> usize {
        self.positions() * self.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages() < 2 {
            return Err(invalid("encoder needs at least 2 stages"));
        }
        if self.height == 0 || self.width == 0 || self.in_channels == 0 || self.channels.contains(&0) {
            return Err(invalid("encoder dimensions must be positive"));
        }
        Ok(())
    }

    pub fn check_stage(&self, m: usize) -> Result<()> {
        if m >= self.num_stages() {
            return Err(Error::Range { what: "stage", index: m, len: self.num_stages() });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_source_classes: usize,
    /// Plugged IDM; `None` builds a model without one.
    pub idm: Option<IdmConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(c: usize) -> Self {
        Self { mean: vec![0.0; c], var: vec![1.0; c] }
    }

    fn update(&mut self, batch: &BatchStats) {
        let unbias = batch.count as f64 / (batch.count as f64 - 1.0);
        for j in 0..self.mean.len() {
            self.mean[j] = (1.0 - BN_MOMENTUM) * self.mean[j] + BN_MOMENTUM * batch.mean[j];
            self.var[j] = (1.0 - BN_MOMENTUM) * self.var[j] + BN_MOMENTUM * batch.var[j] * unbias;
        }
    }
}

/// Batch norm with affine parameters shared by both domains and running
/// statistics kept separately for source and target.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainNorm {
    gamma: ParamId,
    beta: ParamId,
    pub running: [RunningStats; 2],
}

impl DomainNorm {
    fn new(params: &mut ParamStore, prefix: &str, c: usize) -> Self {
        let gamma = params.add(format!("{prefix}.gamma"), Tensor::vector(vec![1.0; c]));
        let beta = params.add(format!("{prefix}.beta"), Tensor::vector(vec![0.0; c]));
        Self { gamma, beta, running: [RunningStats::new(c), RunningStats::new(c)] }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, domain: Domain, mode: Mode) -> Result<(Var, Option<BatchStats>)> {
        let running = match (mode, domain.slot()) {
            (Mode::Eval, Some(slot)) => Some((&self.running[slot].mean[..], &self.running[slot].var[..])),
            _ => None,
        };
        let (y, stats) = tape.normalize(x, running, BN_EPS)?;
        let y = tape.mul_row(y, p.var(self.gamma))?;
        let y = tape.add_row(y, p.var(self.beta))?;
        let update = match (mode, domain.slot()) {
            (Mode::Train, Some(_)) => stats,
            _ => None,
        };
        Ok((y, update))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormSlot {
    Stage(usize),
    Classifier,
}

type StatUpdates = Vec<(NormSlot, Domain, BatchStats)>;

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    weight: ParamId,
    norm: Option<DomainNorm>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridClassifier {
    norm: DomainNorm,
    source_weight: ParamId,
    target_weight: ParamId,
    num_source: usize,
    num_target: usize,
}

impl HybridClassifier {
    pub fn num_source(&self) -> usize {
        self.num_source
    }

    pub fn num_target(&self) -> usize {
        self.num_target
    }

    pub fn num_classes(&self) -> usize {
        self.num_source + self.num_target
    }

    pub fn source_weight(&self) -> ParamId {
        self.source_weight
    }

    pub fn target_weight(&self) -> ParamId {
        self.target_weight
    }
}

/// Backbone, hybrid classifier and (optionally) the IDM, with all their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    stages: Vec<Stage>,
    classifier: HybridClassifier,
    idm: Option<Idm>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        if config.num_source_classes == 0 {
            return Err(invalid("num_source_classes must be positive"));
        }
        let enc = &config.encoder;
        let mut params = ParamStore::new();
        let mut rng = stream(seed, Stream::EncoderInit);
        let mut stages = Vec::with_capacity(enc.num_stages());
        let mut c_in = enc.in_channels;
        for (i, &c_out) in enc.channels.iter().enumerate() {
            let std = libm::sqrt(2.0 / c_in as f64);
            let w = Tensor::matrix(c_in, c_out, gaussian_vec(&mut rng, c_in * c_out, std))?;
            let weight = params.add(format!("encoder.stage{i}.weight"), w);
            let norm = enc.normalize.then(|| DomainNorm::new(&mut params, &format!("encoder.stage{i}.bn"), c_out));
            stages.push(Stage { weight, norm });
            c_in = c_out;
        }

        let d = enc.feature_dim();
        let mut rng = stream(seed, Stream::ClassifierInit);
        let norm = DomainNorm::new(&mut params, "classifier.bn", d);
        let ws = Tensor::matrix(d, config.num_source_classes, gaussian_vec(&mut rng, d * config.num_source_classes, CLASSIFIER_INIT_STD))?;
        let source_weight = params.add("classifier.source_weight", ws);
        let wt = Tensor::matrix(d, 1, gaussian_vec(&mut rng, d, CLASSIFIER_INIT_STD))?;
        let target_weight = params.add("classifier.target_weight", wt);
        let classifier = HybridClassifier {
            norm,
            source_weight,
            target_weight,
            num_source: config.num_source_classes,
            num_target: 1,
        };

        let idm = match &config.idm {
            Some(cfg) => {
                enc.check_stage(cfg.stage)?;
                let mut rng = stream(seed, Stream::IdmInit);
                Some(Idm::new(&mut params, cfg, enc.channels[cfg.stage], &mut rng)?)
            }
            None => None,
        };
        Ok(Self { config, params, stages, classifier, idm })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.config.encoder
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn classifier(&self) -> &HybridClassifier {
        &self.classifier
    }

    pub fn idm(&self) -> Option<&Idm> {
        self.idm.as_ref()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    /// Running statistics of stage `i` (encoder) for a real domain.
    pub fn stage_running_stats(&self, stage: usize, domain: Domain) -> Option<&RunningStats> {
        let slot = domain.slot()?;
        self.stages.get(stage)?.norm.as_ref().map(|n| &n.running[slot])
    }

    pub fn classifier_running_stats(&self, domain: Domain) -> Option<&RunningStats> {
        domain.slot().map(|s| &self.classifier.norm.running[s])
    }

    fn apply(&mut self, updates: StatUpdates) {
        for (slot, domain, stats) in updates {
            let Some(d) = domain.slot() else { continue };
            let norm = match slot {
                NormSlot::Stage(i) => self.stages[i].norm.as_mut(),
                NormSlot::Classifier => Some(&mut self.classifier.norm),
            };
            if let Some(norm) = norm {
                norm.running[d].update(&stats);
            }
        }
    }

    fn check_rows(&self, tape: &Tape, x: Var, channels: usize, op: &'static str) -> Result<usize> {
        let s = self.config.encoder.positions();
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != channels || !shape[0].is_multiple_of(s) || shape[0] == 0 {
            return Err(Error::Dimension { op, left: shape.to_vec(), right: vec![s, channels] });
        }
        Ok(shape[0] / s)
    }

    fn run_stages(
        &self,
        tape: &mut Tape,
        p: &Bound,
        mut x: Var,
        stages: core::ops::Range<usize>,
        domain: Domain,
        mode: Mode,
        updates: &mut StatUpdates,
    ) -> Result<Var> {
        for i in stages {
            let stage = &self.stages[i];
            x = tape.matmul(x, p.var(stage.weight))?;
            x = tape.relu(x);
            if let Some(norm) = &stage.norm {
                let (y, stats) = norm.forward(tape, p, x, domain, mode)?;
                if let Some(stats) = stats {
                    updates.push((NormSlot::Stage(i), domain, stats));
                }
                x = y;
            }
        }
        Ok(x)
    }

    /// Stages `0..=m`: input `[n·h·w, c0]` to hidden map `[n·h·w, c_m]`.
    pub fn encode_to_stage(&mut self, tape: &mut Tape, p: &Bound, x: Var, m: usize, domain: Domain, mode: Mode) -> Result<Var> {
        self.config.encoder.check_stage(m)?;
        self.check_rows(tape, x, self.config.encoder.in_channels, "encode_to_stage")?;
        let mut updates = Vec::new();
        let g = self.run_stages(tape, p, x, 0..m + 1, domain, mode, &mut updates)?;
        self.apply(updates);
        Ok(g)
    }

    /// Stages `m+1..` followed by global average pooling: `[n·h·w, c_m]` to `[n, d]`.
    pub fn encode_from_stage(&mut self, tape: &mut Tape, p: &Bound, g: Var, m: usize, domain: Domain, mode: Mode) -> Result<Var> {
        let mut updates = Vec::new();
        let f = self.encode_from_stage_with(tape, p, g, m, domain, mode, &mut updates)?;
        self.apply(updates);
        Ok(f)
    }

    #[allow(clippy::too_many_arguments)]
    fn encode_from_stage_with(
        &self,
        tape: &mut Tape,
        p: &Bound,
        g: Var,
        m: usize,
        domain: Domain,
        mode: Mode,
        updates: &mut StatUpdates,
    ) -> Result<Var> {
        let enc = &self.config.encoder;
        enc.check_stage(m)?;
        let n = self.check_rows(tape, g, enc.channels[m], "encode_from_stage")?;
        let h = self.run_stages(tape, p, g, m + 1..enc.num_stages(), domain, mode, updates)?;
        tape.pool_avg(h, n)
    }

    /// Full backbone: input batch to pooled features `[n, d]`.
    pub fn forward(&mut self, tape: &mut Tape, p: &Bound, x: Var, domain: Domain, mode: Mode) -> Result<Var> {
        let last = self.config.encoder.num_stages() - 1;
        let g = self.encode_to_stage(tape, p, x, last, domain, mode)?;
        self.encode_from_stage(tape, p, g, last, domain, mode)
    }

    fn classifier_bn(&self, tape: &mut Tape, p: &Bound, f: Var, domain: Domain, mode: Mode, updates: &mut StatUpdates) -> Result<Var> {
        let shape = tape.shape(f);
        let d = self.config.encoder.feature_dim();
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::Dimension { op: "classify", left: shape.to_vec(), right: vec![d] });
        }
        let (y, stats) = self.classifier.norm.forward(tape, p, f, domain, mode)?;
        if let Some(stats) = stats {
            updates.push((NormSlot::Classifier, domain, stats));
        }
        Ok(y)
    }

    /// Batch norm, the `C_s + C_t` linear map and a softmax: `[n, d]` to `[n, C_s + C_t]`.
    pub fn classify(&mut self, tape: &mut Tape, p: &Bound, f: Var, domain: Domain, mode: Mode) -> Result<Var> {
        let mut updates = Vec::new();
        let y = self.classifier_bn(tape, p, f, domain, mode, &mut updates)?;
        self.apply(updates);
        let ls = tape.matmul(y, p.var(self.classifier.source_weight))?;
        let lt = tape.matmul(y, p.var(self.classifier.target_weight))?;
        let logits = tape.concat_cols(ls, lt)?;
        Ok(tape.softmax_rows(logits))
    }

    /// Replaces the target columns of the classifier with `new_num_target`
    /// freshly drawn ones. Returns the id of the replaced parameter so the
    /// optimizer can drop its state.
    pub fn resize_classifier<R: Rng + ?Sized>(&mut self, new_num_target: usize, rng: &mut R) -> Result<ParamId> {
        if new_num_target < 1 {
            return Err(invalid("target class count must be at least 1"));
        }
        let d = self.config.encoder.feature_dim();
        let w = Tensor::matrix(d, new_num_target, gaussian_vec(rng, d * new_num_target, CLASSIFIER_INIT_STD))?;
        self.params.replace(self.classifier.target_weight, w);
        self.classifier.num_target = new_num_target;
        Ok(self.classifier.target_weight)
    }

    /// Test-time embeddings: eval-mode backbone, classifier batch norm, then
    /// L2 normalization. The IDM takes no part.
    ///
    /// `inputs` is `[N·h·w, c0]`; the result is `[N, d]`.
    pub fn extract_test_features(&self, inputs: &Tensor, domain: Domain) -> Result<Tensor> {
        const CHUNK: usize = 256;
        let enc = &self.config.encoder;
        let per = enc.input_len();
        if !inputs.len().is_multiple_of(per) || inputs.shape().last() != Some(&enc.in_channels) {
            return Err(Error::Dimension { op: "extract_test_features", left: inputs.shape().to_vec(), right: vec![enc.positions(), enc.in_channels] });
        }
        let count = inputs.len() / per;
        let d = enc.feature_dim();
        let mut out = Vec::with_capacity(count * d);
        let mut tape = Tape::new();
        for start in (0..count).step_by(CHUNK) {
            let end = (start + CHUNK).min(count);
            tape.clear();
            let chunk = Tensor::matrix((end - start) * enc.positions(), enc.in_channels, inputs.data()[start * per..end * per].to_vec())?;
            let p = self.params.bind(&mut tape);
            let x = tape.constant(&chunk);
            let mut scratch = Vec::new();
            let last = enc.num_stages() - 1;
            let g = self.run_stages(&mut tape, &p, x, 0..last + 1, domain, Mode::Eval, &mut scratch)?;
            let f = self.encode_from_stage_with(&mut tape, &p, g, last, domain, Mode::Eval, &mut scratch)?;
            let y = self.classifier_bn(&mut tape, &p, f, domain, Mode::Eval, &mut scratch)?;
            debug_assert!(scratch.is_empty());
            for row in tape.value(y).chunks(d) {
                let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
                let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
                out.extend(row.iter().map(|v| v * scale));
            }
        }
        Tensor::matrix(count, d, out)
    }

    /// Flat snapshot of parameters and running statistics, keyed by name.
    ///
    /// Names are prefixed by section: `encoder.`, `classifier.`, `norm.`, `idm.`.
    pub fn state(&self) -> ModelState {
        let mut entries: Vec<(String, Tensor)> = self
            .params
            .ids()
            .map(|id| (String::from(self.params.name(id)), self.params.get(id).clone()))
            .collect();
        let mut push_norm = |prefix: String, norm: &DomainNorm| {
            for (slot, domain) in [(0, "source"), (1, "target")] {
                entries.push((format!("norm.{prefix}.{domain}.mean"), Tensor::vector(norm.running[slot].mean.clone())));
                entries.push((format!("norm.{prefix}.{domain}.var"), Tensor::vector(norm.running[slot].var.clone())));
            }
        };
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(norm) = &stage.norm {
                push_norm(format!("stage{i}"), norm);
            }
        }
        push_norm(String::from("classifier"), &self.classifier.norm);
        ModelState { num_target_classes: self.classifier.num_target, entries }
    }

    /// Restores a snapshot produced by [`Model::state`] on a model built from
    /// the same config. Entries under `idm.` are ignored when this model has
    /// no IDM.
    pub fn load_state(&mut self, state: &ModelState) -> Result<()> {
        if state.num_target_classes == 0 {
            return Err(invalid("checkpoint has zero target classes"));
        }
        let d = self.config.encoder.feature_dim();
        self.classifier.num_target = state.num_target_classes;
        self.params.replace(self.classifier.target_weight, Tensor::zeros(vec![d, state.num_target_classes]));
        for (name, tensor) in &state.entries {
            if let Some(rest) = name.strip_prefix("norm.") {
                self.load_norm(rest, tensor)?;
                continue;
            }
            match self.params.find(name) {
                Some(id) => {
                    if self.params.get(id).shape() != tensor.shape() {
                        return Err(Error::Dimension { op: "load_state", left: self.params.get(id).shape().to_vec(), right: tensor.shape().to_vec() });
                    }
                    self.params.replace(id, tensor.clone());
                }
                None if name.starts_with("idm.") && self.idm.is_none() => {}
                None => return Err(invalid(format!("unknown checkpoint entry {name}"))),
            }
        }
        Ok(())
    }

    fn load_norm(&mut self, key: &str, tensor: &Tensor) -> Result<()> {
        let mut parts = key.split('.');
        let (Some(layer), Some(domain), Some(field), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(invalid(format!("malformed norm entry {key}")));
        };
        let norm = if layer == "classifier" {
            Some(&mut self.classifier.norm)
        } else {
            let i: usize = layer.strip_prefix("stage").and_then(|s| s.parse().ok()).ok_or_else(|| invalid(format!("malformed norm entry {key}")))?;
            self.stages.get_mut(i).and_then(|s| s.norm.as_mut())
        };
        let norm = norm.ok_or_else(|| invalid(format!("no norm layer for {key}")))?;
        let slot = match domain {
            "source" => 0,
            "target" => 1,
            _ => return Err(invalid(format!("malformed norm entry {key}"))),
        };
        let dst = match field {
            "mean" => &mut norm.running[slot].mean,
            "var" => &mut norm.running[slot].var,
            _ => return Err(invalid(format!("malformed norm entry {key}"))),
        };
        if dst.len() != tensor.len() {
            return Err(Error::Dimension { op: "load_state", left: vec![dst.len()], right: tensor.shape().to_vec() });
        }
        dst.copy_from_slice(tensor.data());
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub num_target_classes: usize,
    pub entries: Vec<(String, Tensor)>,
}
