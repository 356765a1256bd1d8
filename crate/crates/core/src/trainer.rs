//! Joint training: per-epoch clustering, per-iteration mixing and losses,
//! optimization, evaluation and parameter sweeps.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{generate, Dataset, PkBatch, PkSampler, SyntheticConfig, SyntheticData};
use crate::error::{invalid, Error, Result};
use crate::eval::{cmc_map, distance_matrix, EvalReport};
use crate::idm::{mix_with_ratio, pair_batch, sample_mix_ratio, IdmConfig, MixupKind};
use crate::losses::{bridge_feat_loss, bridge_pred_loss, cls_loss, diversity_loss, total_loss, triplet_loss, LossParts, LossWeights, TripletMemory};
use crate::memory::MemoryQueue;
use crate::network::{Domain, EncoderConfig, Mode, Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::Bound;
use crate::pseudo_label::{assign_pseudo_labels, ClusterAssignment, ClusterParams};
use crate::rng::{gaussian_vec, stream, RunRng, Stream};

/// How the intermediate stream is produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mixing {
    /// No intermediate stream.
    None,
    /// Learned domain factors.
    Idm,
    /// Random-ratio mixup with `Beta(α, α)` ratios, on inputs or plug-stage maps.
    Mixup { kind: MixupKind, alpha: f64 },
}

impl Mixing {
    pub fn name(&self) -> String {
        match self {
            Mixing::None => "none".to_string(),
            Mixing::Idm => "idm".to_string(),
            Mixing::Mixup { kind: MixupKind::Input, alpha } => format!("input:{alpha}"),
            Mixing::Mixup { kind: MixupKind::Manifold, alpha } => format!("manifold:{alpha}"),
        }
    }

    /// Parses `none`, `idm`, `input:<alpha>` or `manifold:<alpha>`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "none" => return Ok(Mixing::None),
            "idm" => return Ok(Mixing::Idm),
            _ => {}
        }
        let (kind, alpha) = s.split_once(':').ok_or_else(|| invalid(format!("unknown mixing `{s}`")))?;
        let kind = match kind {
            "input" => MixupKind::Input,
            "manifold" => MixupKind::Manifold,
            _ => return Err(invalid(format!("unknown mixing `{s}`"))),
        };
        let alpha: f64 = alpha.parse().map_err(|_| invalid(format!("bad mixup alpha in `{s}`")))?;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid(format!("mixup alpha must be positive in `{s}`")));
        }
        Ok(Mixing::Mixup { kind, alpha })
    }
}

/// Where target training labels come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSource {
    Clustering,
    /// Ground-truth target identities; an upper bound, not a UDA setting.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub lr: f64,
    /// Fractions of `epochs` after which the learning rate drops tenfold.
    pub lr_steps: [f64; 2],
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub mixing: Mixing,
    /// Build the IDM parameters even when `mixing` does not use them.
    pub idm_module: bool,
    pub stage: usize,
    pub reduction: usize,
    /// Memory size relative to the training set; `None` builds no memory.
    pub memory_ratio: Option<f64>,
    pub cluster: ClusterParams,
    pub labels: LabelSource,
    pub p: usize,
    pub k: usize,
    pub jitter_std: f64,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            iters_per_epoch: 50,
            lr: 3.5e-3,
            lr_steps: [0.4, 0.8],
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            mixing: Mixing::Idm,
            idm_module: true,
            stage: 0,
            reduction: 2,
            memory_ratio: Some(1.0),
            cluster: ClusterParams { k: 10, ..ClusterParams::default() },
            labels: LabelSource::Clustering,
            p: 4,
            k: 4,
            jitter_std: 0.0,
            encoder: EncoderConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.encoder.check_stage(self.stage)?;
        self.loss.validate()?;
        self.cluster.validate()?;
        if self.epochs == 0 || self.iters_per_epoch == 0 {
            return Err(invalid("epochs and iterations per epoch must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.lr_steps[0]) || !(self.lr_steps[0]..=1.0).contains(&self.lr_steps[1]) {
            return Err(invalid(format!("learning-rate step fractions must be ordered in [0, 1]: {:?}", self.lr_steps)));
        }
        if self.p == 0 || self.k == 0 {
            return Err(invalid("P and K must be positive"));
        }
        if self.reduction == 0 {
            return Err(invalid("IDM reduction ratio must be positive"));
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(invalid("jitter std must be finite and non-negative"));
        }
        if self.mixing == Mixing::Idm && !self.idm_module {
            return Err(invalid("IDM mixing requires the IDM module"));
        }
        if let Some(r) = self.memory_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(invalid(format!("memory ratio must lie in [0, 1], got {r}")));
            }
        }
        Ok(())
    }

    /// Last epoch (1-based) of each learning-rate phase but the final one.
    pub fn lr_boundaries(&self) -> [usize; 2] {
        let e = self.epochs as f64;
        self.lr_steps.map(|f| libm::round(f * e) as usize)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let [b1, b2] = self.lr_boundaries();
        if epoch <= b1 {
            self.lr
        } else if epoch <= b2 {
            self.lr / 10.0
        } else {
            self.lr / 100.0
        }
    }

    /// Model architecture implied by this config for a source set with `num_source_classes` identities.
    pub fn model_config(&self, num_source_classes: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            num_source_classes,
            idm: self.idm_module.then_some(IdmConfig { stage: self.stage, reduction: self.reduction }),
        }
    }
}

/// Mean of each loss term over the iterations of an epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossMeans {
    pub cls: f64,
    pub triplet: f64,
    pub bridge_pred: Option<f64>,
    pub bridge_feat: Option<f64>,
    pub diversity: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub num_clusters: usize,
    pub noise: usize,
    /// `None` when the epoch was skipped for lack of usable clusters.
    pub losses: Option<LossMeans>,
    /// Mean and population σ of the source factor over the epoch.
    pub factor: Option<(f64, f64)>,
    pub degenerate_triplets: usize,
    pub report: EvalReport,
}

/// Hook called after every completed epoch.
pub trait TrainObserver {
    fn epoch_end(&mut self, log: &EpochLog, trainer: &Trainer<'_>) -> Result<()>;
}

impl TrainObserver for () {
    fn epoch_end(&mut self, _: &EpochLog, _: &Trainer<'_>) -> Result<()> {
        Ok(())
    }
}

struct Rngs {
    source: RunRng,
    target: RunRng,
    pairing: RunRng,
    mixup: RunRng,
    jitter: RunRng,
    resize: RunRng,
}

/// Stateful training run over borrowed data.
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a SyntheticData,
    model: Model,
    optimizer: Adam,
    queue: Option<MemoryQueue>,
    rngs: Rngs,
    source_sampler: PkSampler,
    num_source_classes: usize,
    assignment: Option<ClusterAssignment>,
    epoch: usize,
    logs: Vec<EpochLog>,
}

struct Accumulator {
    sums: [f64; 6],
    present: [bool; 3],
    iters: usize,
    factors: Vec<f64>,
    degenerate: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a SyntheticData) -> Result<Self> {
        config.validate()?;
        let channels = config.encoder.in_channels;
        if data.source.input_len() != config.encoder.input_len() || data.target.input_len() != config.encoder.input_len() {
            return Err(Error::Dimension {
                op: "Trainer::new",
                left: vec![data.source.input_len(), data.target.input_len()],
                right: vec![config.encoder.positions(), channels],
            });
        }
        let mut ids = BTreeMap::new();
        let mut pairs = Vec::with_capacity(data.source.len());
        for i in 0..data.source.len() {
            let id = data.source.identity(i)?.ok_or_else(|| invalid("source set is not labelled"))?;
            let next = ids.len();
            pairs.push((i, *ids.entry(id).or_insert(next)));
        }
        let num_source_classes = ids.len();
        let model = Model::new(config.model_config(num_source_classes), config.seed)?;
        let queue = config.memory_ratio.map(|r| MemoryQueue::configure(r, data.source.len(), data.target.len())).transpose()?;
        let s = config.seed;
        let rngs = Rngs {
            source: stream(s, Stream::SourceSampling),
            target: stream(s, Stream::TargetSampling),
            pairing: stream(s, Stream::Pairing),
            mixup: stream(s, Stream::Mixup),
            jitter: stream(s, Stream::Jitter),
            resize: stream(s, Stream::ClassifierResize),
        };
        Ok(Self {
            optimizer: Adam::new(config.adam),
            config,
            data,
            model,
            queue,
            rngs,
            source_sampler: PkSampler::new(pairs),
            num_source_classes,
            assignment: None,
            epoch: 0,
            logs: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn queue(&self) -> Option<&MemoryQueue> {
        self.queue.as_ref()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn logs(&self) -> &[EpochLog] {
        &self.logs
    }

    /// Target assignment used by the most recent epoch.
    pub fn assignment(&self) -> Option<&ClusterAssignment> {
        self.assignment.as_ref()
    }

    fn target_labels(&mut self) -> Result<ClusterAssignment> {
        match self.config.labels {
            LabelSource::Clustering => {
                let inputs = self.data.target.all_inputs(self.config.encoder.in_channels)?;
                assign_pseudo_labels(&self.model, &inputs, &self.config.cluster)
            }
            LabelSource::GroundTruth => {
                let mut ids = BTreeMap::new();
                let labels = self
                    .data
                    .target
                    .true_identities()
                    .into_iter()
                    .map(|id| {
                        let next = ids.len();
                        Some(*ids.entry(id).or_insert(next))
                    })
                    .collect();
                Ok(ClusterAssignment { labels, num_clusters: ids.len() })
            }
        }
    }

    /// Runs the next epoch and returns its log.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        self.epoch += 1;
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        let assignment = match self.target_labels() {
            Ok(a) => Some(a),
            Err(Error::NoClusters { noise }) => {
                log::warn!("epoch {epoch}: all {noise} target samples are noise; skipping training this epoch (consider a larger eps or smaller min_pts)");
                None
            }
            Err(e) => return Err(e),
        };
        let (num_clusters, noise) = assignment.as_ref().map_or((0, self.data.target.len()), |a| (a.num_clusters, a.noise_count()));
        let mut losses = None;
        let mut factor = None;
        let mut degenerate = 0;
        if let Some(assignment) = &assignment {
            if num_clusters < self.config.p {
                log::warn!("epoch {epoch}: {num_clusters} clusters is fewer than P = {}; skipping training this epoch", self.config.p);
            } else {
                let id = self.model.resize_classifier(num_clusters, &mut self.rngs.resize)?;
                self.optimizer.reset(id);
                let target_sampler = PkSampler::new(assignment.labeled());
                let mut acc = Accumulator { sums: [0.0; 6], present: [false; 3], iters: 0, factors: Vec::new(), degenerate: 0 };
                let mut tape = Tape::new();
                for iter in 1..=self.config.iters_per_epoch {
                    tape.clear();
                    self.iteration(&mut tape, &target_sampler, lr, epoch, iter, &mut acc)?;
                }
                let n = acc.iters as f64;
                let opt = |i: usize| acc.present[i - 2].then(|| acc.sums[i] / n);
                losses = Some(LossMeans {
                    cls: acc.sums[0] / n,
                    triplet: acc.sums[1] / n,
                    bridge_pred: opt(2),
                    bridge_feat: opt(3),
                    diversity: opt(4),
                    total: acc.sums[5] / n,
                });
                if !acc.factors.is_empty() {
                    let m = acc.factors.len() as f64;
                    let mean = acc.factors.iter().sum::<f64>() / m;
                    let var = acc.factors.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / m;
                    factor = Some((mean, libm::sqrt(var)));
                }
                degenerate = acc.degenerate;
            }
        }
        self.assignment = assignment;
        let report = evaluate(&self.model, &self.data.query, &self.data.gallery)?;
        let log = EpochLog { epoch, lr, num_clusters, noise, losses, factor, degenerate_triplets: degenerate, report };
        self.logs.push(log.clone());
        Ok(log)
    }

    fn batch_inputs(&mut self, set: &Dataset, batch: &PkBatch) -> Result<Tensor> {
        let mut x = set.inputs(&batch.indices, self.config.encoder.in_channels)?;
        if self.config.jitter_std > 0.0 {
            let noise = gaussian_vec(&mut self.rngs.jitter, x.len(), self.config.jitter_std);
            x.data_mut().iter_mut().zip(noise).for_each(|(v, z)| *v += z);
        }
        Ok(x)
    }

    fn iteration(&mut self, tape: &mut Tape, target_sampler: &PkSampler, lr: f64, epoch: usize, iter: usize, acc: &mut Accumulator) -> Result<()> {
        let (p, k, m) = (self.config.p, self.config.k, self.config.stage);
        let sb = self.source_sampler.sample(p, k, &mut self.rngs.source)?;
        let tb = target_sampler.sample(p, k, &mut self.rngs.target)?;
        let n = sb.indices.len();
        let data = self.data;
        let xs = self.batch_inputs(&data.source, &sb)?;
        let xt = self.batch_inputs(&data.target, &tb)?;

        let params: Bound = self.model.bind(tape);
        let xs = tape.constant(&xs);
        let xt = tape.constant(&xt);
        let gs = self.model.encode_to_stage(tape, &params, xs, m, Domain::Source, Mode::Train)?;
        let gt = self.model.encode_to_stage(tape, &params, xt, m, Domain::Target, Mode::Train)?;
        let fs = self.model.encode_from_stage(tape, &params, gs, m, Domain::Source, Mode::Train)?;
        let ft = self.model.encode_from_stage(tape, &params, gt, m, Domain::Target, Mode::Train)?;
        let ps = self.model.classify(tape, &params, fs, Domain::Source, Mode::Train)?;
        let pt = self.model.classify(tape, &params, ft, Domain::Target, Mode::Train)?;

        let cs = self.num_source_classes;
        let ys = sb.labels.clone();
        let yt: Vec<usize> = tb.labels.iter().map(|l| l + cs).collect();

        let inter = self.intermediate(tape, &params, (xs, xt), (gs, gt), (fs, ft), n, &ys, &yt)?;

        if let Some(queue) = &mut self.queue {
            let d = self.config.encoder.feature_dim();
            let before = queue.total_enqueued();
            queue.enqueue_batch(tape.value(ft), d, &tb.labels, &vec![Domain::Target; n], epoch)?;
            queue.enqueue_batch(tape.value(fs), d, &sb.labels, &vec![Domain::Source; n], epoch)?;
            debug_assert_eq!(queue.total_enqueued() - before, 2 * n as u64);
        }
        let mem = |domain| self.queue.as_ref().map(|queue| TripletMemory { queue, domain, epoch });
        let margin = self.config.loss.triplet_margin;
        let tri_s = triplet_loss(tape, fs, &ys, mem(Domain::Source), margin)?;
        let tri_t = triplet_loss(tape, ft, &tb.labels, mem(Domain::Target), margin)?;
        acc.degenerate += usize::from(tri_s.degenerate) + usize::from(tri_t.degenerate);

        let cls_s = cls_loss(tape, ps, &ys)?;
        let cls_t = cls_loss(tape, pt, &yt)?;
        let parts = LossParts {
            cls: tape.add(cls_s, cls_t)?,
            triplet: tape.add(tri_s.loss, tri_t.loss)?,
            bridge_pred: inter.bridge_pred,
            bridge_feat: inter.bridge_feat,
            diversity: inter.diversity,
        };
        let total = total_loss(tape, &parts, &self.config.loss)?;
        let value = tape.scalar(total);
        if !value.is_finite() {
            return Err(Error::NonFinite { epoch, iter });
        }
        acc.iters += 1;
        acc.sums[0] += tape.scalar(parts.cls);
        acc.sums[1] += tape.scalar(parts.triplet);
        for (i, part) in [parts.bridge_pred, parts.bridge_feat, parts.diversity].into_iter().enumerate() {
            if let Some(v) = part {
                acc.sums[2 + i] += tape.scalar(v);
                acc.present[i] = true;
            }
        }
        acc.sums[5] += value;
        acc.factors.extend(inter.factors);

        tape.backward(total)?;
        let grads: Vec<Vec<f64>> = params.vars().iter().map(|&v| tape.grad(v)).collect();
        self.optimizer.step(self.model.params_mut(), &grads, lr)
    }

    #[allow(clippy::too_many_arguments)]
    fn intermediate(
        &mut self,
        tape: &mut Tape,
        params: &Bound,
        (xs, xt): (Var, Var),
        (gs, gt): (Var, Var),
        (fs, ft): (Var, Var),
        n: usize,
        ys: &[usize],
        yt: &[usize],
    ) -> Result<Intermediate> {
        let m = self.config.stage;
        let none = Intermediate { bridge_pred: None, bridge_feat: None, diversity: None, factors: Vec::new() };
        let (kind, alpha) = match self.config.mixing {
            Mixing::None => return Ok(none),
            Mixing::Idm => (None, 0.0),
            Mixing::Mixup { kind, alpha } => (Some(kind), alpha),
        };
        let pairs = pair_batch(n, n, &mut self.rngs.pairing)?;
        let perm: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
        let yt_paired: Vec<usize> = perm.iter().map(|&j| yt[j]).collect();
        let s = self.config.encoder.positions();
        let rows: Vec<usize> = perm.iter().flat_map(|&j| j * s..(j + 1) * s).collect();

        match kind {
            None => {
                let idm = self.model.idm().ok_or_else(|| invalid("IDM mixing requires the IDM module"))?.clone();
                let gt_paired = tape.gather_rows(gt, &rows)?;
                let a = idm.domain_factors(tape, params, gs, gt_paired, n)?;
                let g_inter = tape.mix(gs, gt_paired, a)?;
                let f_inter = self.model.encode_from_stage(tape, params, g_inter, m, Domain::Intermediate, Mode::Train)?;
                let p_inter = self.model.classify(tape, params, f_inter, Domain::Intermediate, Mode::Train)?;
                let ft_paired = tape.gather_rows(ft, &perm)?;
                let factors = tape.value(a).chunks(2).map(|r| r[0]).collect();
                Ok(Intermediate {
                    bridge_pred: Some(bridge_pred_loss(tape, p_inter, ys, &yt_paired, a)?),
                    bridge_feat: Some(bridge_feat_loss(tape, fs, ft_paired, f_inter, a)?),
                    diversity: Some(diversity_loss(tape, a)?),
                    factors,
                })
            }
            Some(kind) => {
                let lambda = sample_mix_ratio(alpha, &mut self.rngs.mixup)?;
                let f_inter = match kind {
                    MixupKind::Input => {
                        let xt_paired = tape.gather_rows(xt, &rows)?;
                        let x_inter = mix_with_ratio(tape, xs, xt_paired, lambda)?;
                        let last = self.config.encoder.num_stages() - 1;
                        let g = self.model.encode_to_stage(tape, params, x_inter, last, Domain::Intermediate, Mode::Train)?;
                        self.model.encode_from_stage(tape, params, g, last, Domain::Intermediate, Mode::Train)?
                    }
                    MixupKind::Manifold => {
                        let gt_paired = tape.gather_rows(gt, &rows)?;
                        let g_inter = mix_with_ratio(tape, gs, gt_paired, lambda)?;
                        self.model.encode_from_stage(tape, params, g_inter, m, Domain::Intermediate, Mode::Train)?
                    }
                };
                let p_inter = self.model.classify(tape, params, f_inter, Domain::Intermediate, Mode::Train)?;
                let a = crate::idm::DomainFactors::to_tensor(&vec![crate::idm::DomainFactors::new(lambda, 1.0 - lambda); n])?;
                let a = tape.constant(&a);
                Ok(Intermediate {
                    bridge_pred: Some(bridge_pred_loss(tape, p_inter, ys, &yt_paired, a)?),
                    bridge_feat: None,
                    diversity: None,
                    factors: vec![lambda; n],
                })
            }
        }
    }
}

struct Intermediate {
    bridge_pred: Option<Var>,
    bridge_feat: Option<Var>,
    diversity: Option<Var>,
    factors: Vec<f64>,
}

/// Outcome of a complete run.
pub struct TrainOutcome {
    pub model: Model,
    pub logs: Vec<EpochLog>,
}

/// Trains for `config.epochs` epochs, calling `observer` after each.
pub fn train(config: &TrainConfig, data: &SyntheticData, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), data)?;
    for _ in 0..config.epochs {
        let log = trainer.run_epoch()?;
        log::info!(
            "epoch {}: lr {:.2e}, {} clusters, {} noise, mAP {:.4}, R1 {:.4}",
            log.epoch,
            log.lr,
            log.num_clusters,
            log.noise,
            log.report.map,
            log.report.rank1()
        );
        observer.epoch_end(&log, &trainer)?;
    }
    let logs = trainer.logs.clone();
    Ok(TrainOutcome { model: trainer.into_model(), logs })
}

/// Retrieval metrics of `model` on a query/gallery split.
pub fn evaluate(model: &Model, query: &Dataset, gallery: &Dataset) -> Result<EvalReport> {
    if query.is_empty() || gallery.is_empty() {
        return Err(invalid("evaluation needs non-empty query and gallery sets"));
    }
    let c = model.encoder_config().in_channels;
    let fq = model.extract_test_features(&query.all_inputs(c)?, Domain::Target)?;
    let fg = model.extract_test_features(&gallery.all_inputs(c)?, Domain::Target)?;
    let dist = distance_matrix(&fq, &fg)?;
    cmc_map(&dist, &query.true_identities(), &gallery.true_identities(), &query.cameras(), &gallery.cameras())
}

/// Parameter varied by [`sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Mu1,
    Mu2,
    Mu3,
    Reduction,
    MemoryRatio,
    Stage,
    MixBaseline,
}

impl SweepParam {
    pub const ALL: [SweepParam; 7] = [
        SweepParam::Mu1,
        SweepParam::Mu2,
        SweepParam::Mu3,
        SweepParam::Reduction,
        SweepParam::MemoryRatio,
        SweepParam::Stage,
        SweepParam::MixBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Mu1 => "mu1",
            SweepParam::Mu2 => "mu2",
            SweepParam::Mu3 => "mu3",
            SweepParam::Reduction => "r",
            SweepParam::MemoryRatio => "R_M",
            SweepParam::Stage => "stage",
            SweepParam::MixBaseline => "mix_baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name().eq_ignore_ascii_case(s.trim())).ok_or_else(|| invalid(format!("unknown sweep parameter `{s}`")))
    }

    /// Copy of `base` with this parameter set to `value`.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        let real = || value.trim().parse::<f64>().map_err(|_| invalid(format!("{}: `{value}` is not a number", self.name())));
        let int = || value.trim().parse::<usize>().map_err(|_| invalid(format!("{}: `{value}` is not an integer", self.name())));
        match self {
            SweepParam::Mu1 => cfg.loss.mu1 = real()?,
            SweepParam::Mu2 => cfg.loss.mu2 = real()?,
            SweepParam::Mu3 => cfg.loss.mu3 = real()?,
            SweepParam::Reduction => cfg.reduction = int()?,
            SweepParam::MemoryRatio => cfg.memory_ratio = Some(real()?),
            SweepParam::Stage => cfg.stage = int()?,
            SweepParam::MixBaseline => cfg.mixing = Mixing::parse(value)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub param: &'static str,
    pub value: String,
    pub seed: u64,
    pub map: f64,
    pub rank1: f64,
}

/// One full run per value and seed; each seed drives both data generation
/// and training. Every configuration is validated before any run starts.
pub fn sweep(base: &TrainConfig, data: &SyntheticConfig, param: SweepParam, values: &[String], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let configs: Vec<TrainConfig> = values.iter().map(|v| param.apply(base, v)).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for (cfg, value) in configs.iter().zip(values) {
        for &seed in seeds {
            let set = generate(&SyntheticConfig { seed, ..data.clone() })?;
            let outcome = train(&TrainConfig { seed, ..cfg.clone() }, &set, &mut ())?;
            let last = outcome.logs.last().expect("at least one epoch").report.clone();
            rows.push(SweepRow { param: param.name(), value: value.clone(), seed, map: last.map, rank1: last.rank1() });
        }
    }
    Ok(rows)
}
