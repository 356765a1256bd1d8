//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it never shares a
//! code path with the analytic gradients it checks.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::idm::{pair_batch, IdmConfig};
use crate::losses::{bridge_feat_loss, bridge_pred_loss, cls_loss, diversity_loss, total_loss, triplet_loss, LossParts, LossWeights, TripletMemory, STD_GRAD_EPS};
use crate::memory::MemoryQueue;
use crate::network::{Domain, EncoderConfig, Mode, Model, ModelConfig};
use crate::params::Bound;
use crate::rng::RunRng;

/// Acceptance bounds for a comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { rel_tol: 1e-4, abs_floor: 1e-7 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    /// `(absolute error, max(|analytic|, |numeric|))` per checked entry.
    errors: Vec<(f64, f64)>,
    /// Largest relative error among entries whose absolute error exceeds `1e-7`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradReport {
    pub fn entries(&self) -> usize {
        self.errors.len()
    }

    pub fn passes(&self, bounds: GradCheck) -> bool {
        self.errors
            .iter()
            .all(|&(abs, scale)| abs <= bounds.abs_floor || abs / scale < bounds.rel_tol)
    }

    pub fn merge(&mut self, other: &GradReport) {
        self.errors.extend_from_slice(&other.errors);
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
    }
}

/// Compares analytic gradients of `f` at `inputs` with central differences of step `h`.
///
/// `f` receives one differentiable `Var` per input tensor, in order, and must
/// return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, mut f: F) -> Result<GradReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.param(t)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    let floor = GradCheck::default().abs_floor;
    let mut report = GradReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        for k in 0..inputs[t].len() {
            let orig = inputs[t].data()[k];
            work[t].data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work[t].data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work[t].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let abs = (grads[k] - numeric).abs();
            let scale = grads[k].abs().max(numeric.abs());
            let rel = if abs <= floor { 0.0 } else { abs / scale };
            report.errors.push((abs, scale));
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
        }
    }
    Ok(report)
}

/// Finite-difference step used by [`suite`] for single operations.
pub const SUITE_STEP: f64 = 1e-5;
/// Step for the composed graph, whose many relu and selection kinks make a
/// smaller step less likely to straddle one.
pub const COMPOSED_STEP: f64 = 1e-6;

/// One named check of [`suite`].
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradReport,
}

fn uniform(rng: &mut RunRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches length")
}

/// Random row-stochastic `[n, 2]` factors bounded away from the simplex corners.
fn factors(rng: &mut RunRng, n: usize) -> Tensor {
    let data = (0..n).flat_map(|_| {
        let a = rng.random_range(0.1..0.9);
        [a, 1.0 - a]
    });
    Tensor::matrix(n, 2, data.collect()).expect("n rows of two")
}

fn probabilities(rng: &mut RunRng, n: usize, c: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        let row: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / total));
    }
    Tensor::matrix(n, c, data).expect("n rows of c")
}

/// Reduces a tensor-valued output to a scalar with fixed random weights so
/// every output entry contributes a distinct gradient.
fn project(tape: &mut Tape, y: Var, w: Var) -> Result<Var> {
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Gradient checks of every tape primitive, every loss and the composed
/// network, mixing module and objective, on inputs drawn from `seed`.
pub fn suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = RunRng::seed_from_u64(seed);
    let h = SUITE_STEP;
    let mut cases = Vec::new();
    let mut push = |name: &'static str, report: GradReport| cases.push(SuiteCase { name, report });
    let r = &mut rng;

    let (a, b, w) = (uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -1.0, 1.0));
    push("add", check_gradients(&[a.clone(), b.clone(), w.clone()], h, |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, v[2])
    })?);
    push("sub", check_gradients(&[a.clone(), b.clone(), w.clone()], h, |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, v[2])
    })?);
    push("mul", check_gradients(&[a.clone(), b.clone(), w.clone()], h, |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, v[2])
    })?);
    let s = r.random_range(-3.0..3.0);
    push("scale", check_gradients(&[a.clone(), w.clone()], h, |t, v| {
        let y = t.scale(v[0], s);
        project(t, y, v[1])
    })?);
    push("add_scalar", check_gradients(&[a.clone(), w.clone()], h, |t, v| {
        let y = t.add_scalar(v[0], s);
        let y = t.mul(y, y)?;
        project(t, y, v[1])
    })?);
    push("relu", check_gradients(&[a.clone(), w.clone()], h, |t, v| {
        let y = t.relu(v[0]);
        project(t, y, v[1])
    })?);
    let pos = uniform(r, &[3, 4], 0.2, 3.0);
    push("ln", check_gradients(&[pos.clone(), w.clone()], h, |t, v| {
        let y = t.ln(v[0]);
        project(t, y, v[1])
    })?);
    push("sum", check_gradients(core::slice::from_ref(&a), h, |t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.sum(y))
    })?);
    push("mean", check_gradients(core::slice::from_ref(&a), h, |t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.mean(y))
    })?);
    let (m1, m2, wm) = (uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[4, 2], -2.0, 2.0), uniform(r, &[3, 2], -1.0, 1.0));
    push("matmul", check_gradients(&[m1, m2, wm], h, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, v[2])
    })?);
    let row = uniform(r, &[4], -2.0, 2.0);
    push("add_row", check_gradients(&[a.clone(), row.clone(), w.clone()], h, |t, v| {
        let y = t.add_row(v[0], v[1])?;
        let y = t.mul(y, y)?;
        project(t, y, v[2])
    })?);
    push("mul_row", check_gradients(&[a.clone(), row.clone(), w.clone()], h, |t, v| {
        let y = t.mul_row(v[0], v[1])?;
        project(t, y, v[2])
    })?);
    push("softmax_rows", check_gradients(&[a.clone(), w.clone()], h, |t, v| {
        let y = t.softmax_rows(v[0]);
        project(t, y, v[1])
    })?);
    let (c1, c2, wc) = (uniform(r, &[3, 2], -2.0, 2.0), uniform(r, &[3, 3], -2.0, 2.0), uniform(r, &[3, 5], -1.0, 1.0));
    push("concat_cols", check_gradients(&[c1, c2, wc], h, |t, v| {
        let y = t.concat_cols(v[0], v[1])?;
        project(t, y, v[2])
    })?);
    // Two samples of 8 positions by 3 channels.
    let (maps, wp) = (uniform(r, &[16, 3], -2.0, 2.0), uniform(r, &[2, 3], -1.0, 1.0));
    push("pool_avg", check_gradients(&[maps.clone(), wp.clone()], h, |t, v| {
        let y = t.pool_avg(v[0], 2)?;
        project(t, y, v[1])
    })?);
    push("pool_max", check_gradients(&[maps.clone(), wp.clone()], h, |t, v| {
        let y = t.pool_max(v[0], 2)?;
        project(t, y, v[1])
    })?);
    let (xn, wn) = (uniform(r, &[6, 3], -2.0, 2.0), uniform(r, &[6, 3], -1.0, 1.0));
    push("normalize_batch", check_gradients(&[xn.clone(), wn.clone()], h, |t, v| {
        let (y, _) = t.normalize(v[0], None, 1e-5)?;
        project(t, y, v[1])
    })?);
    let mean: Vec<f64> = (0..3).map(|_| r.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..3).map(|_| r.random_range(0.5..2.0)).collect();
    push("normalize_running", check_gradients(&[xn, wn], h, |t, v| {
        let (y, _) = t.normalize(v[0], Some((&mean, &var)), 1e-5)?;
        project(t, y, v[1])
    })?);
    let rows = [2usize, 0, 2, 1];
    let wg = uniform(r, &[4, 4], -1.0, 1.0);
    push("gather_rows", check_gradients(&[a.clone(), wg], h, |t, v| {
        let y = t.gather_rows(v[0], &rows)?;
        project(t, y, v[1])
    })?);
    push("pick", check_gradients(core::slice::from_ref(&pos), h, |t, v| {
        let y = t.pick(v[0], &[3, 0, 2])?;
        let y = t.mul(y, y)?;
        Ok(t.sum(y))
    })?);
    let col = r.random_range(0..4);
    push("column", check_gradients(core::slice::from_ref(&a), h, |t, v| {
        let y = t.column(v[0], col)?;
        let y = t.mul(y, y)?;
        Ok(t.sum(y))
    })?);
    let (gains, wm2) = (uniform(r, &[2], -2.0, 2.0), uniform(r, &[16, 3], -1.0, 1.0));
    push("scale_groups", check_gradients(&[maps.clone(), gains, wm2.clone()], h, |t, v| {
        let y = t.scale_groups(v[0], v[1])?;
        project(t, y, v[2])
    })?);
    let other = uniform(r, &[16, 3], -2.0, 2.0);
    // Factors are differentiated through a softmax so perturbations stay on
    // the simplex, where the output clamp is inactive.
    let logits = uniform(r, &[2, 2], -2.0, 2.0);
    push("mix", check_gradients(&[maps.clone(), other, logits, wm2], h, |t, v| {
        let a = t.softmax_rows(v[2]);
        let y = t.mix(v[0], v[1], a)?;
        project(t, y, v[3])
    })?);
    let (da, db, wd) = (uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[2, 4], -2.0, 2.0), uniform(r, &[4], -1.0, 1.0));
    push("row_dist", check_gradients(&[da, db, wd], h, |t, v| {
        let y = t.row_dist(v[0], &[0, 1, 2, 2], v[1], &[1, 0, 0, 1])?;
        project(t, y, v[2])
    })?);
    let wr = uniform(r, &[3], -1.0, 1.0);
    push("row_norms", check_gradients(&[a.clone(), wr], h, |t, v| {
        let y = t.row_norms(v[0]);
        project(t, y, v[1])
    })?);
    push("std_pop", check_gradients(core::slice::from_ref(&a), h, |t, v| Ok(t.std_pop(v[0], STD_GRAD_EPS)))?);

    let (probs, n) = (probabilities(r, 4, 5), 4);
    let labels = [0usize, 3, 3, 1];
    push("cls_loss", check_gradients(core::slice::from_ref(&probs), h, |t, v| cls_loss(t, v[0], &labels))?);
    let tl = [0usize, 0, 1, 1, 2, 2];
    let mem = uniform(r, &[6, 4], -1.0, 1.0);
    let mem_labels = [0usize, 1, 1, 2, 0, 3];
    let mem_domains = [Domain::Source, Domain::Target, Domain::Source, Domain::Source, Domain::Target, Domain::Source];
    let feats = loop {
        let f = uniform(r, &[6, 4], -1.0, 1.0);
        // Every memory row of another domain or label is a candidate negative for the source anchors.
        let negatives: Vec<(&[f64], usize)> = (0..6).map(|i| (mem.row(i), if mem_domains[i] == Domain::Source { mem_labels[i] } else { usize::MAX })).collect();
        if away_from_kinks(&f, &tl, &[], 0.3) && away_from_kinks(&f, &tl, &negatives, 0.3) {
            break f;
        }
    };
    push("triplet", check_gradients(core::slice::from_ref(&feats), h, |t, v| Ok(triplet_loss(t, v[0], &tl, None, 0.3)?.loss))?);
    let mut queue = MemoryQueue::with_capacity(6);
    queue.enqueue_batch(mem.data(), 4, &mem_labels, &mem_domains, 1)?;
    push("triplet_memory", check_gradients(&[feats], h, |t, v| {
        let memory = TripletMemory { queue: &queue, domain: Domain::Source, epoch: 1 };
        Ok(triplet_loss(t, v[0], &tl, Some(memory), 0.3)?.loss)
    })?);
    let fa = factors(r, n);
    push("bridge_pred", check_gradients(&[probs, fa.clone()], h, |t, v| bridge_pred_loss(t, v[0], &[0, 1, 2, 0], &[3, 4, 4, 3], v[1]))?);
    let (fs, ft, fi) = (uniform(r, &[n, 4], -1.0, 1.0), uniform(r, &[n, 4], -1.0, 1.0), uniform(r, &[n, 4], -1.0, 1.0));
    push("bridge_feat", check_gradients(&[fs, ft, fi, fa.clone()], h, |t, v| bridge_feat_loss(t, v[0], v[1], v[2], v[3]))?);
    push("diversity", check_gradients(&[fa], h, |t, v| diversity_loss(t, v[0]))?);

    push("composed", composed(seed)?);
    Ok(cases)
}

/// Minimum gap between competing distances, and between a hinge argument
/// and zero, for a triplet instance to count as differentiable.
const KINK_GAP: f64 = 1e-3;

/// Whether the batch-hard selections and hinges of every anchor are stable
/// under perturbations far larger than a finite-difference step. `extra`
/// holds additional negative candidates with their labels.
fn away_from_kinks(f: &Tensor, labels: &[usize], extra: &[(&[f64], usize)], margin: f64) -> bool {
    let n = labels.len();
    let dist = |a: &[f64], b: &[f64]| libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum());
    let separated = |mut d: Vec<f64>| {
        d.sort_by(f64::total_cmp);
        d.windows(2).all(|w| w[1] - w[0] > KINK_GAP)
    };
    (0..n).all(|i| {
        let pos: Vec<f64> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).map(|j| dist(f.row(i), f.row(j))).collect();
        let mut neg: Vec<f64> = (0..n).filter(|&j| labels[j] != labels[i]).map(|j| dist(f.row(i), f.row(j))).collect();
        neg.extend(extra.iter().filter(|(_, l)| *l != labels[i]).map(|(row, _)| dist(f.row(i), row)));
        let hardest = pos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let nearest = neg.iter().copied().fold(f64::INFINITY, f64::min);
        separated(pos) && separated(neg) && (margin + hardest - nearest).abs() > KINK_GAP
    })
}

/// The full training objective of one iteration, differentiated with respect
/// to every model parameter and both input batches.
fn composed(seed: u64) -> Result<GradReport> {
    let mut rng = RunRng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let encoder = EncoderConfig { height: 4, width: 2, in_channels: 3, channels: vec![4, 6, 8], normalize: true };
    let stage = (seed % 3) as usize;
    let (cs, ct, n) = (3usize, 2usize, 4usize);
    let config = ModelConfig { encoder: encoder.clone(), num_source_classes: cs, idm: Some(IdmConfig { stage, reduction: 2 }) };
    let mut model = Model::new(config, seed)?;
    model.resize_classifier(ct, &mut rng)?;
    let idm = model.idm().expect("built with a mixing module").clone();
    let positions = encoder.positions();

    let mut ys = vec![0usize, 0, 1, 2];
    ys.shuffle(&mut rng);
    let yt_local = [0usize, 1, 0, 1];
    let yt: Vec<usize> = yt_local.iter().map(|l| l + cs).collect();
    let perm: Vec<usize> = pair_batch(n, n, &mut rng)?.into_iter().map(|(_, j)| j).collect();
    let yt_paired: Vec<usize> = perm.iter().map(|&j| yt[j]).collect();
    let rows: Vec<usize> = perm.iter().flat_map(|&j| j * positions..(j + 1) * positions).collect();

    let d = encoder.feature_dim();
    let mut queue = MemoryQueue::with_capacity(8);
    let mem = uniform(&mut rng, &[8, d], -0.5, 0.5);
    let domains = [Domain::Target, Domain::Source, Domain::Target, Domain::Source, Domain::Target, Domain::Source, Domain::Target, Domain::Source];
    queue.enqueue_batch(mem.data(), d, &[0, 1, 1, 2, 0, 0, 1, 2], &domains, 1)?;

    // Initialization puts every factor at almost exactly 1/2, where the
    // standard deviation of the factors has a kink; a generic point is drawn instead.
    let mut inputs: Vec<Tensor> = model.params().tensors().iter().map(|t| uniform(&mut rng, t.shape(), -1.0, 1.0)).collect();
    let k = inputs.len();
    inputs.push(uniform(&mut rng, &[n * positions, 3], -2.0, 2.0));
    inputs.push(uniform(&mut rng, &[n * positions, 3], -2.0, 2.0));
    let weights = LossWeights::default();

    check_gradients(&inputs, COMPOSED_STEP, |tape, v| {
        let p = Bound::from_vars(v[..k].to_vec());
        let (xs, xt) = (v[k], v[k + 1]);
        let gs = model.encode_to_stage(tape, &p, xs, stage, Domain::Source, Mode::Train)?;
        let gt = model.encode_to_stage(tape, &p, xt, stage, Domain::Target, Mode::Train)?;
        let fs = model.encode_from_stage(tape, &p, gs, stage, Domain::Source, Mode::Train)?;
        let ft = model.encode_from_stage(tape, &p, gt, stage, Domain::Target, Mode::Train)?;
        let ps = model.classify(tape, &p, fs, Domain::Source, Mode::Train)?;
        let pt = model.classify(tape, &p, ft, Domain::Target, Mode::Train)?;

        let gt_paired = tape.gather_rows(gt, &rows)?;
        let a = idm.domain_factors(tape, &p, gs, gt_paired, n)?;
        let g_inter = tape.mix(gs, gt_paired, a)?;
        let f_inter = model.encode_from_stage(tape, &p, g_inter, stage, Domain::Intermediate, Mode::Train)?;
        let p_inter = model.classify(tape, &p, f_inter, Domain::Intermediate, Mode::Train)?;
        let ft_paired = tape.gather_rows(ft, &perm)?;

        let mem_s = TripletMemory { queue: &queue, domain: Domain::Source, epoch: 1 };
        let mem_t = TripletMemory { queue: &queue, domain: Domain::Target, epoch: 1 };
        let tri_s = triplet_loss(tape, fs, &ys, Some(mem_s), weights.triplet_margin)?;
        let tri_t = triplet_loss(tape, ft, &yt_local, Some(mem_t), weights.triplet_margin)?;
        let cls_s = cls_loss(tape, ps, &ys)?;
        let cls_t = cls_loss(tape, pt, &yt)?;
        let parts = LossParts {
            cls: tape.add(cls_s, cls_t)?,
            triplet: tape.add(tri_s.loss, tri_t.loss)?,
            bridge_pred: Some(bridge_pred_loss(tape, p_inter, &ys, &yt_paired, a)?),
            bridge_feat: Some(bridge_feat_loss(tape, fs, ft_paired, f_inter, a)?),
            diversity: Some(diversity_loss(tape, a)?),
        };
        total_loss(tape, &parts, &weights)
    })
}
