//! Training objectives: classification, batch-hard triplet, the two bridge
//! losses, the diversity loss and their weighted sum.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{euclidean, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::memory::MemoryQueue;
use crate::network::Domain;

/// Regularizer under the square root in the standard deviation's derivative.
///
/// It only has to keep `0 / 0` away at exactly zero spread, where the
/// numerator vanishes too; anything larger biases the derivative whenever the
/// factors spread by less than its square root.
pub const STD_GRAD_EPS: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Bridge loss in prediction space; `1 − mu1` weights classification.
    pub mu1: f64,
    /// Bridge loss in feature space.
    pub mu2: f64,
    /// Diversity loss.
    pub mu3: f64,
    pub triplet_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mu1: 0.7, mu2: 0.1, mu3: 1.0, triplet_margin: 0.3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mu1, self.mu2, self.mu3, self.triplet_margin];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if self.mu1 >= 1.0 {
            return Err(invalid(format!("mu1 must lie in [0, 1), got {}", self.mu1)));
        }
        Ok(())
    }
}

fn check_labels(tape: &Tape, probs: Var, labels: &[usize], op: &'static str) -> Result<usize> {
    let shape = tape.shape(probs);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Dimension { op, left: shape.to_vec(), right: vec![labels.len()] });
    }
    let classes = shape[1];
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    Ok(classes)
}

/// Mean negative log-probability of the labelled class.
///
/// `labels` are indices into the hybrid classifier's output, with target
/// pseudo labels already offset by the source class count.
pub fn cls_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    check_labels(tape, probs, labels, "cls_loss")?;
    let p = tape.pick(probs, labels)?;
    let lp = tape.ln(p);
    let m = tape.mean(lp);
    Ok(tape.scale(m, -1.0))
}

/// Memory context for one triplet evaluation.
#[derive(Clone, Copy, Debug)]
pub struct TripletMemory<'a> {
    pub queue: &'a MemoryQueue,
    /// Domain of the anchors (the batch being scored).
    pub domain: Domain,
    pub epoch: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct TripletOutput {
    pub loss: Var,
    pub valid_anchors: usize,
    /// Set when no anchor had both a positive and a negative; the loss is then zero.
    pub degenerate: bool,
}

enum Negative {
    Batch(usize),
    Memory(usize),
}

/// Batch-hard triplet loss over `[n, d]` features with Euclidean distances.
///
/// Per anchor: the farthest same-label sample in the batch and the nearest
/// different-label sample among the batch and the memory candidates, hinged
/// with `margin`, averaged over anchors that have both. Ties go to the lowest
/// index, and to the batch over the memory. Memory rows enter as constants.
pub fn triplet_loss(tape: &mut Tape, features: Var, labels: &[usize], memory: Option<TripletMemory<'_>>, margin: f64) -> Result<TripletOutput> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Dimension { op: "triplet_loss", left: shape, right: vec![labels.len()] });
    }
    let (n, d) = (shape[0], shape[1]);
    let values = tape.value(features).to_vec();
    let row = |i: usize| &values[i * d..(i + 1) * d];

    let mut batch_triplets = (Vec::new(), Vec::new(), Vec::new());
    let mut memory_triplets = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let mut positive: Option<(usize, f64)> = None;
        let mut negative: Option<(Negative, f64)> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            let dist = euclidean(row(i), row(j));
            if labels[j] == labels[i] {
                if positive.as_ref().is_none_or(|&(_, best)| dist > best) {
                    positive = Some((j, dist));
                }
            } else if negative.as_ref().is_none_or(|(_, best)| dist < *best) {
                negative = Some((Negative::Batch(j), dist));
            }
        }
        if let Some(mem) = memory {
            for k in mem.queue.negatives_for(labels[i], mem.domain, mem.epoch) {
                let entry = mem.queue.get(k).expect("index from negatives_for");
                if entry.feature.len() != d {
                    return Err(Error::Dimension { op: "triplet_loss", left: vec![d], right: vec![entry.feature.len()] });
                }
                let dist = euclidean(row(i), &entry.feature);
                if negative.as_ref().is_none_or(|(_, best)| dist < *best) {
                    negative = Some((Negative::Memory(k), dist));
                }
            }
        }
        let (Some((p, _)), Some((neg, _))) = (positive, negative) else { continue };
        match neg {
            Negative::Batch(j) => {
                batch_triplets.0.push(i);
                batch_triplets.1.push(p);
                batch_triplets.2.push(j);
            }
            Negative::Memory(k) => {
                memory_triplets.0.push(i);
                memory_triplets.1.push(p);
                memory_triplets.2.push(k);
            }
        }
    }

    let valid = batch_triplets.0.len() + memory_triplets.0.len();
    if valid == 0 {
        log::warn!("triplet loss: no anchor has both a positive and a negative; loss is zero");
        let zero = tape.constant(&Tensor::scalar(0.0));
        return Ok(TripletOutput { loss: zero, valid_anchors: 0, degenerate: true });
    }

    let mut hinge_sums = Vec::with_capacity(2);
    if !batch_triplets.0.is_empty() {
        let (a, p, ng) = &batch_triplets;
        let dap = tape.row_dist(features, a, features, p)?;
        let dan = tape.row_dist(features, a, features, ng)?;
        hinge_sums.push(hinge_sum(tape, dap, dan, margin)?);
    }
    if !memory_triplets.0.is_empty() {
        let (a, p, ks) = &memory_triplets;
        let bank: Vec<f64> = ks
            .iter()
            .flat_map(|&k| memory.expect("memory triplets need a queue").queue.get(k).expect("memory index").feature.iter().copied())
            .collect();
        let bank = tape.constant(&Tensor::matrix(ks.len(), d, bank)?);
        let rows: Vec<usize> = (0..ks.len()).collect();
        let dap = tape.row_dist(features, a, features, p)?;
        let dan = tape.row_dist(features, a, bank, &rows)?;
        hinge_sums.push(hinge_sum(tape, dap, dan, margin)?);
    }
    let total = match hinge_sums[..] {
        [only] => only,
        [x, y] => tape.add(x, y)?,
        _ => unreachable!(),
    };
    let loss = tape.scale(total, 1.0 / valid as f64);
    Ok(TripletOutput { loss, valid_anchors: valid, degenerate: false })
}

fn hinge_sum(tape: &mut Tape, dap: Var, dan: Var, margin: f64) -> Result<Var> {
    let diff = tape.sub(dap, dan)?;
    let shifted = tape.add_scalar(diff, margin);
    let h = tape.relu(shifted);
    Ok(tape.sum(h))
}

fn factor_columns(tape: &mut Tape, factors: Var, n: usize, op: &'static str) -> Result<(Var, Var)> {
    let shape = tape.shape(factors);
    if shape != [n, 2] {
        return Err(Error::Dimension { op, left: shape.to_vec(), right: vec![n, 2] });
    }
    Ok((tape.column(factors, 0)?, tape.column(factors, 1)?))
}

/// Factor-weighted cross-entropy of the intermediate predictions against
/// both endpoint labels:
/// `−(1/n) Σ_i [a_s,i · log p_i(y_s,i) + a_t,i · log p_i(y_t,i)]`.
pub fn bridge_pred_loss(tape: &mut Tape, probs_inter: Var, source_labels: &[usize], target_labels: &[usize], factors: Var) -> Result<Var> {
    check_labels(tape, probs_inter, source_labels, "bridge_pred_loss")?;
    check_labels(tape, probs_inter, target_labels, "bridge_pred_loss")?;
    let (a_s, a_t) = factor_columns(tape, factors, source_labels.len(), "bridge_pred_loss")?;
    let ps = tape.pick(probs_inter, source_labels)?;
    let pt = tape.pick(probs_inter, target_labels)?;
    let ls = tape.ln(ps);
    let lt = tape.ln(pt);
    let ws = tape.mul(a_s, ls)?;
    let wt = tape.mul(a_t, lt)?;
    let both = tape.add(ws, wt)?;
    let m = tape.mean(both);
    Ok(tape.scale(m, -1.0))
}

/// Factor-weighted Euclidean distances from each intermediate feature to its
/// two endpoint features: `(1/n) Σ_i [a_s,i ‖f_s,i − f_i‖ + a_t,i ‖f_t,i − f_i‖]`.
pub fn bridge_feat_loss(tape: &mut Tape, source: Var, target: Var, inter: Var, factors: Var) -> Result<Var> {
    let s = tape.shape(source).to_vec();
    for other in [target, inter] {
        if tape.shape(other) != s.as_slice() {
            return Err(Error::Dimension { op: "bridge_feat_loss", left: s, right: tape.shape(other).to_vec() });
        }
    }
    if s.len() != 2 {
        return Err(Error::Rank { op: "bridge_feat_loss", shape: s });
    }
    let (a_s, a_t) = factor_columns(tape, factors, s[0], "bridge_feat_loss")?;
    let ds = tape.sub(source, inter)?;
    let dt = tape.sub(target, inter)?;
    let ns = tape.row_norms(ds);
    let nt = tape.row_norms(dt);
    let ws = tape.mul(a_s, ns)?;
    let wt = tape.mul(a_t, nt)?;
    let both = tape.add(ws, wt)?;
    Ok(tape.mean(both))
}

/// `−[σ({a_s,i}) + σ({a_t,i})]` with population standard deviations.
pub fn diversity_loss(tape: &mut Tape, factors: Var) -> Result<Var> {
    let n = tape.shape(factors).first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::BatchTooSmall { op: "diversity_loss", needed: 2, got: n });
    }
    let (a_s, a_t) = factor_columns(tape, factors, n, "diversity_loss")?;
    let ss = tape.std_pop(a_s, STD_GRAD_EPS);
    let st = tape.std_pop(a_t, STD_GRAD_EPS);
    let sum = tape.add(ss, st)?;
    Ok(tape.scale(sum, -1.0))
}

/// Components of the overall objective. Classification and triplet terms are
/// already summed over the source and target batches.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub cls: Var,
    pub triplet: Var,
    pub bridge_pred: Option<Var>,
    pub bridge_feat: Option<Var>,
    pub diversity: Option<Var>,
}

/// `(1 − μ1)·L_cls + L_tri + μ1·L_bridge_pred + μ2·L_bridge_feat + μ3·L_div`.
///
/// Absent terms are dropped. Without a prediction bridge the classification
/// term keeps its full weight, which leaves the plain re-ID objective
/// `L_cls + L_tri`.
pub fn total_loss(tape: &mut Tape, parts: &LossParts, weights: &LossWeights) -> Result<Var> {
    let cls_weight = if parts.bridge_pred.is_some() { 1.0 - weights.mu1 } else { 1.0 };
    let cls = tape.scale(parts.cls, cls_weight);
    let mut total = tape.add(cls, parts.triplet)?;
    for (part, w) in [(parts.bridge_pred, weights.mu1), (parts.bridge_feat, weights.mu2), (parts.diversity, weights.mu3)] {
        if let Some(v) = part {
            let scaled = tape.scale(v, w);
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::idm::DomainFactors;
    use crate::rng::RunRng;
    use rand::{Rng, SeedableRng};

    fn probs(tape: &mut Tape, rows: &[&[f64]]) -> Var {
        let c = rows[0].len();
        let t = Tensor::matrix(rows.len(), c, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap();
        tape.constant(&t)
    }

    fn factors(tape: &mut Tape, f: &[(f64, f64)]) -> Var {
        let f: Vec<DomainFactors> = f.iter().map(|&(s, t)| DomainFactors::new(s, t)).collect();
        tape.constant(&DomainFactors::to_tensor(&f).unwrap())
    }

    #[test]
    fn cls_loss_examples() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[&[1.0, 0.0, 0.0]]);
        let l = cls_loss(&mut tape, p, &[0]).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let k = 4.0;
        let p = probs(&mut tape, &[&[0.25; 4], &[0.25; 4]]);
        let l = cls_loss(&mut tape, p, &[1, 3]).unwrap();
        assert!((tape.scalar(l) - libm::log(k)).abs() < 1e-15);
        assert_eq!(cls_loss(&mut tape, p, &[1, 4]).unwrap_err(), Error::Label { label: 4, classes: 4 });
    }

    #[test]
    fn cls_loss_gradient() {
        let mut rng = RunRng::seed_from_u64(1);
        let logits = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let r = check_gradients(&[logits], 1e-5, |t, v| {
            let p = t.softmax_rows(v[0]);
            cls_loss(t, p, &[0, 3, 1])
        })
        .unwrap();
        assert!(r.passes(GradCheck::default()), "{r:?}");
    }

    #[test]
    fn triplet_examples() {
        let mut tape = Tape::new();
        // Two tight clusters 10 apart.
        let f = tape.constant(&Tensor::matrix(4, 1, vec![0.0, 0.1, 10.0, 10.1]).unwrap());
        let out = triplet_loss(&mut tape, f, &[0, 0, 1, 1], None, 0.3).unwrap();
        assert_eq!(tape.scalar(out.loss), 0.0);
        assert_eq!(out.valid_anchors, 4);

        // Anchor at 0, positive at 1.0, negative at 0.5: 1.0 − 0.5 + 0.3.
        let f = tape.constant(&Tensor::matrix(3, 1, vec![0.0, 1.0, 0.5]).unwrap());
        let out = triplet_loss(&mut tape, f, &[0, 0, 1], None, 0.3).unwrap();
        // Anchor 0: 0.8; anchor 1 (pos 1.0, neg 0.5): 0.8; anchor 2 has no positive.
        assert_eq!(out.valid_anchors, 2);
        assert!((tape.scalar(out.loss) - 0.8).abs() < 1e-15);

        let f = tape.constant(&Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        let out = triplet_loss(&mut tape, f, &[0, 1], None, 0.3).unwrap();
        assert!(out.degenerate);
        assert_eq!(tape.scalar(out.loss), 0.0);
    }

    #[test]
    fn triplet_memory_negative_and_no_gradient_into_memory() {
        let mut q = MemoryQueue::with_capacity(4);
        q.enqueue_batch(&[0.2], 1, &[7], &[Domain::Source], 1).unwrap();
        let mut tape = Tape::new();
        let f = tape.param(&Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        let mem = TripletMemory { queue: &q, domain: Domain::Source, epoch: 1 };
        let out = triplet_loss(&mut tape, f, &[0, 0], Some(mem), 0.3).unwrap();
        // Anchor 0: 1.0 − 0.2 + 0.3 = 1.1; anchor 1: 1.0 − 0.8 + 0.3 = 0.5.
        assert!((tape.scalar(out.loss) - 0.8).abs() < 1e-15);
        tape.backward(out.loss).unwrap();
        // Anchor 0's memory negative passes no gradient anywhere but into anchor 0.
        assert_eq!(tape.grad(f), vec![-0.5, 0.5]);
    }

    #[test]
    fn triplet_gradient() {
        let mut rng = RunRng::seed_from_u64(2);
        let f = Tensor::matrix(6, 3, (0..18).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let r = check_gradients(&[f], 1e-5, |t, v| Ok(triplet_loss(t, v[0], &[0, 0, 1, 1, 2, 2], None, 0.3)?.loss)).unwrap();
        assert!(r.passes(GradCheck::default()), "{r:?}");
    }

    #[test]
    fn bridge_pred_examples() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[&[0.1, 0.6, 0.3]]);
        let a = factors(&mut tape, &[(1.0, 0.0)]);
        let l = bridge_pred_loss(&mut tape, p, &[1], &[2], a).unwrap();
        let ce = cls_loss(&mut tape, p, &[1]).unwrap();
        assert_eq!(tape.scalar(l), tape.scalar(ce));

        let p = probs(&mut tape, &[&[0.2; 5]]);
        let a = factors(&mut tape, &[(0.5, 0.5)]);
        let l = bridge_pred_loss(&mut tape, p, &[0], &[4], a).unwrap();
        assert!((tape.scalar(l) - libm::log(5.0)).abs() < 1e-15);
        assert!(matches!(bridge_pred_loss(&mut tape, p, &[0], &[5], a), Err(Error::Label { .. })));
    }

    #[test]
    fn bridge_feat_examples() {
        let mut tape = Tape::new();
        let same = tape.constant(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let a = factors(&mut tape, &[(0.3, 0.7), (0.9, 0.1)]);
        let l = bridge_feat_loss(&mut tape, same, same, same, a).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        let fs = tape.constant(&Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let ft = tape.constant(&Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap());
        let fi = tape.constant(&Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let a = factors(&mut tape, &[(0.5, 0.5)]);
        let l = bridge_feat_loss(&mut tape, fs, ft, fi, a).unwrap();
        assert_eq!(tape.scalar(l), 1.0);

        let bad = tape.constant(&Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        assert!(matches!(bridge_feat_loss(&mut tape, fs, bad, fi, a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn bridge_gradients() {
        let mut rng = RunRng::seed_from_u64(3);
        let mut r = || Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let (x, fs, ft, fi) = (r(), r(), r(), r());
        let al = Tensor::matrix(3, 2, vec![0.3, -0.2, 1.1, 0.4, -0.5, 0.9]).unwrap();
        let rep = check_gradients(&[x, al.clone()], 1e-5, |t, v| {
            let p = t.softmax_rows(v[0]);
            let a = t.softmax_rows(v[1]);
            bridge_pred_loss(t, p, &[0, 1, 2], &[3, 3, 0], a)
        })
        .unwrap();
        assert!(rep.passes(GradCheck::default()), "{rep:?}");
        let rep = check_gradients(&[fs, ft, fi, al], 1e-5, |t, v| {
            let a = t.softmax_rows(v[3]);
            bridge_feat_loss(t, v[0], v[1], v[2], a)
        })
        .unwrap();
        assert!(rep.passes(GradCheck::default()), "{rep:?}");
    }

    #[test]
    fn diversity_examples() {
        let mut tape = Tape::new();
        let a = factors(&mut tape, &[(0.4, 0.6); 3]);
        let l = diversity_loss(&mut tape, a).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let a = factors(&mut tape, &[(0.0, 1.0), (1.0, 0.0)]);
        let l = diversity_loss(&mut tape, a).unwrap();
        assert_eq!(tape.scalar(l), -1.0);
        let one = factors(&mut tape, &[(0.5, 0.5)]);
        assert!(matches!(diversity_loss(&mut tape, one), Err(Error::BatchTooSmall { .. })));
    }

    #[test]
    fn diversity_gradient_finite_at_zero_spread() {
        let mut tape = Tape::new();
        let a = tape.param(&DomainFactors::to_tensor(&[DomainFactors::new(0.5, 0.5); 4]).unwrap());
        let l = diversity_loss(&mut tape, a).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(a).iter().all(|g| g.is_finite()));
    }

    #[test]
    fn total_loss_combinations() {
        let mut tape = Tape::new();
        let mut s = |v: f64| tape.constant(&Tensor::scalar(v));
        let parts = LossParts { cls: s(1.5), triplet: s(0.4), bridge_pred: Some(s(2.0)), bridge_feat: Some(s(3.0)), diversity: Some(s(-0.2)) };
        let zero = LossWeights { mu1: 0.0, mu2: 0.0, mu3: 0.0, triplet_margin: 0.3 };
        let l = total_loss(&mut tape, &parts, &zero).unwrap();
        assert_eq!(tape.scalar(l), 1.5 + 0.4);
        let l = total_loss(&mut tape, &parts, &LossWeights { mu1: 1.0, ..zero }).unwrap();
        assert_eq!(tape.scalar(l), 0.4 + 2.0);
        let w = LossWeights::default();
        let l = total_loss(&mut tape, &parts, &w).unwrap();
        let expected = (1.0 - 0.7) * 1.5 + 0.4 + 0.7 * 2.0 + 0.1 * 3.0 + 1.0 * -0.2;
        assert!((tape.scalar(l) - expected).abs() < 1e-15);
        let reid_only = LossParts { bridge_pred: None, bridge_feat: None, diversity: None, ..parts };
        let l = total_loss(&mut tape, &reid_only, &w).unwrap();
        assert_eq!(tape.scalar(l), 1.5 + 0.4);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { mu1: 1.0, ..LossWeights::default() }.validate().is_err());
        assert!(LossWeights { mu2: -0.1, ..LossWeights::default() }.validate().is_err());
        assert!(LossWeights { mu3: f64::NAN, ..LossWeights::default() }.validate().is_err());
    }
}
