//! Intermediate domain module: learned domain factors and representation mixing.
//!
//! For a source/target pair of stage-`m` maps, both maps are average- and
//! max-pooled, each `[avg; max]` vector goes through a shared FC layer, the
//! two outputs are summed and passed through a two-layer MLP and a softmax,
//! giving factors `(a_s, a_t)`. The intermediate map is `a_s·G_s + a_t·G_t`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::gaussian_vec;

pub const IDM_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct IdmConfig {
    /// Stage after which the module is plugged.
    pub stage: usize,
    /// MLP reduction ratio; the hidden width is `ceil(c / reduction)`.
    pub reduction: usize,
}

impl Default for IdmConfig {
    fn default() -> Self {
        Self { stage: 0, reduction: 2 }
    }
}

/// Parameters of the module. Weight matrices are stored input-major
/// (`[in, out]`), i.e. transposed relative to the usual `W x` notation.
#[derive(Clone, Debug, PartialEq)]
pub struct Idm {
    fc1_weight: ParamId,
    fc1_bias: ParamId,
    mlp_weight1: ParamId,
    mlp_bias1: ParamId,
    mlp_weight2: ParamId,
    mlp_bias2: ParamId,
    channels: usize,
    hidden: usize,
    stage: usize,
}

/// The factor pair of one mixed sample pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainFactors {
    pub source: f64,
    pub target: f64,
}

impl DomainFactors {
    pub fn new(source: f64, target: f64) -> Self {
        Self { source, target }
    }

    /// Reads an `[n, 2]` factor matrix.
    pub fn from_rows(values: &[f64]) -> Vec<DomainFactors> {
        values.chunks(2).map(|r| DomainFactors::new(r[0], r[1])).collect()
    }

    /// Builds an `[n, 2]` constant factor matrix.
    pub fn to_tensor(factors: &[DomainFactors]) -> Result<Tensor> {
        Tensor::matrix(factors.len(), 2, factors.iter().flat_map(|f| [f.source, f.target]).collect())
    }
}

impl Idm {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamStore, config: &IdmConfig, channels: usize, rng: &mut R) -> Result<Self> {
        if config.reduction == 0 {
            return Err(invalid("IDM reduction ratio must be positive"));
        }
        let c = channels;
        let hidden = c.div_ceil(config.reduction);
        let mut weight = |name: &str, rows: usize, cols: usize, rng: &mut R| -> Result<ParamId> {
            let t = Tensor::matrix(rows, cols, gaussian_vec(rng, rows * cols, IDM_INIT_STD))?;
            Ok(params.add(format!("idm.{name}"), t))
        };
        let fc1_weight = weight("fc1.weight", 2 * c, c, rng)?;
        let mlp_weight1 = weight("mlp.weight1", c, hidden, rng)?;
        let mlp_weight2 = weight("mlp.weight2", hidden, 2, rng)?;
        let fc1_bias = params.add("idm.fc1.bias", Tensor::vector(vec![0.0; c]));
        let mlp_bias1 = params.add("idm.mlp.bias1", Tensor::vector(vec![0.0; hidden]));
        let mlp_bias2 = params.add("idm.mlp.bias2", Tensor::vector(vec![0.0; 2]));
        Ok(Self { fc1_weight, fc1_bias, mlp_weight1, mlp_bias1, mlp_weight2, mlp_bias2, channels: c, hidden, stage: config.stage })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [self.fc1_weight, self.fc1_bias, self.mlp_weight1, self.mlp_bias1, self.mlp_weight2, self.mlp_bias2]
    }

    fn fc1(&self, tape: &mut Tape, p: &Bound, g: Var, n: usize) -> Result<Var> {
        let avg = tape.pool_avg(g, n)?;
        let max = tape.pool_max(g, n)?;
        let cat = tape.concat_cols(avg, max)?;
        let h = tape.matmul(cat, p.var(self.fc1_weight))?;
        tape.add_row(h, p.var(self.fc1_bias))
    }

    /// Domain factors for `n` aligned pairs of `[n·h·w, c]` maps; returns `[n, 2]`
    /// with columns `(a_s, a_t)`.
    pub fn domain_factors(&self, tape: &mut Tape, p: &Bound, gs: Var, gt: Var, n: usize) -> Result<Var> {
        let (ss, st) = (tape.shape(gs), tape.shape(gt));
        if ss != st || ss.len() != 2 || ss[1] != self.channels {
            return Err(Error::Dimension { op: "domain_factors", left: ss.to_vec(), right: st.to_vec() });
        }
        let hs = self.fc1(tape, p, gs, n)?;
        let ht = self.fc1(tape, p, gt, n)?;
        let h = tape.add(hs, ht)?;
        let h = tape.matmul(h, p.var(self.mlp_weight1))?;
        let h = tape.add_row(h, p.var(self.mlp_bias1))?;
        let h = tape.relu(h);
        let logits = tape.matmul(h, p.var(self.mlp_weight2))?;
        let logits = tape.add_row(logits, p.var(self.mlp_bias2))?;
        Ok(tape.softmax_rows(logits))
    }
}

/// `G_inter = a_s·G_s + a_t·G_t` per pair, with `a` an `[n, 2]` factor matrix.
pub fn mix_representations(tape: &mut Tape, gs: Var, gt: Var, a: Var) -> Result<Var> {
    tape.mix(gs, gt, a)
}

/// Random perfect matching of source and target batch slots.
///
/// Pair `i` is `(i, perm[i])`: every source and every target index appears
/// exactly once.
pub fn pair_batch<R: Rng + ?Sized>(num_source: usize, num_target: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if num_source != num_target {
        return Err(Error::BatchComposition { sources: num_source, targets: num_target });
    }
    let mut perm: Vec<usize> = (0..num_target).collect();
    perm.shuffle(rng);
    Ok(perm.into_iter().enumerate().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixupKind {
    /// Mixes raw inputs.
    Input,
    /// Mixes hidden maps at the plug stage.
    Manifold,
}

/// Draws an interpolation ratio `λ ~ Beta(α, α)`.
pub fn sample_mix_ratio<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(invalid(format!("mixup alpha must be positive, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| invalid(format!("beta distribution: {e}")))?;
    Ok(beta.sample(rng))
}

/// Fixed-ratio mix `λ·first + (1−λ)·second` of two equal-shaped tensors.
pub fn mix_with_ratio(tape: &mut Tape, first: Var, second: Var, lambda: f64) -> Result<Var> {
    let n = tape.shape(first).first().copied().unwrap_or(1);
    let a = DomainFactors::to_tensor(&vec![DomainFactors::new(lambda, 1.0 - lambda); n])?;
    let a = tape.constant(&a);
    tape.mix(first, second, a)
}

/// Mixup / manifold-mixup baseline: random ratio, no learned factors.
///
/// `first` and `second` are inputs (for [`MixupKind::Input`]) or stage maps
/// (for [`MixupKind::Manifold`]); the operation is the same, the kind only
/// documents where the caller took them from. Returns the mixed tensor and `λ`.
pub fn baseline_mix<R: Rng + ?Sized>(
    _kind: MixupKind,
    alpha: f64,
    tape: &mut Tape,
    first: Var,
    second: Var,
    rng: &mut R,
) -> Result<(Var, f64)> {
    let lambda = sample_mix_ratio(alpha, rng)?;
    Ok((mix_with_ratio(tape, first, second, lambda)?, lambda))
}
