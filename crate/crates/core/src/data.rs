//! Synthetic two-domain data and the identity-balanced PK sampler.
//!
//! Every sample is an `h × w × c0` tensor built from an identity prototype, a
//! camera offset, per-sample noise and a random combination of a few shared
//! nuisance channel patterns (the same pattern at every position, like a
//! global lighting change). Target samples additionally pass
//! through a per-position channel map `x ↦ (I + gap·R) x + gap·b`, so `gap`
//! controls the distance between the two domains.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::network::Domain;
use crate::rng::{gaussian_vec, stream, RunRng, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Training identities per domain; the two label spaces never overlap.
    pub num_identities: usize,
    /// Identities reserved for the target query/gallery split.
    pub num_test_identities: usize,
    pub samples_per_identity: usize,
    pub num_cameras: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub prototype_std: f64,
    pub camera_std: f64,
    pub noise_std: f64,
    /// Number of shared nuisance channel patterns.
    pub nuisance_dims: usize,
    /// Standard deviation of each sample's nuisance coefficients.
    pub nuisance_std: f64,
    /// Deviation of the target channel map from the identity.
    pub gap: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_identities: 20,
            num_test_identities: 40,
            samples_per_identity: 12,
            num_cameras: 3,
            height: 4,
            width: 2,
            channels: 8,
            prototype_std: 1.0,
            camera_std: 0.35,
            noise_std: 0.35,
            nuisance_dims: 2,
            nuisance_std: 1.0,
            gap: 0.8,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn input_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_cameras < 2 {
            return Err(invalid(format!(
                "{} camera(s) configured; cross-camera evaluation needs at least 2",
                self.num_cameras
            )));
        }
        if self.num_identities == 0 || self.num_test_identities == 0 || self.input_len() == 0 {
            return Err(invalid("identity counts and tensor dimensions must be positive"));
        }
        if self.samples_per_identity < self.num_cameras + 1 {
            return Err(invalid(format!(
                "need at least {} samples per identity so every query keeps a cross-camera gallery match",
                self.num_cameras + 1
            )));
        }
        let stds = [self.prototype_std, self.camera_std, self.noise_std, self.nuisance_std, self.gap];
        if stds.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("standard deviations and gap must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One sample. The true identity is private to this module; see
/// [`Dataset::identity`] and [`Dataset::true_identity`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    input: Vec<f64>,
    identity: usize,
    camera: usize,
}

impl Sample {
    pub fn new(input: Vec<f64>, identity: usize, camera: usize) -> Self {
        Self { input, identity, camera }
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn camera(&self) -> usize {
        self.camera
    }
}

/// An immutable set of samples from one domain.
///
/// Reads of target identities are counted so tests can verify that training
/// never looks at them.
#[derive(Debug)]
pub struct Dataset {
    domain: Domain,
    input_len: usize,
    samples: Vec<Sample>,
    target_identity_reads: AtomicU64,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            domain: self.domain,
            input_len: self.input_len,
            samples: self.samples.clone(),
            target_identity_reads: AtomicU64::new(self.identity_reads()),
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.domain == other.domain && self.input_len == other.input_len && self.samples == other.samples
    }
}

impl Dataset {
    pub fn new(domain: Domain, input_len: usize, samples: Vec<Sample>) -> Result<Self> {
        if domain == Domain::Intermediate {
            return Err(invalid("datasets hold source or target samples only"));
        }
        if let Some(bad) = samples.iter().find(|s| s.input.len() != input_len) {
            return Err(Error::Dimension { op: "Dataset::new", left: vec![input_len], right: vec![bad.input.len()] });
        }
        Ok(Self { domain, input_len, samples, target_identity_reads: AtomicU64::new(0) })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> Result<&Sample> {
        self.samples.get(i).ok_or(Error::Range { what: "sample", index: i, len: self.samples.len() })
    }

    pub fn cameras(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.camera).collect()
    }

    /// Training label of a source sample; `None` for target samples.
    pub fn identity(&self, i: usize) -> Result<Option<usize>> {
        let s = self.sample(i)?;
        Ok((self.domain == Domain::Source).then_some(s.identity))
    }

    /// Ground-truth identity in either domain. Target reads are audited.
    pub fn true_identity(&self, i: usize) -> Result<usize> {
        let id = self.sample(i)?.identity;
        if self.domain == Domain::Target {
            self.target_identity_reads.fetch_add(1, Ordering::Relaxed);
        }
        Ok(id)
    }

    /// Ground-truth identities of every sample (audited for target sets).
    pub fn true_identities(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.true_identity(i).expect("index in range")).collect()
    }

    /// Number of target ground-truth reads since creation.
    pub fn identity_reads(&self) -> u64 {
        self.target_identity_reads.load(Ordering::Relaxed)
    }

    /// Inputs of `indices` stacked as `[len · h · w, c0]` rows.
    pub fn inputs(&self, indices: &[usize], channels: usize) -> Result<Tensor> {
        if channels == 0 || !self.input_len.is_multiple_of(channels) {
            return Err(Error::Dimension { op: "Dataset::inputs", left: vec![self.input_len], right: vec![channels] });
        }
        let mut data = Vec::with_capacity(indices.len() * self.input_len);
        for &i in indices {
            data.extend_from_slice(&self.sample(i)?.input);
        }
        Tensor::matrix(indices.len() * self.input_len / channels, channels, data)
    }

    /// Every input, in sample order.
    pub fn all_inputs(&self, channels: usize) -> Result<Tensor> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.inputs(&all, channels)
    }
}

/// Generated source, target and held-out target evaluation sets.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub source: Dataset,
    pub target: Dataset,
    pub query: Dataset,
    pub gallery: Dataset,
}

struct DomainShift {
    matrix: Vec<f64>,
    bias: Vec<f64>,
}

impl DomainShift {
    fn draw(rng: &mut RunRng, c: usize, gap: f64) -> Self {
        let scale = gap / libm::sqrt(c as f64);
        let r = gaussian_vec(rng, c * c, 1.0);
        let matrix = (0..c * c).map(|ij| if ij / c == ij % c { 1.0 } else { 0.0 } + scale * r[ij]).collect();
        let bias = gaussian_vec(rng, c, 1.0).into_iter().map(|b| gap * b).collect();
        Self { matrix, bias }
    }

    fn apply(&self, x: &mut [f64], c: usize) {
        for pos in x.chunks_mut(c) {
            let input = pos.to_vec();
            for (o, out) in pos.iter_mut().enumerate() {
                *out = self.bias[o] + (0..c).map(|i| self.matrix[o * c + i] * input[i]).sum::<f64>();
            }
        }
    }
}

/// Builds all four sets from the configuration's seed.
///
/// Source identities are `0..I`, target training identities `I..2I` and
/// held-out identities `2I..2I+T`. Sample `j` of an identity is seen by camera
/// `j mod cameras`. The query set holds the first sample per camera of each
/// held-out identity; the gallery holds the rest.
pub fn generate(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = stream(config.seed, Stream::Data);
    let len = config.input_len();
    let c = config.channels;
    let shift = DomainShift::draw(&mut rng, c, config.gap);
    let source_cams: Vec<Vec<f64>> = (0..config.num_cameras).map(|_| gaussian_vec(&mut rng, len, config.camera_std)).collect();
    let target_cams: Vec<Vec<f64>> = (0..config.num_cameras).map(|_| gaussian_vec(&mut rng, len, config.camera_std)).collect();
    let nuisance: Vec<Vec<f64>> = (0..config.nuisance_dims)
        .map(|_| {
            let v = gaussian_vec(&mut rng, c, 1.0);
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();

    let make = |first_id: usize, count: usize, cams: &[Vec<f64>], shifted: bool, rng: &mut RunRng| -> Vec<Sample> {
        let mut out = Vec::with_capacity(count * config.samples_per_identity);
        for id in first_id..first_id + count {
            let proto = gaussian_vec(rng, len, config.prototype_std);
            for j in 0..config.samples_per_identity {
                let camera = j % config.num_cameras;
                let noise = gaussian_vec(rng, len, config.noise_std);
                let coeffs = gaussian_vec(rng, nuisance.len(), config.nuisance_std);
                let mut x: Vec<f64> = (0..len)
                    .map(|i| {
                        let shared: f64 = nuisance.iter().zip(&coeffs).map(|(v, a)| a * v[i % c]).sum();
                        proto[i] + cams[camera][i] + noise[i] + shared
                    })
                    .collect();
                if shifted {
                    shift.apply(&mut x, c);
                }
                out.push(Sample::new(x, id, camera));
            }
        }
        out
    };
    let ni = config.num_identities;
    let source = make(0, ni, &source_cams, false, &mut rng);
    let target = make(ni, ni, &target_cams, true, &mut rng);
    let held_out = make(2 * ni, config.num_test_identities, &target_cams, true, &mut rng);

    let (mut query, mut gallery) = (Vec::new(), Vec::new());
    for (j, s) in held_out.into_iter().enumerate() {
        if j % config.samples_per_identity < config.num_cameras {
            query.push(s);
        } else {
            gallery.push(s);
        }
    }
    Ok(SyntheticData {
        source: Dataset::new(Domain::Source, len, source)?,
        target: Dataset::new(Domain::Target, len, target)?,
        query: Dataset::new(Domain::Target, len, query)?,
        gallery: Dataset::new(Domain::Target, len, gallery)?,
    })
}

/// One identity-balanced batch: sample indices and their labels, grouped by identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Draws `P` identities × `K` instances from a labelled pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkSampler {
    groups: Vec<(usize, Vec<usize>)>,
}

impl PkSampler {
    /// `pairs` holds `(sample index, label)`; labels need not be contiguous.
    pub fn new(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (sample, label) in pairs {
            by_label.entry(label).or_default().push(sample);
        }
        Self { groups: by_label.into_iter().collect() }
    }

    pub fn num_identities(&self) -> usize {
        self.groups.len()
    }

    /// Identities without replacement; instances without replacement when an
    /// identity has at least `k` samples, with replacement otherwise.
    pub fn sample<R: Rng + ?Sized>(&self, p: usize, k: usize, rng: &mut R) -> Result<PkBatch> {
        if p == 0 || k == 0 {
            return Err(invalid("P and K must be positive"));
        }
        if p > self.groups.len() {
            return Err(Error::Sampling { requested: p, available: self.groups.len() });
        }
        let mut batch = PkBatch { indices: Vec::with_capacity(p * k), labels: Vec::with_capacity(p * k) };
        for g in index::sample(rng, self.groups.len(), p) {
            let (label, members) = &self.groups[g];
            if members.len() >= k {
                for m in index::sample(rng, members.len(), k) {
                    batch.indices.push(members[m]);
                }
            } else {
                for _ in 0..k {
                    batch.indices.push(members[rng.random_range(0..members.len())]);
                }
            }
            batch.labels.extend(core::iter::repeat_n(*label, k));
        }
        Ok(batch)
    }
}
