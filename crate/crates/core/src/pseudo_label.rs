//! Target pseudo labels: k-reciprocal Jaccard distances over test features,
//! density clustering over the precomputed matrix, and label assignment.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::autodiff::{euclidean, Tensor};
use crate::error::{invalid, Error, Result};
use crate::network::{Domain, Model};

/// Tolerance for the symmetry check on distance matrices.
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterParams {
    /// Neighbourhood size of the reciprocal sets.
    pub k: usize,
    /// Maximum Jaccard distance between neighbours.
    pub eps: f64,
    /// Neighbours (the point included) needed for a core point.
    pub min_pts: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self { k: 30, eps: 0.6, min_pts: 4 }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.min_pts == 0 || !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(invalid(format!("cluster parameters out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Cluster id per sample (`None` for noise) and the number of clusters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<usize>>,
    pub num_clusters: usize,
}

impl ClusterAssignment {
    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// `(sample index, cluster id)` for every clustered sample.
    pub fn labeled(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels.iter().enumerate().filter_map(|(i, l)| l.map(|c| (i, c)))
    }

    /// Labels with each noise point mapped to its own fresh id, for partition comparisons.
    pub fn with_singleton_noise(&self) -> Vec<usize> {
        let mut next = self.num_clusters;
        self.labels
            .iter()
            .map(|l| {
                l.unwrap_or_else(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    }
}

fn check_features(features: &Tensor) -> Result<(usize, usize)> {
    match *features.shape() {
        [n, d] if n >= 2 => Ok((n, d)),
        [n, _] => Err(Error::BatchTooSmall { op: "k_reciprocal_sets", needed: 2, got: n }),
        _ => Err(Error::Rank { op: "k_reciprocal_sets", shape: features.shape().to_vec() }),
    }
}

fn clip_k(k: usize, n: usize) -> usize {
    if k >= n {
        log::warn!("k = {k} is not below the sample count {n}; using {}", n - 1);
        n - 1
    } else {
        k
    }
}

/// The `k` nearest other rows of every row, nearest first, ties by index.
fn nearest_neighbours(features: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let n = features.rows();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(features.row(i), features.row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let row = &dist[i * n..(i + 1) * n];
            others.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
            others.truncate(k);
            others
        })
        .collect()
}

/// Mutual nearest-neighbour sets `R(p, k) = {q : q ∈ kNN(p), p ∈ kNN(q)}`,
/// sorted ascending. A point is never in its own set.
pub fn k_reciprocal_sets(features: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let (n, _) = check_features(features)?;
    if k == 0 {
        return Err(invalid("k must be positive"));
    }
    let k = clip_k(k, n);
    let knn = nearest_neighbours(features, k);
    let mut member = vec![false; n * n];
    for (p, list) in knn.iter().enumerate() {
        for &q in list {
            member[p * n + q] = true;
        }
    }
    Ok((0..n)
        .map(|p| {
            let mut set: Vec<usize> = knn[p].iter().copied().filter(|&q| member[q * n + p]).collect();
            set.sort_unstable();
            set
        })
        .collect())
}

/// `1 − |R'(p) ∩ R'(q)| / |R'(p) ∪ R'(q)|` where `R'(p)` is the reciprocal set
/// with `p` itself added.
pub fn jaccard_distance(features: &Tensor, k: usize) -> Result<Tensor> {
    let sets = k_reciprocal_sets(features, k)?;
    let n = sets.len();
    let mut member = vec![false; n * n];
    let mut sizes = Vec::with_capacity(n);
    for (p, set) in sets.iter().enumerate() {
        member[p * n + p] = true;
        for &q in set {
            member[p * n + q] = true;
        }
        sizes.push(set.len() + 1);
    }
    let mut out = vec![0.0; n * n];
    for p in 0..n {
        for q in p + 1..n {
            let inter = (0..n).filter(|&j| member[p * n + j] && member[q * n + j]).count();
            let union = sizes[p] + sizes[q] - inter;
            let d = 1.0 - inter as f64 / union as f64;
            out[p * n + q] = d;
            out[q * n + p] = d;
        }
    }
    Tensor::matrix(n, n, out)
}

fn validate_distances(dist: &Tensor) -> Result<usize> {
    let n = match *dist.shape() {
        [r, c] if r == c => r,
        _ => return Err(Error::Rank { op: "dbscan", shape: dist.shape().to_vec() }),
    };
    let d = dist.data();
    for i in 0..n {
        if d[i * n + i] != 0.0 {
            return Err(Error::InvalidDistances { row: i, col: i, reason: "nonzero diagonal" });
        }
        for j in 0..n {
            let v = d[i * n + j];
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidDistances { row: i, col: j, reason: "negative or non-finite entry" });
            }
            if j > i && (v - d[j * n + i]).abs() > SYMMETRY_TOL {
                return Err(Error::InvalidDistances { row: i, col: j, reason: "not symmetric" });
            }
        }
    }
    Ok(n)
}

/// Density clustering over a precomputed distance matrix.
///
/// Neighbourhoods are closed balls (`d ≤ eps`) that include the point itself.
/// Clusters grow breadth-first from core points visited in ascending index
/// order, so cluster ids follow the smallest core index of each cluster and a
/// border point reachable from several clusters joins the first one to reach it.
pub fn dbscan(dist: &Tensor, eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    let n = validate_distances(dist)?;
    let d = dist.data();
    let neighbours: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| d[i * n + j] <= eps).collect()).collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![None; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if labels[seed].is_some() || !core[seed] {
            continue;
        }
        labels[seed] = Some(next);
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbours[p] {
                if labels[q].is_none() {
                    labels[q] = Some(next);
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
        next += 1;
    }
    Ok(ClusterAssignment { labels, num_clusters: next })
}

/// Clusters the test features of `inputs` (target domain statistics) and
/// returns the assignment. Fails when every sample is noise.
pub fn assign_pseudo_labels(model: &Model, inputs: &Tensor, params: &ClusterParams) -> Result<ClusterAssignment> {
    params.validate()?;
    let features = model.extract_test_features(inputs, Domain::Target)?;
    let dist = jaccard_distance(&features, params.k)?;
    let assignment = dbscan(&dist, params.eps, params.min_pts)?;
    if assignment.num_clusters == 0 {
        return Err(Error::NoClusters { noise: assignment.noise_count() });
    }
    log::debug!("pseudo labels: {} clusters, {} noise", assignment.num_clusters, assignment.noise_count());
    Ok(assignment)
}

/// Adjusted Rand index between two labelings of the same samples.
///
/// Returns 1.0 when both labelings are trivial in the same way (the index is
/// otherwise undefined there).
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension { op: "adjusted_rand_index", left: vec![a.len()], right: vec![b.len()] });
    }
    let mut joint: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1) / 2) as f64;
    let index: f64 = joint.values().map(|&c| pairs(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(a.len() as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
