//! Retrieval metrics with cross-camera filtering.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::autodiff::{euclidean, Tensor};
use crate::error::{Error, Result};

/// Ranks reported by [`EvalReport::cmc`].
pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    /// Match rates at ranks 1, 5 and 10.
    pub cmc: [f64; 3],
    /// Queries that entered the averages.
    pub num_queries: usize,
    /// Queries dropped because no valid gallery match existed.
    pub skipped_queries: usize,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }
}

/// Pairwise Euclidean distances `[Q, G]` between rows.
pub fn distance_matrix(queries: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    let (q, d) = match *queries.shape() {
        [q, d] => (q, d),
        _ => return Err(Error::Rank { op: "distance_matrix", shape: queries.shape().to_vec() }),
    };
    let g = match *gallery.shape() {
        [g, dg] if dg == d => g,
        _ => return Err(Error::Dimension { op: "distance_matrix", left: queries.shape().to_vec(), right: gallery.shape().to_vec() }),
    };
    let mut out = Vec::with_capacity(q * g);
    for i in 0..q {
        for j in 0..g {
            out.push(euclidean(queries.row(i), gallery.row(j)));
        }
    }
    Tensor::matrix(q, g, out)
}

/// Mean average precision and CMC over a `[Q, G]` distance matrix.
///
/// Gallery entries sharing both identity and camera with the query are
/// ignored. Ranking is by ascending distance, equal distances by gallery
/// index. AP averages the precision at every true match.
pub fn cmc_map(dist: &Tensor, query_ids: &[usize], gallery_ids: &[usize], query_cams: &[usize], gallery_cams: &[usize]) -> Result<EvalReport> {
    let (q, g) = match *dist.shape() {
        [q, g] => (q, g),
        _ => return Err(Error::Rank { op: "cmc_map", shape: dist.shape().to_vec() }),
    };
    if query_ids.len() != q || query_cams.len() != q || gallery_ids.len() != g || gallery_cams.len() != g {
        return Err(Error::Dimension {
            op: "cmc_map",
            left: vec![q, g],
            right: vec![query_ids.len(), query_cams.len(), gallery_ids.len(), gallery_cams.len()],
        });
    }
    let mut ap_sum = 0.0;
    let mut hits = [0usize; 3];
    let mut counted = 0;
    let mut skipped = 0;
    let mut order: Vec<usize> = Vec::with_capacity(g);
    for i in 0..q {
        let row = dist.row(i);
        order.clear();
        order.extend((0..g).filter(|&j| !(gallery_ids[j] == query_ids[i] && gallery_cams[j] == query_cams[i])));
        order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));

        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (rank, &j) in order.iter().enumerate() {
            if gallery_ids[j] == query_ids[i] {
                found += 1;
                precision_sum += found as f64 / (rank + 1) as f64;
                first_hit.get_or_insert(rank);
            }
        }
        let Some(first) = first_hit else {
            skipped += 1;
            continue;
        };
        counted += 1;
        ap_sum += precision_sum / found as f64;
        for (h, &k) in hits.iter_mut().zip(CMC_RANKS.iter()) {
            if first < k {
                *h += 1;
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} of {q} queries have no cross-camera match and were skipped");
    }
    if counted == 0 {
        return Ok(EvalReport { map: 0.0, cmc: [0.0; 3], num_queries: 0, skipped_queries: skipped });
    }
    let n = counted as f64;
    Ok(EvalReport { map: ap_sum / n, cmc: hits.map(|h| h as f64 / n), num_queries: counted, skipped_queries: skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RunRng;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn distance_examples() {
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let d = distance_matrix(&a, &a).unwrap();
        assert_eq!(d.data()[0], 0.0);
        assert_eq!(d.data()[1], libm::sqrt(2.0));
        let bad = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(distance_matrix(&a, &bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn single_query_examples() {
        let d = Tensor::matrix(1, 2, vec![0.1, 0.5]).unwrap();
        let r = cmc_map(&d, &[3], &[3, 4], &[0], &[1, 1]).unwrap();
        assert_eq!((r.map, r.rank1()), (1.0, 1.0));
        let r = cmc_map(&d, &[3], &[4, 3], &[0], &[1, 1]).unwrap();
        assert_eq!((r.map, r.rank1()), (0.5, 0.0));
    }

    #[test]
    fn same_camera_matches_are_ignored() {
        let d = Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let r = cmc_map(&d, &[3], &[3, 4, 3], &[0], &[0, 1, 1]).unwrap();
        assert_eq!(r.map, 0.5);
        let r = cmc_map(&d, &[3], &[3, 4, 4], &[0], &[0, 1, 1]).unwrap();
        assert_eq!((r.num_queries, r.skipped_queries), (0, 1));
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let d = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(cmc_map(&d, &[1], &[2, 1], &[0], &[1, 1]).unwrap().map, 0.5);
        assert_eq!(cmc_map(&d, &[1], &[1, 2], &[0], &[1, 1]).unwrap().map, 1.0);
    }

    /// Independent evaluator: repeatedly takes the remaining valid entry with
    /// the smallest (distance, index) and scores the query from the list of hits.
    fn brute(d: &Tensor, qi: &[usize], gi: &[usize], qc: &[usize], gc: &[usize]) -> (f64, [f64; 3], usize) {
        let g = gi.len();
        let (mut aps, mut cmc, mut n) = (0.0, [0.0; 3], 0);
        for i in 0..qi.len() {
            let mut left: Vec<usize> = (0..g).filter(|&j| gi[j] != qi[i] || gc[j] != qc[i]).collect();
            let mut matches = Vec::new();
            let mut pos = 0;
            while !left.is_empty() {
                let mut best = 0;
                for c in 1..left.len() {
                    let (a, b) = (d.data()[i * g + left[c]], d.data()[i * g + left[best]]);
                    if a < b || (a == b && left[c] < left[best]) {
                        best = c;
                    }
                }
                let j = left.remove(best);
                pos += 1;
                if gi[j] == qi[i] {
                    matches.push(pos);
                }
            }
            if matches.is_empty() {
                continue;
            }
            n += 1;
            aps += matches.iter().enumerate().map(|(h, &p)| (h + 1) as f64 / p as f64).sum::<f64>() / matches.len() as f64;
            for (c, k) in cmc.iter_mut().zip([1, 5, 10]) {
                if matches[0] <= k {
                    *c += 1.0;
                }
            }
        }
        (aps / n as f64, cmc.map(|c| c / n as f64), n)
    }

    fn random_instance(rng: &mut RunRng) -> (Tensor, Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>) {
        let q = rng.random_range(1..=8);
        let g = rng.random_range(2..=20);
        // Coarse distances so ties occur.
        let d = Tensor::matrix(q, g, (0..q * g).map(|_| rng.random_range(0..6) as f64 * 0.25).collect()).unwrap();
        let qi = (0..q).map(|_| rng.random_range(0..4)).collect();
        let gi = (0..g).map(|_| rng.random_range(0..4)).collect();
        let qc = (0..q).map(|_| rng.random_range(0..2)).collect();
        let gc = (0..g).map(|_| rng.random_range(0..2)).collect();
        (d, qi, gi, qc, gc)
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = RunRng::seed_from_u64(5);
        for _ in 0..200 {
            let (d, qi, gi, qc, gc) = random_instance(&mut rng);
            let r = cmc_map(&d, &qi, &gi, &qc, &gc).unwrap();
            if r.num_queries == 0 {
                continue;
            }
            let (map, cmc, n) = brute(&d, &qi, &gi, &qc, &gc);
            assert_eq!((r.map, r.cmc, r.num_queries), (map, cmc, n));
        }
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(seed in 0u64..1000, a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let mut rng = RunRng::seed_from_u64(seed);
            let (d, qi, gi, qc, gc) = random_instance(&mut rng);
            let t = Tensor::matrix(d.rows(), gi.len(), d.data().iter().map(|&x| libm::exp(a * x) + b).collect()).unwrap();
            prop_assert_eq!(cmc_map(&d, &qi, &gi, &qc, &gc).unwrap(), cmc_map(&t, &qi, &gi, &qc, &gc).unwrap());
        }

        #[test]
        fn cmc_is_monotone(seed in 0u64..1000) {
            let mut rng = RunRng::seed_from_u64(seed);
            let (d, qi, gi, qc, gc) = random_instance(&mut rng);
            let r = cmc_map(&d, &qi, &gi, &qc, &gc).unwrap();
            prop_assert!(r.cmc[0] <= r.cmc[1] && r.cmc[1] <= r.cmc[2]);
            prop_assert!((0.0..=1.0).contains(&r.map));
        }
    }
}
