//! Acceptance checks for the whole system, one numbered criterion each.
//!
//! Runs with its own `main` and prints one `PASS`/`FAIL` line per criterion;
//! the process exits nonzero if any criterion fails. Results are also written
//! to `acceptance.csv` and `stage_sweep.csv` under Cargo's test scratch
//! directory.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use idm_cli::commands::{grad_check, train_into};
use idm_cli::config::RunConfig;
use idm_cli::run::RunDir;
use idm_core::autodiff::{Tape, Tensor, Var};
use idm_core::data::{generate, SyntheticConfig, SyntheticData};
use idm_core::eval::{cmc_map, EvalReport};
use idm_core::idm::{mix_representations, DomainFactors, Idm, IdmConfig, MixupKind};
use idm_core::losses::{LossWeights, bridge_feat_loss, bridge_pred_loss, diversity_loss, triplet_loss, TripletMemory};
use idm_core::memory::{MemoryEntry, MemoryQueue};
use idm_core::network::Domain;
use idm_core::params::ParamStore;
use idm_core::pseudo_label::{adjusted_rand_index, dbscan, jaccard_distance, ClusterAssignment};
use idm_core::rng::RunRng;
use idm_core::trainer::{train, LabelSource, Mixing, TrainConfig, TrainOutcome, Trainer};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

type Check = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> RunRng {
    RunRng::seed_from_u64(0xACCE_0000 + seed)
}

fn gaussian(rng: &mut RunRng, len: usize, std: f64) -> Vec<f64> {
    idm_core::rng::gaussian_vec(rng, len, std)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn pop_std(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64).sqrt()
}

fn default_data(seed: u64) -> SyntheticData {
    generate(&SyntheticConfig { seed, ..SyntheticConfig::default() }).expect("default data")
}

fn final_map(outcome: &TrainOutcome) -> f64 {
    outcome.logs.last().expect("at least one epoch").report.map
}

fn timed_train(cfg: &TrainConfig, data: &SyntheticData) -> Result<(TrainOutcome, Duration), String> {
    let start = Instant::now();
    let outcome = train(cfg, data, &mut ()).map_err(|e| format!("training failed: {e}"))?;
    Ok((outcome, start.elapsed()))
}

// 1 -------------------------------------------------------------------------

const GRADIENT_CASES: [&str; 33] = [
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "relu",
    "ln",
    "sum",
    "mean",
    "matmul",
    "add_row",
    "mul_row",
    "softmax_rows",
    "concat_cols",
    "pool_avg",
    "pool_max",
    "normalize_batch",
    "normalize_running",
    "gather_rows",
    "pick",
    "column",
    "scale_groups",
    "mix",
    "row_dist",
    "row_norms",
    "std_pop",
    "cls_loss",
    "triplet",
    "triplet_memory",
    "bridge_pred",
    "bridge_feat",
    "diversity",
    "composed",
];

fn gradients() -> Check {
    let (summaries, elapsed) = grad_check(0, 20).map_err(|e| e.to_string())?;
    for s in &summaries {
        println!("    {:<18} {:>2}/{} seeds  max rel {:.2e}  max abs {:.2e}", s.name, s.passed, s.seeds, s.max_rel_err, s.max_abs_err);
    }
    let names: Vec<&str> = summaries.iter().map(|s| s.name).collect();
    let missing: Vec<&str> = GRADIENT_CASES.iter().copied().filter(|c| !names.contains(c)).collect();
    let failed: Vec<&str> = summaries.iter().filter(|s| !s.ok()).map(|s| s.name).collect();
    let worst = summaries.iter().map(|s| s.max_rel_err).fold(0.0, f64::max);
    verdict(
        missing.is_empty() && failed.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} checks x 20 seeds in {elapsed:.2?}, worst rel err {worst:.2e}, failed {failed:?}, missing {missing:?}",
            summaries.len()
        ),
    )
}

// 2 -------------------------------------------------------------------------

fn idm_invariants() -> Check {
    let mut r = rng(2);
    let mut inputs = 0usize;
    let mut worst_sum = 0.0f64;
    let mut worst_combination = 0.0f64;
    let mut endpoint_mismatches = 0usize;
    let mut outside_hull = 0usize;
    for module in 0..100 {
        let c = r.random_range(1..=12);
        let hw = r.random_range(1..=6);
        let n = 100;
        let mut store = ParamStore::new();
        let idm = Idm::new(&mut store, &IdmConfig { stage: 0, reduction: r.random_range(1..=4) }, c, &mut r).map_err(|e| e.to_string())?;
        if module % 2 == 1 {
            let scale = r.random_range(0.1..4.0);
            for id in idm.param_ids() {
                let shape = store.get(id).shape().to_vec();
                let data = (0..store.get(id).len()).map(|_| r.random_range(-scale..scale)).collect();
                store.replace(id, Tensor::new(shape, data).unwrap());
            }
        }
        let gs_t = Tensor::matrix(n * hw, c, gaussian(&mut r, n * hw * c, 2.0)).unwrap();
        let gt_t = Tensor::matrix(n * hw, c, gaussian(&mut r, n * hw * c, 2.0)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let gs = tape.constant(&gs_t);
        let gt = tape.constant(&gt_t);
        let a = idm.domain_factors(&mut tape, &bound, gs, gt, n).map_err(|e| e.to_string())?;
        let factors = DomainFactors::from_rows(tape.value(a));
        for f in &factors {
            worst_sum = worst_sum.max((f.source + f.target - 1.0).abs());
        }

        let mixed = mix_representations(&mut tape, gs, gt, a).map_err(|e| e.to_string())?;
        let m = tape.value(mixed).to_vec();
        for (row, f) in factors.iter().enumerate().flat_map(|(i, f)| (i * hw..(i + 1) * hw).map(move |row| (row, f))) {
            for ch in 0..c {
                let (x, y, z) = (gs_t.row(row)[ch], gt_t.row(row)[ch], m[row * c + ch]);
                if z < x.min(y) || z > x.max(y) {
                    outside_hull += 1;
                }
                let combination = f.source * x + f.target * y;
                worst_combination = worst_combination.max((z - combination).abs());
            }
        }

        for (endpoint, expected) in [((1.0, 0.0), &gs_t), ((0.0, 1.0), &gt_t)] {
            let fixed = DomainFactors::to_tensor(&vec![DomainFactors::new(endpoint.0, endpoint.1); n]).unwrap();
            let fixed = tape.constant(&fixed);
            let out = mix_representations(&mut tape, gs, gt, fixed).map_err(|e| e.to_string())?;
            endpoint_mismatches += tape.value(out).iter().zip(expected.data()).filter(|(u, v)| u.to_bits() != v.to_bits()).count();
        }
        inputs += n;
    }
    verdict(
        inputs >= 10_000 && worst_sum <= 1e-9 && endpoint_mismatches == 0 && outside_hull == 0 && worst_combination <= 1e-12,
        format!(
            "{inputs} pairs: max |a_s+a_t-1| {worst_sum:.1e}, endpoint mismatches {endpoint_mismatches}, \
             entries outside [min,max] {outside_hull}, max |G_inter - (a_s G_s + a_t G_t)| {worst_combination:.1e}"
        ),
    )
}

// 3 -------------------------------------------------------------------------

fn probability_rows(r: &mut RunRng, n: usize, classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * classes);
    for _ in 0..n {
        let row: Vec<f64> = (0..classes).map(|_| r.random_range(0.01..1.0)).collect();
        let s: f64 = row.iter().sum();
        out.extend(row.iter().map(|v| v / s));
    }
    out
}

fn factor_rows(r: &mut RunRng, n: usize) -> Vec<f64> {
    (0..n)
        .flat_map(|_| {
            let s: f64 = r.random_range(0.0..=1.0);
            [s, 1.0 - s]
        })
        .collect()
}

fn oracle_negative(e: &MemoryEntry, label: usize, domain: Domain, epoch: usize) -> bool {
    match (e.domain == domain, domain) {
        (false, _) => true,
        (true, Domain::Target) => e.epoch == epoch && e.label != label,
        (true, _) => e.label != label,
    }
}

fn oracle_triplet(x: &[Vec<f64>], labels: &[usize], memory: Option<(&[MemoryEntry], Domain, usize)>, margin: f64) -> f64 {
    let mut total = 0.0;
    let mut valid = 0usize;
    for i in 0..x.len() {
        let positives: Vec<f64> = (0..x.len()).filter(|&j| j != i && labels[j] == labels[i]).map(|j| dist(&x[i], &x[j])).collect();
        let mut negatives: Vec<f64> = (0..x.len()).filter(|&j| labels[j] != labels[i]).map(|j| dist(&x[i], &x[j])).collect();
        if let Some((entries, domain, epoch)) = memory {
            negatives.extend(entries.iter().filter(|e| oracle_negative(e, labels[i], domain, epoch)).map(|e| dist(&x[i], &e.feature)));
        }
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        let dp = positives.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dn = negatives.iter().copied().fold(f64::INFINITY, f64::min);
        total += (margin + dp - dn).max(0.0);
        valid += 1;
    }
    if valid == 0 {
        0.0
    } else {
        total / valid as f64
    }
}

fn random_queue(r: &mut RunRng, d: usize, labels: usize) -> MemoryQueue {
    let mut q = MemoryQueue::with_capacity(r.random_range(0..=24));
    for _ in 0..r.random_range(0..=5) {
        let m = r.random_range(1..=8);
        let feats = gaussian(r, m * d, 1.0);
        let lab: Vec<usize> = (0..m).map(|_| r.random_range(0..labels)).collect();
        let dom: Vec<Domain> = (0..m).map(|_| if r.random_bool(0.5) { Domain::Source } else { Domain::Target }).collect();
        q.enqueue_batch(&feats, d, &lab, &dom, r.random_range(0..3)).unwrap();
    }
    q
}

fn loss_oracles() -> Check {
    let mut r = rng(3);
    let mut worst = [0.0f64; 6];
    for _ in 0..100 {
        let n = r.random_range(2..=12);
        let d = r.random_range(1..=6);
        let classes = r.random_range(2..=7);
        let mut tape = Tape::new();

        let probs_v = probability_rows(&mut r, n, classes);
        let a_v = factor_rows(&mut r, n);
        let ys: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let yt: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let probs = tape.constant(&Tensor::matrix(n, classes, probs_v.clone()).unwrap());
        let a = tape.constant(&Tensor::matrix(n, 2, a_v.clone()).unwrap());
        let got = bridge_pred_loss(&mut tape, probs, &ys, &yt, a).map_err(|e| e.to_string())?;
        let want = -(0..n).map(|i| a_v[2 * i] * probs_v[i * classes + ys[i]].ln() + a_v[2 * i + 1] * probs_v[i * classes + yt[i]].ln()).sum::<f64>() / n as f64;
        worst[0] = worst[0].max((tape.scalar(got) - want).abs());

        let (fs_v, ft_v, fi_v) = (gaussian(&mut r, n * d, 1.0), gaussian(&mut r, n * d, 1.0), gaussian(&mut r, n * d, 1.0));
        let var = |tape: &mut Tape, v: &[f64]| tape.constant(&Tensor::matrix(n, d, v.to_vec()).unwrap());
        let (fs, ft, fi) = (var(&mut tape, &fs_v), var(&mut tape, &ft_v), var(&mut tape, &fi_v));
        let got = bridge_feat_loss(&mut tape, fs, ft, fi, a).map_err(|e| e.to_string())?;
        let row = |v: &[f64], i: usize| v[i * d..(i + 1) * d].to_vec();
        let want = (0..n).map(|i| a_v[2 * i] * dist(&row(&fs_v, i), &row(&fi_v, i)) + a_v[2 * i + 1] * dist(&row(&ft_v, i), &row(&fi_v, i))).sum::<f64>() / n as f64;
        worst[1] = worst[1].max((tape.scalar(got) - want).abs());

        let got = diversity_loss(&mut tape, a).map_err(|e| e.to_string())?;
        let got = tape.scalar(got);
        let source: Vec<f64> = a_v.iter().step_by(2).copied().collect();
        let target: Vec<f64> = a_v.iter().skip(1).step_by(2).copied().collect();
        worst[2] = worst[2].max((got + pop_std(&source) + pop_std(&target)).abs());
        worst[3] = worst[3].max((got + 2.0 * pop_std(&source)).abs());

        let ids = r.random_range(1..=4);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..ids)).collect();
        let x: Vec<Vec<f64>> = (0..n).map(|_| gaussian(&mut r, d, 1.0)).collect();
        let features: Var = tape.constant(&Tensor::matrix(n, d, x.concat()).unwrap());
        let margin = r.random_range(0.0..1.0);
        let got = triplet_loss(&mut tape, features, &labels, None, margin).map_err(|e| e.to_string())?;
        worst[4] = worst[4].max((tape.scalar(got.loss) - oracle_triplet(&x, &labels, None, margin)).abs());

        let queue = random_queue(&mut r, d, ids + 1);
        let domain = if r.random_bool(0.5) { Domain::Source } else { Domain::Target };
        let epoch = r.random_range(0..3);
        let memory = TripletMemory { queue: &queue, domain, epoch };
        let got = triplet_loss(&mut tape, features, &labels, Some(memory), margin).map_err(|e| e.to_string())?;
        let entries: Vec<MemoryEntry> = queue.entries().cloned().collect();
        let want = oracle_triplet(&x, &labels, Some((&entries, domain, epoch)), margin);
        worst[5] = worst[5].max((tape.scalar(got.loss) - want).abs());
    }
    let names = ["bridge_pred", "bridge_feat", "diversity", "diversity=-2sigma(a_s)", "triplet", "triplet+memory"];
    let tolerances = [1e-10, 1e-10, 1e-10, 1e-12, 1e-10, 1e-10];
    let detail = names.iter().zip(&worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(worst.iter().zip(&tolerances).all(|(w, t)| w <= t), format!("100 instances, max abs deviation: {detail}"))
}

// 4 -------------------------------------------------------------------------

fn brute_jaccard(x: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    let k = k.min(n - 1);
    let d: Vec<Vec<f64>> = x.iter().map(|a| x.iter().map(|b| dist(a, b)).collect()).collect();
    let knn: Vec<BTreeSet<usize>> = (0..n)
        .map(|i| {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| d[i][a].total_cmp(&d[i][b]).then(a.cmp(&b)));
            order.into_iter().take(k).collect()
        })
        .collect();
    let sets: Vec<BTreeSet<usize>> = (0..n).map(|i| knn[i].iter().copied().filter(|&j| knn[j].contains(&i)).chain([i]).collect()).collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let inter = sets[i].intersection(&sets[j]).count() as f64;
                    let union = sets[i].union(&sets[j]).count() as f64;
                    1.0 - inter / union
                })
                .collect()
        })
        .collect()
}

/// Reference density clustering via connected components of core points.
/// Components are numbered by their smallest member; a border point joins
/// the lowest-numbered adjacent component.
fn reference_dbscan(d: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = d.len();
    let core: Vec<bool> = (0..n).map(|i| d[i].iter().filter(|&&v| v <= eps).count() >= min_pts).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && d[i][j] <= eps {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    let mut ids: Vec<usize> = (0..n).filter(|&i| core[i]).map(|i| roots[i]).collect();
    ids.sort_unstable();
    ids.dedup();
    let number = |root: usize| ids.binary_search(&root).unwrap();
    (0..n)
        .map(|i| {
            if core[i] {
                Some(number(roots[i]))
            } else {
                (0..n).filter(|&j| core[j] && d[i][j] <= eps).map(|j| number(roots[j])).min()
            }
        })
        .collect()
}

fn singletons(labels: &[Option<usize>]) -> Vec<usize> {
    let clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    ClusterAssignment { labels: labels.to_vec(), num_clusters: clusters }.with_singleton_noise()
}

fn clustering() -> Check {
    let mut r = rng(4);
    let mut worst_jaccard = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(2..=30);
        let d = r.random_range(1..=5);
        let mut x: Vec<Vec<f64>> = (0..n).map(|_| gaussian(&mut r, d, 1.0)).collect();
        for _ in 0..r.random_range(0..=n / 3) {
            let (a, b) = (r.random_range(0..n), r.random_range(0..n));
            x[a] = x[b].clone();
        }
        let k = r.random_range(1..=n + 2);
        let got = jaccard_distance(&Tensor::matrix(n, d, x.concat()).unwrap(), k).map_err(|e| e.to_string())?;
        for (i, row) in brute_jaccard(&x, k).iter().enumerate() {
            for (j, want) in row.iter().enumerate() {
                worst_jaccard = worst_jaccard.max((got.row(i)[j] - want).abs());
            }
        }
    }

    let mut worst_ari = 1.0f64;
    for _ in 0..50 {
        let blobs = r.random_range(1..=5);
        let mut points: Vec<[f64; 2]> = Vec::new();
        for b in 0..blobs {
            let centre = [10.0 * b as f64, 5.0 * (b % 2) as f64];
            for _ in 0..r.random_range(3..=12) {
                let off = gaussian(&mut r, 2, 0.6);
                points.push([centre[0] + off[0], centre[1] + off[1]]);
            }
        }
        for _ in 0..r.random_range(0..=6) {
            points.push([r.random_range(-10.0..60.0), r.random_range(-10.0..20.0)]);
        }
        points.shuffle(&mut r);
        let n = points.len();
        let mut d = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let v = dist(&points[i], &points[j]);
                d[i][j] = v;
                d[j][i] = v;
            }
        }
        let (eps, min_pts) = (r.random_range(0.5..2.5), r.random_range(1..=6));
        let got = dbscan(&Tensor::matrix(n, n, d.concat()).unwrap(), eps, min_pts).map_err(|e| e.to_string())?;
        let want = reference_dbscan(&d, eps, min_pts);
        let ari = adjusted_rand_index(&got.with_singleton_noise(), &singletons(&want)).map_err(|e| e.to_string())?;
        worst_ari = worst_ari.min(if got.labels == want { ari } else { ari.min(0.0) });
    }

    let mut epoch_one = Vec::new();
    // Separable: identities are tight, far-apart blobs and k covers exactly the
    // other samples of an identity, so every reciprocal set is the identity.
    for seed in 0..5 {
        let cfg = SyntheticConfig { seed, camera_std: 0.0, noise_std: 0.01, nuisance_std: 0.0, ..SyntheticConfig::default() };
        let data = generate(&cfg).map_err(|e| e.to_string())?;
        let mut train_cfg = TrainConfig { seed, ..TrainConfig::default() };
        train_cfg.cluster.k = cfg.samples_per_identity - 1;
        let mut trainer = Trainer::new(train_cfg, &data).map_err(|e| e.to_string())?;
        trainer.run_epoch().map_err(|e| e.to_string())?;
        let assignment = trainer.assignment().ok_or("no pseudo labels after epoch 1")?;
        let ari = adjusted_rand_index(&assignment.with_singleton_noise(), &data.target.true_identities()).map_err(|e| e.to_string())?;
        epoch_one.push(ari);
    }
    verdict(
        worst_jaccard <= 1e-12 && worst_ari == 1.0 && epoch_one.iter().all(|&a| a == 1.0),
        format!("jaccard max dev {worst_jaccard:.1e} (100 sets), dbscan min ARI {worst_ari} (50 planted sets), epoch-1 ARI on separable data {epoch_one:?}"),
    )
}

// 5 -------------------------------------------------------------------------

fn brute_cmc_map(d: &[Vec<f64>], qid: &[usize], gid: &[usize], qcam: &[usize], gcam: &[usize]) -> EvalReport {
    let mut ap_sum = 0.0;
    let mut hits = [0usize; 3];
    let (mut counted, mut skipped) = (0, 0);
    for q in 0..d.len() {
        let mut ranked: Vec<usize> = (0..gid.len()).filter(|&g| gid[g] != qid[q] || gcam[g] != qcam[q]).collect();
        ranked.sort_by(|&a, &b| d[q][a].total_cmp(&d[q][b]).then(a.cmp(&b)));
        let positions: Vec<usize> = ranked.iter().enumerate().filter(|(_, &g)| gid[g] == qid[q]).map(|(p, _)| p).collect();
        if positions.is_empty() {
            skipped += 1;
            continue;
        }
        counted += 1;
        let precisions: f64 = positions.iter().enumerate().map(|(t, &p)| (t + 1) as f64 / (p + 1) as f64).sum();
        ap_sum += precisions / positions.len() as f64;
        for (h, k) in hits.iter_mut().zip([1, 5, 10]) {
            *h += usize::from(positions[0] < k);
        }
    }
    if counted == 0 {
        return EvalReport { map: 0.0, cmc: [0.0; 3], num_queries: 0, skipped_queries: skipped };
    }
    let n = counted as f64;
    EvalReport { map: ap_sum / n, cmc: hits.map(|h| h as f64 / n), num_queries: counted, skipped_queries: skipped }
}

fn retrieval() -> Check {
    let mut r = rng(5);
    let (mut mismatches, mut not_invariant) = (0, 0);
    for _ in 0..100 {
        let (q, g) = (r.random_range(1..=8), r.random_range(1..=20));
        let ids = r.random_range(1..=5);
        let cams = r.random_range(1..=3);
        let qid: Vec<usize> = (0..q).map(|_| r.random_range(0..ids)).collect();
        let gid: Vec<usize> = (0..g).map(|_| r.random_range(0..ids)).collect();
        let qcam: Vec<usize> = (0..q).map(|_| r.random_range(0..cams)).collect();
        let gcam: Vec<usize> = (0..g).map(|_| r.random_range(0..cams)).collect();
        let d: Vec<Vec<f64>> = (0..q).map(|_| (0..g).map(|_| r.random_range(0..8) as f64 * 0.25).collect()).collect();
        let run = |d: &[Vec<f64>]| cmc_map(&Tensor::matrix(q, g, d.concat()).unwrap(), &qid, &gid, &qcam, &gcam).unwrap();
        let got = run(&d);
        if got != brute_cmc_map(&d, &qid, &gid, &qcam, &gcam) {
            mismatches += 1;
        }
        for transform in [|v: f64| 3.0 * v + 7.0, |v: f64| v * v * v + v, |v: f64| (v + 1.0).ln()] {
            let moved: Vec<Vec<f64>> = d.iter().map(|row| row.iter().map(|&v| transform(v)).collect()).collect();
            if run(&moved) != got {
                not_invariant += 1;
            }
        }
    }
    verdict(
        mismatches == 0 && not_invariant == 0,
        format!("100 instances with tied distances: {mismatches} differ from brute force, {not_invariant} change under monotone transforms"),
    )
}

// 6 -------------------------------------------------------------------------

fn memory() -> Check {
    let mut r = rng(6);
    let mut violations = 0;
    for _ in 0..500 {
        let capacity = r.random_range(0..=20);
        let d = r.random_range(1..=3);
        let mut queue = MemoryQueue::with_capacity(capacity);
        let mut reference: VecDeque<MemoryEntry> = VecDeque::new();
        let mut offered = 0u64;
        for epoch in 0..r.random_range(1..=10) {
            let m = r.random_range(0..=9);
            let feats = gaussian(&mut r, m * d, 1.0);
            let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..50)).collect();
            let domains: Vec<Domain> = (0..m).map(|_| if r.random_bool(0.5) { Domain::Source } else { Domain::Target }).collect();
            queue.enqueue_batch(&feats, d, &labels, &domains, epoch).unwrap();
            offered += m as u64;
            for i in 0..m {
                reference.push_back(MemoryEntry { feature: feats[i * d..(i + 1) * d].to_vec(), label: labels[i], domain: domains[i], epoch });
                if reference.len() > capacity {
                    reference.pop_front();
                }
            }
            if !queue.entries().eq(reference.iter()) || queue.total_enqueued() != offered {
                violations += 1;
            }
        }
    }

    let data = default_data(0);
    let (with_zero, _) = timed_train(&TrainConfig { memory_ratio: Some(0.0), ..TrainConfig::default() }, &data)?;
    let (without, _) = timed_train(&TrainConfig { memory_ratio: None, ..TrainConfig::default() }, &data)?;
    let same_logs = with_zero.logs == without.logs;
    let same_state = with_zero.model.state() == without.model.state();
    verdict(
        violations == 0 && same_logs && same_state,
        format!("500 random enqueue sequences: {violations} FIFO violations; R_M=0 vs no memory: logs identical {same_logs}, model state identical {same_state}"),
    )
}

// 7 -------------------------------------------------------------------------

fn ablations() -> Check {
    let base = |seed| TrainConfig { seed, memory_ratio: None, ..TrainConfig::default() };
    let variants: [(&str, fn(TrainConfig) -> TrainConfig); 4] = [
        ("naive", |c| TrainConfig { mixing: Mixing::None, idm_module: false, loss: LossWeights { mu1: 0.0, mu2: 0.0, mu3: 0.0, ..c.loss }, ..c }),
        ("mu1=0", |mut c| {
            c.loss.mu1 = 0.0;
            c
        }),
        ("mu2=0", |mut c| {
            c.loss.mu2 = 0.0;
            c
        }),
        ("mu3=0", |mut c| {
            c.loss.mu3 = 0.0;
            c
        }),
    ];
    let mut wins = [0usize; 4];
    let mut slowest = Duration::ZERO;
    println!("    seed  {:>8} {:>8} {:>8} {:>8} {:>8}", "idm", "naive", "mu1=0", "mu2=0", "mu3=0");
    for seed in 0..5 {
        let data = default_data(seed);
        let (idm, t) = timed_train(&base(seed), &data)?;
        slowest = slowest.max(t);
        let mut row = vec![final_map(&idm)];
        for (w, (_, variant)) in wins.iter_mut().zip(&variants) {
            let (other, t) = timed_train(&variant(base(seed)), &data)?;
            slowest = slowest.max(t);
            *w += usize::from(final_map(&idm) > final_map(&other));
            row.push(final_map(&other));
        }
        println!("    {seed:>4}  {}", row.iter().map(|m| format!("{m:>8.4}")).collect::<Vec<_>>().join(" "));
    }
    let needed = [4, 3, 3, 3];
    let detail = variants.iter().zip(wins.iter().zip(needed)).map(|((name, _), (w, n))| format!("vs {name} {w}/5 (need {n})")).collect::<Vec<_>>().join(", ");
    verdict(
        wins.iter().zip(needed).all(|(&w, n)| w >= n) && slowest < Duration::from_secs(300),
        format!("IDM final mAP wins: {detail}; slowest run {slowest:.2?}"),
    )
}

// 8 -------------------------------------------------------------------------

fn label_oracle() -> Check {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let data = default_data(seed);
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let (clustered, _) = timed_train(&cfg, &data)?;
        let (truth, _) = timed_train(&TrainConfig { labels: LabelSource::GroundTruth, ..cfg }, &data)?;
        wins += usize::from(final_map(&truth) >= final_map(&clustered));
        rows.push(format!("{:.4}/{:.4}", final_map(&truth), final_map(&clustered)));
    }
    verdict(wins >= 4, format!("ground truth >= clustering on {wins}/5 seeds (mAP truth/clustering: {})", rows.join(" ")))
}

// 9 -------------------------------------------------------------------------

fn stage_sweep(out: &Path) -> Check {
    let data = default_data(0);
    let mut table = vec!["stage,mAP,R1,final_total_loss,trained_epochs".to_string()];
    let mut all_finite = true;
    println!("    stage      mAP       R1   total loss");
    for stage in 0..5 {
        let (outcome, _) = timed_train(&TrainConfig { stage, ..TrainConfig::default() }, &data)?;
        let losses: Vec<_> = outcome.logs.iter().filter_map(|l| l.losses.clone()).collect();
        let finite = !losses.is_empty()
            && losses.iter().all(|l| {
                [Some(l.cls), Some(l.triplet), l.bridge_pred, l.bridge_feat, l.diversity, Some(l.total)].iter().flatten().all(|v| v.is_finite())
            });
        all_finite &= finite;
        let report = &outcome.logs.last().expect("epochs").report;
        let total = losses.last().map_or(f64::NAN, |l| l.total);
        println!("    {stage:>5} {:>8.4} {:>8.4} {:>12.4}", report.map, report.rank1(), total);
        table.push(format!("{stage},{},{},{total},{}", report.map, report.rank1(), losses.len()));
    }
    fs::write(out, table.join("\n") + "\n").map_err(|e| e.to_string())?;
    verdict(all_finite, format!("stages 0..4 trained with finite losses: {all_finite}; table in {}", out.display()))
}

// 10 ------------------------------------------------------------------------

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let mut manifold = RunConfig::default().with_seed(7);
    manifold.train.mixing = Mixing::Mixup { kind: MixupKind::Manifold, alpha: 0.5 };
    manifold.train.jitter_std = 0.05;
    let mut compared = 0;
    let mut differing = Vec::new();
    for config in [RunConfig::default().with_seed(3), manifold] {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for dir in &dirs {
            let run = RunDir::create(dir.path(), &config, false).map_err(|e| e.to_string())?;
            train_into(&config, &run, true, true).map_err(|e| e.to_string())?;
        }
        let (a, b) = (files(dirs[0].path()), files(dirs[1].path()));
        if a != b {
            return Err(format!("run directories list different files: {a:?} vs {b:?}"));
        }
        for rel in &a {
            compared += 1;
            if fs::read(dirs[0].path().join(rel)).unwrap() != fs::read(dirs[1].path().join(rel)).unwrap() {
                differing.push(rel.display().to_string());
            }
        }
    }
    verdict(differing.is_empty(), format!("2 configs run twice: {compared} files compared (log.csv included), differing {differing:?}"))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let scratch = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let sweep_table = scratch.join("stage_sweep.csv");
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Check>)> = vec![
        (1, "gradient checks", Box::new(gradients)),
        (2, "IDM factor and mixing invariants", Box::new(idm_invariants)),
        (3, "loss values against naive loops", Box::new(loss_oracles)),
        (4, "pseudo-label clustering", Box::new(clustering)),
        (5, "mAP and CMC against brute force", Box::new(retrieval)),
        (6, "memory FIFO and R_M=0 equivalence", Box::new(memory)),
        (7, "IDM against naive baseline and ablations", Box::new(ablations)),
        (8, "ground-truth labels bound clustering", Box::new(label_oracle)),
        (9, "plug-in stage sweep", Box::new(move || stage_sweep(&sweep_table))),
        (10, "run directory determinism", Box::new(determinism)),
    ];
    let mut summary = vec!["criterion,name,status,seconds,detail".to_string()];
    let mut failures = 0;
    for (id, name, check) in &criteria {
        println!("criterion {id}: {name}");
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failures += usize::from(result.is_err());
        println!("{status} criterion {id} ({name}, {secs:.1}s): {detail}");
        summary.push(format!("{id},{name},{status},{secs:.1},\"{}\"", detail.replace('"', "'")));
    }
    let _ = fs::write(scratch.join("acceptance.csv"), summary.join("\n") + "\n");
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
