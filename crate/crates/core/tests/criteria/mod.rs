//! Acceptance checks shared by the core integration tests and the
//! `acceptance` target. Each returns an [`Outcome`] instead of panicking so the
//! acceptance run can report every criterion.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::time::Instant;

use darn::autodiff::Graph;
use darn::eval::{ndcg_at_k, run_ablation, top_k_accuracy, train_ladder, EvalOptions, RetrievalSet, Rung, SweepPoint, Truth};
use darn::features::{pca_fit, pca_transform};
use darn::index::{Gallery, RankedEntry, RankedList};
use darn::losses::{attribute_loss, total_loss, triplet_loss, triplet_loss_value, Distance, FeatureSpec, RankingConfig, TripletIndex};
use darn::network::{build_dual_network, DualNetwork, SubNetworkConfig, Topology};
use darn::schema::{AttributeLabels, AttributeSchema, Domain};
use darn::synth::{render, split, SynthConfig};
use darn::trainer::TrainConfig;
use darn::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::{brute_force_ranking, covariance, jacobi_eigen, reference_ndcg, reference_top_k};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }

    /// Both must pass; details are joined.
    pub fn and(self, other: Outcome) -> Outcome {
        Outcome::new(self.pass && other.pass, format!("{}; {}", self.detail, other.detail))
    }
}

// -------------------------------------------------------------- triplet loss

pub fn triplet_contract() -> Outcome {
    let e = Distance::Euclidean;
    let examples = [
        triplet_loss_value(&[0.0, 0.0], &[0.0, 0.0], &[0.5, 0.0], 0.3, e).unwrap(),
        triplet_loss_value(&[0.0, 0.0], &[0.4, 0.0], &[0.2, 0.0], 0.3, e).unwrap(),
        triplet_loss_value(&[0.7, -0.2], &[0.7, -0.2], &[0.7, -0.2], 0.3, e).unwrap(),
    ];
    let want = [0.0, 0.5, 0.3];
    let ex_ok = examples == want;

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut min_loss = f64::INFINITY;
    for _ in 0..10_000 {
        let mut v = || (0..4).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let (a, b, c) = (v(), v(), v());
        min_loss = min_loss.min(triplet_loss_value(&a, &b, &c, 0.3, e).unwrap());
    }

    // Inactive triplets: the negative is at least margin farther than the
    // positive, so every input gradient must be exactly zero.
    let mut inactive = 0;
    let mut nonzero = 0;
    for _ in 0..200 {
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + rng.random_range(-0.05..0.05)).collect();
        let c: Vec<f64> = a.iter().map(|x| x + rng.random_range(1.0..2.0)).collect();
        let mut g = Graph::new();
        let ids: Vec<_> = [a, b, c].into_iter().map(|v| g.param(Tensor::new(vec![1, 4], v).unwrap())).collect();
        let per = triplet_loss(&mut g, ids[0], ids[1], ids[2], 0.3, e).unwrap();
        if g.value(per).data()[0] != 0.0 {
            continue;
        }
        inactive += 1;
        let l = g.sum(per);
        let grads = g.backward(l).unwrap();
        for id in &ids {
            if let Some(t) = grads.get(*id) {
                nonzero += t.data().iter().filter(|v| **v != 0.0).count();
            }
        }
    }
    Outcome::new(
        ex_ok && min_loss >= 0.0 && inactive > 0 && nonzero == 0,
        format!("examples {examples:?} (want {want:?}); min loss over 10000 random triples {min_loss:.3e}; {inactive} inactive triplets, {nonzero} nonzero gradient entries"),
    )
}

// -------------------------------------------------------------- masking

fn images(n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::new(vec![3, 16, 16], (0..768).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
        .collect()
}

fn grads_by_name(net: &DualNetwork, batch: &[(Domain, &Tensor)], labels: &[AttributeLabels], rank: bool) -> Vec<(String, Option<Tensor>)> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g);
    let routed = net.route_batch(&mut g, &bound, batch).unwrap();
    let loss = if rank {
        let trip = [TripletIndex {
            anchor: 0,
            positive: 1,
            negative: 2,
        }];
        total_loss(&mut g, &routed, labels, &trip, &RankingConfig::default()).unwrap().total
    } else {
        attribute_loss(&mut g, &routed, labels).unwrap()
    };
    let grads = g.backward(loss).unwrap();
    let mut out = Vec::new();
    for ((prefix, sub), ids) in net.nets().into_iter().zip([&bound.shop, &bound.street]) {
        for (name, id) in sub.param_names().iter().zip(ids.iter()) {
            out.push((format!("{prefix}.{name}"), grads.get(*id).cloned()));
        }
    }
    out
}

/// A branch whose labels are all missing gets exactly zero gradient, and
/// every other parameter sees bitwise the gradient of a model built without
/// that branch (same weights otherwise).
pub fn missing_branch_masking() -> Outcome {
    let schema = AttributeSchema::desk_default();
    let cfg = SubNetworkConfig::default();
    let full = build_dual_network(&cfg, &schema, 6).unwrap();
    let drop_k = 1;
    let dropped = schema.categories()[drop_k].name.clone();
    let mut reduced = build_dual_network(&cfg, &schema.without(&dropped).unwrap(), 6).unwrap();
    for ((_, src), (_, dst)) in full.nets().into_iter().zip(reduced.nets_mut()) {
        for (name, t) in src.param_names().iter().zip(src.params()) {
            if let Some(p) = dst.param_mut(name) {
                *p = t.clone();
            }
        }
    }
    let imgs = images(6, 4);
    let doms = [Domain::Offline, Domain::Online, Domain::Online, Domain::Offline, Domain::Online, Domain::Online];
    let batch: Vec<(Domain, &Tensor)> = doms.iter().copied().zip(&imgs).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels: Vec<AttributeLabels> = (0..6)
        .map(|_| {
            schema
                .categories()
                .iter()
                .enumerate()
                .map(|(k, c)| (k != drop_k).then(|| rng.random_range(0..c.cardinality)))
                .collect()
        })
        .collect();
    let reduced_labels: Vec<AttributeLabels> = labels
        .iter()
        .map(|l| l.iter().enumerate().filter(|(k, _)| *k != drop_k).map(|(_, v)| *v).collect())
        .collect();
    let bits = |t: &Option<Tensor>| t.as_ref().map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let (mut branch_params, mut branch_nonzero, mut compared, mut mismatched) = (0, 0, 0, Vec::new());
    for rank in [false, true] {
        let g_red: BTreeMap<_, _> = grads_by_name(&reduced, &batch, &reduced_labels, rank).into_iter().collect();
        for (name, grad) in grads_by_name(&full, &batch, &labels, rank) {
            if name.contains(&format!("head.{dropped}.")) {
                branch_params += 1;
                if let Some(t) = &grad {
                    branch_nonzero += t.data().iter().filter(|v| **v != 0.0).count();
                }
                continue;
            }
            compared += 1;
            if bits(&grad) != bits(&g_red[&name]) {
                mismatched.push(name);
            }
        }
    }
    Outcome::new(
        branch_nonzero == 0 && mismatched.is_empty() && compared > 0,
        format!(
            "branch `{dropped}`: {branch_params} parameter gradients, {branch_nonzero} nonzero entries; {compared} other parameter gradients compared bitwise, mismatches {mismatched:?}"
        ),
    )
}

// -------------------------------------------------------------- oracles

pub fn index_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (n, d) = (1000, 16);
    let ids: Vec<String> = (0..n).map(|i| format!("g{i:04}")).collect();
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let m = Tensor::new(vec![n, d], rows.concat()).unwrap();
    let gallery = Gallery::from_matrix(ids.clone(), &m, BTreeMap::new()).unwrap();
    let mut bad = 0;
    let mut max_dist_err: f64 = 0.0;
    for qi in 0..50 {
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = gallery.query(&format!("q{qi}"), &q, n).unwrap();
        let want = brute_force_ranking(&ids, &rows, &q);
        let same = got.entries.len() == want.len() && got.entries.iter().zip(&want).all(|(a, b)| a.id == b.0);
        if !same {
            bad += 1;
        }
        for (a, b) in got.entries.iter().zip(&want) {
            max_dist_err = max_dist_err.max((a.distance - b.1).abs());
        }
    }
    Outcome::new(
        bad == 0 && max_dist_err < 1e-12,
        format!("50 queries x 1000 rows: {bad} ranking mismatches, max distance error {max_dist_err:.2e}"),
    )
}

pub fn pca_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (n, dim, d) = (300, 10, 6);
    // Anisotropic data so the leading eigenvalues are well separated.
    let scales: Vec<f64> = (0..dim).map(|j| 3.0 / (1.0 + j as f64)).collect();
    let mix: Vec<Vec<f64>> = (0..dim).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z: Vec<f64> = scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect();
            (0..dim).map(|j| 0.5 + (0..dim).map(|k| z[k] * mix[k][j]).sum::<f64>()).collect()
        })
        .collect();
    let model = pca_fit(&Tensor::new(vec![n, dim], rows.concat()).unwrap(), d).unwrap();
    let (mean, cov) = covariance(&rows);
    let (values, vectors) = jacobi_eigen(cov);
    let var_err = (0..d).map(|j| (model.variances[j] - values[j]).abs()).fold(0.0, f64::max);
    let mut proj_err: f64 = 0.0;
    for r in &rows {
        let got = pca_transform(&model, r).unwrap();
        for j in 0..d {
            let want: f64 = (0..dim).map(|i| (r[i] - mean[i]) * vectors[j][i]).sum();
            proj_err = proj_err.max((got[j].abs() - want.abs()).abs());
        }
    }
    // Sign consistency: a column may be flipped as a whole, never per row.
    let mut flips_consistent = true;
    for j in 0..d {
        let signs: BTreeSet<bool> = rows
            .iter()
            .filter_map(|r| {
                let got = pca_transform(&model, r).unwrap()[j];
                let want: f64 = (0..dim).map(|i| (r[i] - mean[i]) * vectors[j][i]).sum();
                (want.abs() > 1e-6).then_some((got > 0.0) == (want > 0.0))
            })
            .collect();
        flips_consistent &= signs.len() == 1;
    }
    Outcome::new(
        var_err < 1e-8 && proj_err < 1e-8 && flips_consistent,
        format!("variance error {var_err:.2e}, projection error up to column sign {proj_err:.2e}, column signs consistent: {flips_consistent}"),
    )
}

fn ranked(query: &str, ids: &[String]) -> RankedList {
    RankedList {
        query_id: query.into(),
        entries: ids
            .iter()
            .enumerate()
            .map(|(i, id)| RankedEntry {
                id: id.clone(),
                distance: i as f64,
            })
            .collect(),
    }
}

/// NDCG@k and top-k against the reference implementations on 100 random
/// instances.
pub fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let schema = AttributeSchema::desk_default();
    let mut worst_ndcg: f64 = 0.0;
    let mut worst_topk: f64 = 0.0;
    for inst in 0..100 {
        let n = rng.random_range(5..60);
        let q_count = rng.random_range(1..8);
        let attrs = |rng: &mut ChaCha8Rng, allow_empty: bool| -> AttributeLabels {
            loop {
                let a: AttributeLabels = schema
                    .categories()
                    .iter()
                    .map(|c| (rng.random_range(0.0..1.0) > 0.25).then(|| rng.random_range(0..c.cardinality)))
                    .collect();
                if allow_empty || a.iter().any(|v| v.is_some()) {
                    return a;
                }
            }
        };
        let ids: Vec<String> = (0..n).map(|i| format!("i{inst}_{i}")).collect();
        let gallery: HashMap<String, AttributeLabels> = ids.iter().map(|id| (id.clone(), attrs(&mut rng, true))).collect();
        let gallery_bt: BTreeMap<String, AttributeLabels> = gallery.clone().into_iter().collect();
        let k = rng.random_range(1..=n + 3);
        let mut lists = Vec::new();
        let mut qattrs = BTreeMap::new();
        let mut truth: Truth = BTreeMap::new();
        let mut ref_lists = Vec::new();
        let mut ref_ndcg = 0.0;
        for qi in 0..q_count {
            let qid = format!("q{qi}");
            let qa = attrs(&mut rng, false);
            let mut order = ids.clone();
            order.shuffle(&mut rng);
            let target = ids[rng.random_range(0..n)].clone();
            ref_ndcg += reference_ndcg(&qa, &order, &gallery, k) / q_count as f64;
            ref_lists.push((target.clone(), order.clone()));
            truth.insert(qid.clone(), BTreeSet::from([target]));
            qattrs.insert(qid.clone(), qa);
            lists.push(ranked(&qid, &order));
        }
        let got_ndcg = ndcg_at_k(&lists, &qattrs, &gallery_bt, k).unwrap();
        worst_ndcg = worst_ndcg.max((got_ndcg - ref_ndcg).abs());
        let got_top = top_k_accuracy(&lists, &truth, k).unwrap();
        worst_topk = worst_topk.max((got_top - reference_top_k(&ref_lists, k)).abs());
    }
    Outcome::new(
        worst_ndcg < 1e-12 && worst_topk < 1e-12,
        format!("100 random instances: max NDCG deviation {worst_ndcg:.2e}, max top-k deviation {worst_topk:.2e}"),
    )
}

// -------------------------------------------------------------- metric sanity

/// Random rankings over N gallery items with one match per query: the mean
/// top-k accuracy must be within three Monte-Carlo standard errors of k/N.
pub fn random_ranking_accuracy() -> Outcome {
    let (n, k, queries, trials) = (500, 20, 100, 200);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let ids: Vec<String> = (0..n).map(|i| format!("g{i:03}")).collect();
    let truth: Truth = (0..queries).map(|q| (format!("q{q}"), BTreeSet::from([ids[q].clone()]))).collect();
    let mut total = 0.0;
    for _ in 0..trials {
        let lists: Vec<RankedList> = (0..queries)
            .map(|q| {
                let mut order = ids.clone();
                order.shuffle(&mut rng);
                ranked(&format!("q{q}"), &order)
            })
            .collect();
        total += top_k_accuracy(&lists, &truth, k).unwrap();
    }
    let mean = total / trials as f64;
    let p = k as f64 / n as f64;
    let se = (p * (1.0 - p) / (queries * trials) as f64).sqrt();
    Outcome::new(
        (mean - p).abs() <= 3.0 * se,
        format!("mean top-{k} of random rankings {mean:.5} vs k/N = {p:.5} (3 SE = {:.5})", 3.0 * se),
    )
}

/// A ranking sorted by descending relevance has NDCG exactly 1.
pub fn ideal_ranking_ndcg() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let schema = AttributeSchema::desk_default();
    let mut worst = 1.0f64;
    for _ in 0..50 {
        let n = rng.random_range(3..40);
        let g: BTreeMap<String, AttributeLabels> = (0..n)
            .map(|i| {
                (
                    format!("g{i}"),
                    schema.categories().iter().map(|c| Some(rng.random_range(0..c.cardinality))).collect(),
                )
            })
            .collect();
        let q: AttributeLabels = schema.categories().iter().map(|c| Some(rng.random_range(0..c.cardinality))).collect();
        let rel = |a: &AttributeLabels| a.iter().zip(&q).filter(|(x, y)| x == y).count();
        let mut order: Vec<&String> = g.keys().collect();
        order.sort_by_key(|id| std::cmp::Reverse(rel(&g[*id])));
        let ids: Vec<String> = order.into_iter().cloned().collect();
        let k = rng.random_range(1..=n);
        let v = ndcg_at_k(&[ranked("q", &ids)], &BTreeMap::from([("q".to_string(), q.clone())]), &g, k).unwrap();
        if v != 1.0 {
            worst = v;
        }
    }
    Outcome::new(worst == 1.0, format!("NDCG of 50 descending-relevance rankings: {}", if worst == 1.0 { "all exactly 1".into() } else { format!("found {worst}") }))
}

// -------------------------------------------------------------- benchmark

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub ranking: RankingConfig,
    pub rungs: Vec<Rung>,
    pub gallery_sizes: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let rung = |name: &str, topology, trained, ranked, features| Rung {
            name: name.into(),
            topology,
            trained,
            ranked,
            features,
        };
        BenchConfig {
            seeds: vec![0, 1, 2],
            train: TrainConfig {
                epochs: BENCH_EPOCHS,
                ..Default::default()
            },
            ranking: RankingConfig {
                margin: BENCH_MARGIN,
                rank_weight: BENCH_RANK_WEIGHT,
                ..Default::default()
            },
            rungs: vec![
                rung("untrained", Topology::Dual, false, true, FeatureSpec::fc1_c4_c5()),
                rung("AN", Topology::Shared, true, false, FeatureSpec::fc1()),
                rung("DARN", Topology::Dual, true, true, FeatureSpec::fc1()),
                rung("DARN+C4-5", Topology::Dual, true, true, FeatureSpec::fc1_c4_c5()),
            ],
            gallery_sizes: vec![100, 200, 300, 400, 500],
        }
    }
}

pub const BENCH_EPOCHS: usize = 100;
pub const BENCH_MARGIN: f64 = 1.0;
pub const BENCH_RANK_WEIGHT: f64 = 5.0;

#[derive(Debug, Clone, Default)]
pub struct BenchResult {
    /// Top-20 accuracy per rung, one entry per seed.
    pub top20: BTreeMap<String, Vec<f64>>,
    /// Sweep per rung, one curve per seed.
    pub sweeps: BTreeMap<String, Vec<Vec<SweepPoint>>>,
    pub seconds: f64,
}

impl BenchResult {
    pub fn mean(&self, rung: &str) -> f64 {
        let v = &self.top20[rung];
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// The default synthetic dataset per seed (400 train / 100 test items,
/// gallery = all 500 online renderings), the listed rungs trained on the
/// training items, top-20 accuracy and the gallery-size sweep.
pub fn benchmark(cfg: &BenchConfig, work: &Path) -> darn::Result<BenchResult> {
    let start = Instant::now();
    let mut out = BenchResult::default();
    for &seed in &cfg.seeds {
        let (ds, _) = render(&SynthConfig {
            seed,
            ..Default::default()
        })?;
        let (train, test) = split(&ds, 0.8, seed)?;
        let test_items = test.item_ids();
        let set = RetrievalSet::new(&ds.samples, &test_items);
        let train_cfg = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let variants = train_ladder(
            &cfg.rungs,
            &train.samples,
            &SubNetworkConfig::default(),
            &ds.schema,
            &train_cfg,
            &cfg.ranking,
            &work.join(format!("seed{seed}")),
        )?;
        let opts = EvalOptions {
            ks: vec![20],
            gallery_sizes: cfg.gallery_sizes.clone(),
            seed,
            ..Default::default()
        };
        let table = run_ablation(&set, &variants, &opts)?;
        for row in table.rows {
            out.top20.entry(row.name.clone()).or_default().push(row.report.top_k[&20]);
            out.sweeps.entry(row.name).or_default().push(row.sweep);
        }
    }
    out.seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Relative top-20 drop from the smallest to the largest gallery, averaged
/// over seeds.
pub fn relative_drop(curves: &[Vec<SweepPoint>]) -> f64 {
    let drops: Vec<f64> = curves
        .iter()
        .map(|c| {
            let first = c.first().unwrap().accuracy;
            let last = c.last().unwrap().accuracy;
            if first == 0.0 {
                0.0
            } else {
                (first - last) / first
            }
        })
        .collect();
    drops.iter().sum::<f64>() / drops.len() as f64
}

pub fn non_increasing(curves: &[Vec<SweepPoint>]) -> bool {
    curves.iter().all(|c| c.windows(2).all(|w| w[1].accuracy <= w[0].accuracy))
}
