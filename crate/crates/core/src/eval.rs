//! Retrieval metrics (top-k exact-match accuracy, attribute NDCG@k) and the
//! ablation harness over trained variants.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract, fit_gallery_pca, PcaModel};
use crate::index::{Gallery, RankedList};
use crate::losses::{FeatureSpec, RankingConfig};
use crate::network::{build_dual_network, build_shared_network, Checkpoint, DualNetwork, SubNetworkConfig, Topology};
use crate::schema::{AttributeLabels, AttributeSchema, Domain};
use crate::trainer::{train, Sample, TrainConfig};

/// Query id to the gallery ids that show the same item.
pub type Truth = BTreeMap<String, BTreeSet<String>>;

pub fn top_k_accuracy(results: &[RankedList], truth: &Truth, k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Contract("no queries to score".into()));
    }
    let mut hits = 0usize;
    for r in results {
        let matches = truth
            .get(&r.query_id)
            .ok_or_else(|| Error::Contract(format!("query {} has no ground truth", r.query_id)))?;
        if r.entries.iter().take(k).any(|e| matches.contains(&e.id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Fraction of the query's annotated categories on which the result agrees.
pub fn relevance(query: &[Option<usize>], result: &[Option<usize>]) -> Result<f64> {
    let annotated = query.iter().filter(|v| v.is_some()).count();
    if annotated == 0 {
        return Err(Error::Contract("query has no annotated attribute".into()));
    }
    if query.len() != result.len() {
        return Err(Error::dim(
            "relevance",
            format!("{} query categories vs {} result categories", query.len(), result.len()),
        ));
    }
    let hits = query
        .iter()
        .zip(result)
        .filter(|(q, r)| q.is_some() && q == r)
        .count();
    Ok(hits as f64 / annotated as f64)
}

/// `Σ_j (2^rel_j − 1) / log2(j + 1)` over ranks `j = 1..`.
pub fn dcg(rels: &[f64]) -> f64 {
    rels.iter()
        .enumerate()
        .map(|(i, r)| (r.exp2() - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG@k of one ranked list. The ideal DCG uses the `k` best relevances over
/// the whole gallery; a query whose ideal DCG is zero scores 1.
pub fn query_ndcg(
    result: &RankedList,
    query: &[Option<usize>],
    gallery: &BTreeMap<String, AttributeLabels>,
    k: usize,
) -> Result<f64> {
    let lookup = |id: &str| {
        gallery
            .get(id)
            .ok_or_else(|| Error::Contract(format!("gallery id {id} has no attribute record")))
    };
    let got: Vec<f64> = result
        .entries
        .iter()
        .take(k)
        .map(|e| relevance(query, lookup(&e.id)?))
        .collect::<Result<_>>()?;
    let mut ideal: Vec<(f64, &String)> = gallery
        .iter()
        .map(|(id, a)| Ok((relevance(query, a)?, id)))
        .collect::<Result<_>>()?;
    ideal.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let ideal: Vec<f64> = ideal.into_iter().take(k).map(|(r, _)| r).collect();
    let z = dcg(&ideal);
    if z == 0.0 {
        return Ok(1.0);
    }
    Ok(dcg(&got) / z)
}

/// Mean NDCG@k over queries.
pub fn ndcg_at_k(
    results: &[RankedList],
    query_attrs: &BTreeMap<String, AttributeLabels>,
    gallery_attrs: &BTreeMap<String, AttributeLabels>,
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if results.is_empty() {
        return Err(Error::Contract("no queries to score".into()));
    }
    let mut total = 0.0;
    for r in results {
        let q = query_attrs
            .get(&r.query_id)
            .ok_or_else(|| Error::Contract(format!("query {} has no attribute record", r.query_id)))?;
        total += query_ndcg(r, q, gallery_attrs, k)?;
    }
    Ok(total / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top_k: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub gallery_size: usize,
    pub query_count: usize,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn compute(
        results: &[RankedList],
        truth: &Truth,
        query_attrs: &BTreeMap<String, AttributeLabels>,
        gallery_attrs: &BTreeMap<String, AttributeLabels>,
        ks: &[usize],
        config: serde_json::Value,
    ) -> Result<Self> {
        let mut top_k = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for &k in ks {
            top_k.insert(k, top_k_accuracy(results, truth, k)?);
            ndcg.insert(k, ndcg_at_k(results, query_attrs, gallery_attrs, k)?);
        }
        Ok(EvalReport {
            top_k,
            ndcg,
            gallery_size: gallery_attrs.len(),
            query_count: results.len(),
            config,
        })
    }

    /// Writes `<stem>.json`, `<stem>_topk.csv` and `<stem>_ndcg.csv` in `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        write_file(&dir.join(format!("{stem}.json")), &json)?;
        write_file(&dir.join(format!("{stem}_topk.csv")), &curve_csv("accuracy", &self.top_k))?;
        write_file(&dir.join(format!("{stem}_ndcg.csv")), &curve_csv("ndcg", &self.ndcg))
    }
}

fn curve_csv(name: &str, curve: &BTreeMap<usize, f64>) -> String {
    let mut s = format!("k,{name}\n");
    for (k, v) in curve {
        s.push_str(&format!("{k},{v}\n"));
    }
    s
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// PCA target dimension; `None` keeps the raw normalized features.
    pub pca_dim: Option<usize>,
    /// Gallery sizes for the robustness sweep (empty disables it).
    pub gallery_sizes: Vec<usize>,
    /// k used by the sweep.
    pub sweep_k: usize,
    /// Orders the distractors added in the sweep.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: vec![1, 5, 10, 20, 30, 40, 50],
            pca_dim: Some(64),
            gallery_sizes: Vec::new(),
            sweep_k: 20,
            seed: 0,
        }
    }
}

/// Queries and gallery for one retrieval experiment. Queries are offline
/// renderings; the gallery holds online renderings.
#[derive(Debug, Clone)]
pub struct RetrievalSet<'a> {
    pub gallery: Vec<&'a Sample>,
    pub queries: Vec<&'a Sample>,
}

impl<'a> RetrievalSet<'a> {
    /// Gallery = every online sample; queries = offline samples of the test
    /// items.
    pub fn new(all: &'a [Sample], test_items: &BTreeSet<&str>) -> Self {
        RetrievalSet {
            gallery: all.iter().filter(|s| s.domain == Domain::Online).collect(),
            queries: all
                .iter()
                .filter(|s| s.domain == Domain::Offline && test_items.contains(s.item_id.as_str()))
                .collect(),
        }
    }

    pub fn truth(&self, gallery: &[&Sample]) -> Truth {
        let mut by_item: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
        for g in gallery {
            by_item.entry(&g.item_id).or_default().insert(g.id.clone());
        }
        self.queries
            .iter()
            .map(|q| (q.id.clone(), by_item.get(q.item_id.as_str()).cloned().unwrap_or_default()))
            .collect()
    }
}

fn attr_table(samples: &[&Sample]) -> BTreeMap<String, AttributeLabels> {
    samples.iter().map(|s| (s.id.clone(), s.attributes.clone())).collect()
}

/// Extracted features ready for querying.
pub struct PreparedRetrieval {
    pub gallery: Gallery,
    pub queries: Vec<(String, Vec<f64>)>,
    pub pca: Option<PcaModel>,
}

pub fn prepare(dual: &DualNetwork, set: &RetrievalSet, spec: &FeatureSpec, pca_dim: Option<usize>) -> Result<PreparedRetrieval> {
    let pca = match pca_dim {
        Some(d) => Some(fit_gallery_pca(dual, &set.gallery, spec, d)?),
        None => None,
    };
    let g = extract(dual, &set.gallery, spec, pca.as_ref())?;
    let q = extract(dual, &set.queries, spec, pca.as_ref())?;
    Ok(PreparedRetrieval {
        gallery: Gallery::build(&g, attr_table(&set.gallery))?,
        queries: q.into_iter().map(|f| (f.id, f.values)).collect(),
        pca,
    })
}

fn run_queries(gallery: &Gallery, queries: &[(String, Vec<f64>)], k: usize) -> Result<Vec<RankedList>> {
    let refs: Vec<(&str, &[f64])> = queries.iter().map(|(i, v)| (i.as_str(), v.as_slice())).collect();
    gallery.batch_query(&refs, k)
}

/// Extract, index, query and score one network.
pub fn evaluate_network(
    dual: &DualNetwork,
    set: &RetrievalSet,
    spec: &FeatureSpec,
    opts: &EvalOptions,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let prep = prepare(dual, set, spec, opts.pca_dim)?;
    let kmax = opts.ks.iter().copied().max().unwrap_or(1);
    let results = run_queries(&prep.gallery, &prep.queries, kmax)?;
    EvalReport::compute(
        &results,
        &set.truth(&set.gallery),
        &attr_table(&set.queries),
        prep.gallery.attrs(),
        &opts.ks,
        config,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub gallery_size: usize,
    pub accuracy: f64,
}

/// Top-`k` accuracy on nested galleries. The smallest gallery holds the
/// queries' matches; larger ones add seeded distractors. PCA stays fitted on
/// the full gallery.
pub fn gallery_sweep(
    dual: &DualNetwork,
    set: &RetrievalSet,
    spec: &FeatureSpec,
    opts: &EvalOptions,
) -> Result<Vec<SweepPoint>> {
    let prep = prepare(dual, set, spec, opts.pca_dim)?;
    let query_items: BTreeSet<&str> = set.queries.iter().map(|q| q.item_id.as_str()).collect();
    let mut core: Vec<usize> = Vec::new();
    let mut rest: Vec<usize> = Vec::new();
    for (i, s) in set.gallery.iter().enumerate() {
        if query_items.contains(s.item_id.as_str()) {
            core.push(i);
        } else {
            rest.push(i);
        }
    }
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let order: Vec<usize> = core.iter().chain(&rest).copied().collect();
    let truth = set.truth(&set.gallery);
    let mut points = Vec::new();
    for &size in &opts.gallery_sizes {
        if size < core.len() || size > order.len() {
            return Err(Error::config(
                "gallery_sizes",
                format!("size {size} outside {}..={}", core.len(), order.len()),
            ));
        }
        let feats: Vec<_> = order[..size]
            .iter()
            .map(|&i| crate::features::FeatureVector {
                id: set.gallery[i].id.clone(),
                item_id: set.gallery[i].item_id.clone(),
                domain: Domain::Online,
                values: prep.gallery.row(i).to_vec(),
            })
            .collect();
        let g = Gallery::build(&feats, BTreeMap::new())?;
        let results = run_queries(&g, &prep.queries, opts.sweep_k)?;
        points.push(SweepPoint {
            gallery_size: size,
            accuracy: top_k_accuracy(&results, &truth, opts.sweep_k)?,
        });
    }
    Ok(points)
}

/// `acc(smallest) / acc(largest) − 1`; `None` when the largest gallery
/// scores zero.
pub fn increase_ratio(points: &[SweepPoint]) -> Option<f64> {
    let small = points.iter().min_by_key(|p| p.gallery_size)?;
    let large = points.iter().max_by_key(|p| p.gallery_size)?;
    (large.accuracy > 0.0).then(|| small.accuracy / large.accuracy - 1.0)
}

/// A trained model to compare, identified by its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub checkpoint: PathBuf,
    pub features: FeatureSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub features: FeatureSpec,
    pub report: EvalReport,
    pub sweep: Vec<SweepPoint>,
    pub increase_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// One line per variant: `variant,features,top@k...,ndcg@k...,increase_ratio`.
    pub fn to_csv(&self) -> String {
        let ks: Vec<usize> = self.rows.first().map(|r| r.report.top_k.keys().copied().collect()).unwrap_or_default();
        let mut s = String::from("variant,features");
        for k in &ks {
            s.push_str(&format!(",top{k}"));
        }
        for k in &ks {
            s.push_str(&format!(",ndcg{k}"));
        }
        s.push_str(",increase_ratio\n");
        for r in &self.rows {
            s.push_str(&format!("{},\"{}\"", r.name, r.features));
            for k in &ks {
                s.push_str(&format!(",{}", r.report.top_k[k]));
            }
            for k in &ks {
                s.push_str(&format!(",{}", r.report.ndcg[k]));
            }
            match r.increase_ratio {
                Some(v) => s.push_str(&format!(",{v}\n")),
                None => s.push_str(",\n"),
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("ablation.json"), &serde_json::to_string_pretty(self).expect("table serializes"))?;
        write_file(&dir.join("ablation.csv"), &self.to_csv())
    }
}

/// Evaluates each variant's checkpoint on the same retrieval set.
pub fn run_ablation(set: &RetrievalSet, variants: &[Variant], opts: &EvalOptions) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        if !v.checkpoint.is_file() {
            return Err(Error::config(
                format!("variants.{}.checkpoint", v.name),
                format!("{} does not exist", v.checkpoint.display()),
            ));
        }
    }
    for v in variants {
        let ck = Checkpoint::load(&v.checkpoint)?;
        let config = serde_json::json!({ "variant": v.name, "features": v.features.to_string(), "options": opts });
        let report = evaluate_network(&ck.network, set, &v.features, opts, config)?;
        let sweep = if opts.gallery_sizes.is_empty() {
            Vec::new()
        } else {
            gallery_sweep(&ck.network, set, &v.features, opts)?
        };
        rows.push(AblationRow {
            name: v.name.clone(),
            features: v.features.clone(),
            increase_ratio: increase_ratio(&sweep),
            report,
            sweep,
        });
    }
    Ok(AblationTable { rows })
}

/// How a ladder rung is built and trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub name: String,
    pub topology: Topology,
    /// `false` keeps the initialization.
    pub trained: bool,
    /// Whether the triplet term is used (at the configured rank weight).
    pub ranked: bool,
    pub features: FeatureSpec,
}

/// untrained, AN, ARN, DARN, DARN+C5, DARN+C4-5.
pub fn default_ladder() -> Vec<Rung> {
    let rung = |name: &str, topology, trained, ranked, features| Rung {
        name: name.into(),
        topology,
        trained,
        ranked,
        features,
    };
    vec![
        rung("untrained", Topology::Dual, false, true, FeatureSpec::fc1_c4_c5()),
        rung("AN", Topology::Shared, true, false, FeatureSpec::fc1()),
        rung("ARN", Topology::Shared, true, true, FeatureSpec::fc1()),
        rung("DARN", Topology::Dual, true, true, FeatureSpec::fc1()),
        rung("DARN+C5", Topology::Dual, true, true, FeatureSpec::fc1_c5()),
        rung("DARN+C4-5", Topology::Dual, true, true, FeatureSpec::fc1_c4_c5()),
    ]
}

/// Trains every rung into `out_dir/<name>/` and returns the variants to
/// evaluate. Each rung starts from the network seeded with `train.seed`.
#[allow(clippy::too_many_arguments)]
pub fn train_ladder(
    rungs: &[Rung],
    samples: &[Sample],
    net: &SubNetworkConfig,
    schema: &AttributeSchema,
    train_cfg: &TrainConfig,
    ranking: &RankingConfig,
    out_dir: &Path,
) -> Result<Vec<Variant>> {
    let mut variants = Vec::with_capacity(rungs.len());
    for r in rungs {
        let dir = out_dir.join(r.name.replace(['+', ' '], "_"));
        let network = match r.topology {
            Topology::Dual => build_dual_network(net, schema, train_cfg.seed)?,
            Topology::Shared => build_shared_network(net, schema, train_cfg.seed)?,
        };
        let ranking = RankingConfig {
            rank_weight: if r.ranked { ranking.rank_weight } else { 0.0 },
            features: r.features.clone(),
            ..ranking.clone()
        };
        let cfg = TrainConfig {
            epochs: if r.trained { train_cfg.epochs } else { 0 },
            ..train_cfg.clone()
        };
        let meta = serde_json::json!({ "variant": r.name });
        let outcome = train(samples, network, &cfg, &ranking, &dir, meta)?;
        variants.push(Variant {
            name: r.name.clone(),
            checkpoint: outcome.checkpoint,
            features: r.features.clone(),
        });
    }
    Ok(variants)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::RankedEntry;

    fn list(q: &str, ids: &[&str]) -> RankedList {
        RankedList {
            query_id: q.into(),
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, id)| RankedEntry {
                    id: id.to_string(),
                    distance: i as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn accuracy_examples() {
        let truth: Truth = [("q1", "a"), ("q2", "b")]
            .iter()
            .map(|(q, g)| (q.to_string(), BTreeSet::from([g.to_string()])))
            .collect();
        let hit = [list("q1", &["a", "b"]), list("q2", &["b", "a"])];
        assert_eq!(top_k_accuracy(&hit, &truth, 20).unwrap(), 1.0);
        let miss = [list("q1", &["b", "a"]), list("q2", &["a", "b"])];
        assert_eq!(top_k_accuracy(&miss, &truth, 1).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&miss, &truth, 2).unwrap(), 1.0);
        let err = top_k_accuracy(&[list("q9", &["a"])], &truth, 1).unwrap_err();
        assert_eq!(err.category(), "contract");
    }

    #[test]
    fn relevance_examples() {
        assert_eq!(relevance(&[Some(0), Some(1)], &[Some(0), Some(2)]).unwrap(), 0.5);
        assert_eq!(relevance(&[Some(0), None, Some(3)], &[Some(0), Some(1), Some(3)]).unwrap(), 1.0);
        assert_eq!(relevance(&[Some(0), Some(1)], &[None, None]).unwrap(), 0.0);
        assert_eq!(relevance(&[None, None], &[Some(0), Some(1)]).unwrap_err().category(), "contract");
    }

    fn table(rows: &[(&str, [Option<usize>; 2])]) -> BTreeMap<String, AttributeLabels> {
        rows.iter().map(|(id, a)| (id.to_string(), a.to_vec())).collect()
    }

    #[test]
    fn ndcg_examples() {
        let q = table(&[("q", [Some(1), Some(1)])]);
        let g = table(&[("x", [Some(1), Some(1)]), ("y", [Some(1), Some(0)]), ("z", [Some(0), Some(0)])]);
        assert_eq!(ndcg_at_k(&[list("q", &["x", "y", "z"])], &q, &g, 3).unwrap(), 1.0);
        let swapped = ndcg_at_k(&[list("q", &["y", "x", "z"])], &q, &g, 2).unwrap();
        let l3 = 3f64.log2();
        let want = ((0.5f64.exp2() - 1.0) + 1.0 / l3) / (1.0 + (0.5f64.exp2() - 1.0) / l3);
        assert!((swapped - want).abs() < 1e-12);
        assert!(swapped < 1.0);
        let zero = table(&[("q", [Some(5), Some(5)])]);
        assert_eq!(ndcg_at_k(&[list("q", &["z"])], &zero, &g, 1).unwrap(), 1.0);
    }

    #[test]
    fn report_files() {
        let truth: Truth = [("q".to_string(), BTreeSet::from(["x".to_string()]))].into();
        let q = table(&[("q", [Some(1), Some(1)])]);
        let g = table(&[("x", [Some(1), Some(1)]), ("y", [Some(1), Some(0)])]);
        let r = EvalReport::compute(&[list("q", &["y", "x"])], &truth, &q, &g, &[1, 2], serde_json::json!({})).unwrap();
        assert_eq!(r.top_k[&1], 0.0);
        assert_eq!(r.top_k[&2], 1.0);
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path(), "eval").unwrap();
        let csv = fs::read_to_string(dir.path().join("eval_topk.csv")).unwrap();
        assert_eq!(csv, "k,accuracy\n1,0\n2,1\n");
        let back: EvalReport = serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn increase_ratio_values() {
        let p = |gallery_size, accuracy| SweepPoint { gallery_size, accuracy };
        assert_eq!(increase_ratio(&[p(100, 0.5), p(500, 0.25)]), Some(1.0));
        assert_eq!(increase_ratio(&[p(100, 0.5), p(500, 0.0)]), None);
    }

    #[test]
    fn missing_checkpoint_is_config_error() {
        let set = RetrievalSet {
            gallery: Vec::new(),
            queries: Vec::new(),
        };
        let v = Variant {
            name: "DARN".into(),
            checkpoint: "/nonexistent/ck".into(),
            features: FeatureSpec::fc1(),
        };
        let err = run_ablation(&set, &[v], &EvalOptions::default()).unwrap_err();
        assert_eq!(err.category(), "config");
        assert!(err.to_string().contains("DARN"));
    }
}
