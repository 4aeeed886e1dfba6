use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use serde::{Deserialize, Serialize};

use darn::autodiff::GradCheckOptions;
use darn::checks::{full_suite, max_rel_error};
use darn::eval::{default_ladder, evaluate_network, gallery_sweep, increase_ratio, run_ablation, train_ladder, EvalOptions, RetrievalSet, Rung};
use darn::features::{extract as extract_features, fit_gallery_pca, read_features, write_features, PcaModel};
use darn::index::{results_csv, Gallery};
use darn::losses::{Distance, FeatureSpec, RankingConfig};
use darn::network::{build_dual_network, build_shared_network, Checkpoint, SubNetworkConfig, Topology};
use darn::schema::{AttributeLabels, AttributeSchema, Category};
use darn::synth::{self, Dataset, SynthConfig};
use darn::trainer::{train as run_training, Sample, TrainConfig};
use darn::{Error, Result, Tensor};

use crate::config::{echo, resolve, Overrides};
use crate::Common;

fn required<'a>(v: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| Error::Config {
        field: field.into(),
        reason: "required".into(),
    })
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn make_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Wall-clock notes go to `run.log` so that JSON/CSV outputs stay
/// byte-identical across runs.
fn run_log(out: &Path, lines: &[String]) -> Result<()> {
    write_text(&out.join("run.log"), &(lines.join("\n") + "\n"))
}

fn parse_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}"))).collect()
}

/// Comma-separated list flag (a bare `Vec` would make clap expect repeats).
#[derive(Clone, Debug)]
pub struct List(Vec<usize>);

fn parse_usize_list(s: &str) -> std::result::Result<List, String> {
    parse_list(s).map(List)
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let v = parse_list(s)?;
    <[usize; 3]>::try_from(v).map_err(|_| "expected C,H,W".to_string())
}

fn parse_schema(s: &str) -> std::result::Result<AttributeSchema, String> {
    let cats = s
        .split(',')
        .map(|p| {
            let (name, card) = p.split_once(':').ok_or_else(|| format!("`{p}`: expected name:cardinality"))?;
            let cardinality = card.trim().parse().map_err(|e| format!("`{p}`: {e}"))?;
            Ok(Category {
                name: name.trim().to_string(),
                cardinality,
            })
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    AttributeSchema::new(cats).map_err(|e| e.to_string())
}

fn parse_features(s: &str) -> std::result::Result<FeatureSpec, String> {
    s.parse::<FeatureSpec>().map_err(|e| e.to_string())
}

fn parse_distance(s: &str) -> std::result::Result<Distance, String> {
    s.parse::<Distance>().map_err(|e| e.to_string())
}

fn parse_topology(s: &str) -> std::result::Result<Topology, String> {
    match s {
        "dual" => Ok(Topology::Dual),
        "shared" => Ok(Topology::Shared),
        _ => Err(format!("`{s}`: expected dual or shared")),
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, env = "DARN_ITEM_COUNT")]
    item_count: Option<usize>,
    /// Attribute schema as `name:cardinality,...`.
    #[arg(long, value_parser = parse_schema)]
    schema: Option<AttributeSchema>,
    /// Image shape as `C,H,W`.
    #[arg(long, value_parser = parse_shape)]
    image_shape: Option<[usize; 3]>,
    #[arg(long, env = "DARN_OFFLINE_PER_ITEM")]
    offline_per_item: Option<usize>,
    #[arg(long)]
    brightness_sigma: Option<f64>,
    #[arg(long)]
    color_cast_sigma: Option<f64>,
    #[arg(long)]
    clutter_density: Option<f64>,
    #[arg(long)]
    occlusion_prob: Option<f64>,
    #[arg(long)]
    max_shift: Option<usize>,
    #[arg(long)]
    missing_fraction: Option<f64>,
    #[arg(long, env = "DARN_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct GenDataRun {
    out: Option<PathBuf>,
    #[serde(flatten)]
    synth: SynthConfig,
}

pub fn gen_data(a: GenDataArgs) -> Result<u8> {
    let mut o = Overrides::default();
    o.set("out", a.common.out)
        .set("item_count", a.item_count)
        .set("schema", a.schema)
        .set("image_shape", a.image_shape)
        .set("offline_per_item", a.offline_per_item)
        .set("brightness_sigma", a.brightness_sigma)
        .set("color_cast_sigma", a.color_cast_sigma)
        .set("clutter_density", a.clutter_density)
        .set("occlusion_prob", a.occlusion_prob)
        .set("max_shift", a.max_shift)
        .set("missing_fraction", a.missing_fraction)
        .set("seed", a.seed);
    let run: GenDataRun = resolve(a.common.config.as_deref(), o)?;
    let out = required(&run.out, "out")?;
    run.synth.validate()?;
    let t = Instant::now();
    let m = synth::generate(&run.synth, out)?;
    echo(out, &run)?;
    run_log(out, &[format!("generated {} images in {:.3}s", m.image_count, t.elapsed().as_secs_f64())])?;
    println!("{} items, {} images -> {}", m.item_count, m.image_count, out.join("manifest.json").display());
    Ok(0)
}

// ---------------------------------------------------------------- train

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset manifest.
    #[arg(long, env = "DARN_DATA")]
    data: Option<PathBuf>,
    /// Fraction of items used for training; the rest is held out.
    #[arg(long, env = "DARN_TRAIN_FRAC")]
    train_frac: Option<f64>,
    /// dual or shared.
    #[arg(long, value_parser = parse_topology)]
    topology: Option<Topology>,
    #[arg(long, env = "DARN_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long)]
    batch_triplets: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long, env = "DARN_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    /// Ranking feature layers, e.g. `fc1,c4,c5`.
    #[arg(long, value_parser = parse_features)]
    features: Option<FeatureSpec>,
    /// euclidean or squared-euclidean.
    #[arg(long, value_parser = parse_distance)]
    distance: Option<Distance>,
    #[arg(long)]
    attr_weight: Option<f64>,
    #[arg(long)]
    rank_weight: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct TrainRun {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    train_frac: f64,
    topology: Topology,
    network: SubNetworkConfig,
    train: TrainConfig,
    ranking: RankingConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            data: None,
            out: None,
            train_frac: 0.8,
            topology: Topology::Dual,
            network: SubNetworkConfig::default(),
            train: TrainConfig::default(),
            ranking: RankingConfig::default(),
        }
    }
}

fn load_dataset(path: &Path, net: Option<&SubNetworkConfig>) -> Result<Dataset> {
    let ds = synth::load(path)?;
    if let Some(n) = net {
        if n.input_shape != ds.image_shape {
            return Err(Error::Config {
                field: "network.input_shape".into(),
                reason: format!("{:?} but dataset images are {:?}", n.input_shape, ds.image_shape),
            });
        }
    }
    Ok(ds)
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitInfo {
    train_frac: f64,
    seed: u64,
    test_items: Vec<String>,
}

fn split_info(ds: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, SplitInfo)> {
    let (train, test) = synth::split(ds, train_frac, seed)?;
    let test_items = test.item_ids().into_iter().map(str::to_owned).collect();
    Ok((
        train,
        SplitInfo {
            train_frac,
            seed,
            test_items,
        },
    ))
}

pub fn train(a: TrainArgs) -> Result<u8> {
    let mut o = Overrides::default();
    o.set("data", a.data)
        .set("out", a.common.out)
        .set("train_frac", a.train_frac)
        .set("topology", a.topology)
        .set("train.epochs", a.epochs)
        .set("train.batch_triplets", a.batch_triplets)
        .set("train.learning_rate", a.learning_rate)
        .set("train.momentum", a.momentum)
        .set("train.seed", a.seed)
        .set("train.checkpoint_every", a.checkpoint_every)
        .set("ranking.margin", a.margin)
        .set("ranking.features", a.features)
        .set("ranking.distance", a.distance)
        .set("ranking.attr_weight", a.attr_weight)
        .set("ranking.rank_weight", a.rank_weight);
    let run: TrainRun = resolve(a.common.config.as_deref(), o)?;
    let out = required(&run.out, "out")?;
    run.network.validate()?;
    run.train.validate()?;
    run.ranking.validate()?;
    let ds = load_dataset(required(&run.data, "data")?, Some(&run.network))?;
    let (train_ds, split) = split_info(&ds, run.train_frac, run.train.seed)?;
    let net = match run.topology {
        Topology::Dual => build_dual_network(&run.network, &ds.schema, run.train.seed)?,
        Topology::Shared => build_shared_network(&run.network, &ds.schema, run.train.seed)?,
    };

    make_out(out)?;
    echo(out, &run)?;
    let t = Instant::now();
    let meta = serde_json::json!({ "split": split });
    let outcome = run_training(&train_ds.samples, net, &run.train, &run.ranking, out, meta)?;
    let last = outcome.log.last().map_or(f64::NAN, |r| r.total);
    run_log(out, &[format!("trained {} epochs in {:.3}s", run.train.epochs, t.elapsed().as_secs_f64())])?;
    println!("checkpoint {} (final batch loss {last:.6})", outcome.checkpoint.display());
    Ok(0)
}

// ---------------------------------------------------------------- extract

#[derive(Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "DARN_DATA")]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_features)]
    features: Option<FeatureSpec>,
    /// PCA target dimension fitted on gallery features (0 disables PCA).
    #[arg(long)]
    pca_dim: Option<usize>,
    /// Apply an existing PCA model instead of fitting one.
    #[arg(long)]
    pca: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct ExtractRun {
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    features: FeatureSpec,
    pca_dim: usize,
    pca: Option<PathBuf>,
}

impl Default for ExtractRun {
    fn default() -> Self {
        ExtractRun {
            checkpoint: None,
            data: None,
            out: None,
            features: FeatureSpec::fc1_c4_c5(),
            pca_dim: 64,
            pca: None,
        }
    }
}

pub fn extract(a: ExtractArgs) -> Result<u8> {
    let mut o = Overrides::default();
    o.set("checkpoint", a.checkpoint)
        .set("data", a.data)
        .set("out", a.common.out)
        .set("features", a.features)
        .set("pca_dim", a.pca_dim)
        .set("pca", a.pca);
    let run: ExtractRun = resolve(a.common.config.as_deref(), o)?;
    let out = required(&run.out, "out")?;
    let ck = Checkpoint::load(required(&run.checkpoint, "checkpoint")?)?;
    let ds = load_dataset(required(&run.data, "data")?, Some(ck.network.config()))?;
    let gallery: Vec<&Sample> = ds.online().collect();
    let queries: Vec<&Sample> = ds.offline().collect();
    let pca = match (&run.pca, run.pca_dim) {
        (Some(p), _) => Some(PcaModel::load(p)?),
        (None, 0) => None,
        (None, d) => Some(fit_gallery_pca(&ck.network, &gallery, &run.features, d)?),
    };
    let g = extract_features(&ck.network, &gallery, &run.features, pca.as_ref())?;
    let q = extract_features(&ck.network, &queries, &run.features, pca.as_ref())?;

    make_out(out)?;
    echo(out, &run)?;
    write_features(&out.join("gallery.tnsr"), &g)?;
    write_features(&out.join("queries.tnsr"), &q)?;
    if let Some(p) = &pca {
        p.save(&out.join("pca.bin"))?;
    }
    println!("{} gallery and {} query features of dimension {}", g.len(), q.len(), g.first().map_or(0, |f| f.values.len()));
    Ok(0)
}

// ---------------------------------------------------------------- index

#[derive(Args)]
pub struct IndexArgs {
    #[command(flatten)]
    common: Common,
    /// Gallery feature file (TNSR matrix with `.ids` sidecar).
    #[arg(long)]
    features: Option<PathBuf>,
    /// Dataset manifest supplying gallery attributes for NDCG.
    #[arg(long, env = "DARN_DATA")]
    data: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct IndexRun {
    features: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn attribute_table(ds: &Dataset) -> BTreeMap<String, AttributeLabels> {
    ds.samples.iter().map(|s| (s.id.clone(), s.attributes.clone())).collect()
}

pub fn index(a: IndexArgs) -> Result<u8> {
    let mut o = Overrides::default();
    o.set("features", a.features).set("data", a.data).set("out", a.common.out);
    let run: IndexRun = resolve(a.common.config.as_deref(), o)?;
    let out = required(&run.out, "out")?;
    let (ids, m) = read_features(required(&run.features, "features")?)?;
    let mut attrs = BTreeMap::new();
    if let Some(d) = &run.data {
        let table = attribute_table(&synth::load(d)?);
        for id in &ids {
            if let Some(a) = table.get(id) {
                attrs.insert(id.clone(), a.clone());
            }
        }
    }
    let gallery = Gallery::from_matrix(ids, &m, attrs)?;

    make_out(out)?;
    echo(out, &run)?;
    gallery.save(&out.join("gallery"))?;
    println!("gallery of {} rows, dimension {}", gallery.len(), gallery.dim());
    Ok(0)
}

// ---------------------------------------------------------------- query

#[derive(Args)]
pub struct QueryArgs {
    #[command(flatten)]
    common: Common,
    /// Gallery written by `index` (path without extension).
    #[arg(long)]
    gallery: Option<PathBuf>,
    /// Query features: a TNSR matrix with `.ids` sidecar, or one 1-D vector.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Id reported for a single 1-D query vector.
    #[arg(long)]
    query_id: Option<String>,
    #[arg(long, env = "DARN_K")]
    k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct QueryRun {
    gallery: Option<PathBuf>,
    queries: Option<PathBuf>,
    query_id: String,
    k: usize,
    out: Option<PathBuf>,
}

impl Default for QueryRun {
    fn default() -> Self {
        QueryRun {
            gallery: None,
            queries: None,
            query_id: "query".into(),
            k: 20,
            out: None,
        }
    }
}

pub fn query(a: QueryArgs) -> Result<u8> {
    let mut o = Overrides::default();
    o.set("gallery", a.gallery)
        .set("queries", a.queries)
        .set("query_id", a.query_id)
        .set("k", a.k)
        .set("out", a.common.out);
    let run: QueryRun = resolve(a.common.config.as_deref(), o)?;
    let out = required(&run.out, "out")?;
    if run.k == 0 {
        return Err(Error::Config {
            field: "k".into(),
            reason: "must be at least 1".into(),
        });
    }
    let gallery = Gallery::load(required(&run.gallery, "gallery")?)?;
    let qpath = required(&run.queries, "queries")?;
    let t = Tensor::load(qpath)?;
    let queries: Vec<(String, Vec<f64>)> = if t.ndim() == 1 {
        vec![(run.query_id.clone(), t.into_data())]
    } else {
        let (ids, m) = read_features(qpath)?;
        ids.into_iter().enumerate().map(|(r, id)| (id, m.row(r).to_vec())).collect()
    };
    let refs: Vec<(&str, &[f64])> = queries.iter().map(|(i, v)| (i.as_str(), v.as_slice())).collect();
    let results = gallery.batch_query(&refs, run.k)?;

    make_out(out)?;
    echo(out, &run)?;
    write_text(&out.join("results.csv"), &results_csv(&results))?;
    println!("{} queries ranked against {} gallery rows", results.len(), gallery.len());
    Ok(0)
}

// ---------------------------------------------------------------- evaluate

#[derive(Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "DARN_DATA")]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_features)]
    features: Option<FeatureSpec>,
    /// Used only when the checkpoint does not record its split.
    #[arg(long, env = "DARN_TRAIN_FRAC")]
    train_frac: Option<f64>,
    /// Used only when the checkpoint does not record its split.
    #[arg(long, env = "DARN_SEED")]
    seed: Option<u64>,
    /// Cut-offs, e.g. `1,5,10,20`.
    #[arg(long, value_parser = parse_usize_list)]
    ks: Option<List>,
    /// PCA target dimension (0 disables PCA).
    #[arg(long)]
    pca_dim: Option<usize>,
    /// Gallery sizes for the robustness sweep, e.g. `100,200,300`.
    #[arg(long, value_parser = parse_usize_list)]
    gallery_sizes: Option<List>,
    #[arg(long)]
    sweep_k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct EvaluateRun {
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    features: FeatureSpec,
    train_frac: f64,
    seed: u64,
    eval: EvalOptions,
}

impl Default for EvaluateRun {
    fn default() -> Self {
        EvaluateRun {
            checkpoint: None,
            data: None,
            out: None,
            features: FeatureSpec::fc1_c4_c5(),
            train_frac: 0.8,
            seed: 0,
            eval: EvalOptions::default(),
        }
    }
}

fn eval_overrides(o: &mut Overrides, ks: Option<List>, pca_dim: Option<usize>, sizes: Option<List>, sweep_k: Option<usize>) {
    o.set("eval.ks", ks.map(|l| l.0))
        .set("eval.pca_dim", pca_dim.map(|d| (d > 0).then_some(d)))
        .set("eval.gallery_sizes", sizes.map(|l| l.0))
        .set("eval.sweep_k", sweep_k);
}

fn test_items(ck: &Checkpoint, ds: &Dataset, train_frac: f64, seed: u64) -> Result<BTreeSet<String>> {
    if let Some(split) = ck.meta.get("run").and_then(|r| r.get("split")) {
        let info: SplitInfo = serde_json::from_value(split.clone()).map_err(|e| Error::Format {
            what: "checkpoint metadata",
            detail: e.to_string(),
        })?;
        return Ok(info.test_items.into_iter().collect());
    }
    let (_, info) = split_info(ds, train_frac, seed)?;
    Ok(info.test_items.into_iter().collect())
}

pub fn evaluate(a: EvaluateArgs) -> Result<u8> {
    let mut o = Overrides::default();
    o.set("checkpoint", a.checkpoint)
        .set("data", a.data)
        .set("out", a.common.out)
        .set("features", a.features)
        .set("train_frac", a.train_frac)
        .set("seed", a.seed);
    eval_overrides(&mut o, a.ks, a.pca_dim, a.gallery_sizes, a.sweep_k);
    let run: EvaluateRun = resolve(a.common.config.as_deref(), o)?;
    let out = required(&run.out, "out")?;
    let ck = Checkpoint::load(required(&run.checkpoint, "checkpoint")?)?;
    let ds = load_dataset(required(&run.data, "data")?, Some(ck.network.config()))?;
    let test = test_items(&ck, &ds, run.train_frac, run.seed)?;
    let test_refs: BTreeSet<&str> = test.iter().map(String::as_str).collect();
    let set = RetrievalSet::new(&ds.samples, &test_refs);
    if set.queries.is_empty() {
        return Err(Error::Config {
            field: "train_frac".into(),
            reason: "the test split has no offline images to query with".into(),
        });
    }
    let t = Instant::now();
    let config = serde_json::to_value(&run).expect("config serializes");
    let report = evaluate_network(&ck.network, &set, &run.features, &run.eval, config)?;
    let sweep = if run.eval.gallery_sizes.is_empty() {
        Vec::new()
    } else {
        gallery_sweep(&ck.network, &set, &run.features, &run.eval)?
    };

    make_out(out)?;
    echo(out, &run)?;
    report.write(out, "eval")?;
    if !sweep.is_empty() {
        let mut csv = String::from("gallery_size,accuracy\n");
        for p in &sweep {
            csv.push_str(&format!("{},{}\n", p.gallery_size, p.accuracy));
        }
        write_text(&out.join("sweep.csv"), &csv)?;
        if let Some(r) = increase_ratio(&sweep) {
            println!("increase ratio {r:.4}");
        }
    }
    run_log(out, &[format!("evaluated {} queries in {:.3}s", report.query_count, t.elapsed().as_secs_f64())])?;
    for (k, v) in &report.top_k {
        println!("top-{k} accuracy {v:.4}  ndcg@{k} {:.4}", report.ndcg[k]);
    }
    Ok(0)
}

// ---------------------------------------------------------------- ablate

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, env = "DARN_DATA")]
    data: Option<PathBuf>,
    #[arg(long, env = "DARN_TRAIN_FRAC")]
    train_frac: Option<f64>,
    #[arg(long, env = "DARN_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long)]
    batch_triplets: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long, env = "DARN_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long, value_parser = parse_distance)]
    distance: Option<Distance>,
    #[arg(long)]
    attr_weight: Option<f64>,
    #[arg(long)]
    rank_weight: Option<f64>,
    #[arg(long, value_parser = parse_usize_list)]
    ks: Option<List>,
    #[arg(long)]
    pca_dim: Option<usize>,
    #[arg(long, value_parser = parse_usize_list)]
    gallery_sizes: Option<List>,
    #[arg(long)]
    sweep_k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct AblateRun {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    train_frac: f64,
    network: SubNetworkConfig,
    train: TrainConfig,
    ranking: RankingConfig,
    eval: EvalOptions,
    rungs: Vec<Rung>,
}

impl Default for AblateRun {
    fn default() -> Self {
        AblateRun {
            data: None,
            out: None,
            train_frac: 0.8,
            network: SubNetworkConfig::default(),
            train: TrainConfig::default(),
            ranking: RankingConfig::default(),
            eval: EvalOptions::default(),
            rungs: default_ladder(),
        }
    }
}

/// Five evenly spaced sizes from the number of query items to the full
/// gallery.
fn auto_sizes(min: usize, max: usize) -> Vec<usize> {
    if max <= min {
        return vec![max];
    }
    let mut v: Vec<usize> = (0..5).map(|i| min + (max - min) * i / 4).collect();
    v.dedup();
    v
}

pub fn ablate(a: AblateArgs) -> Result<u8> {
    let mut o = Overrides::default();
    o.set("data", a.data)
        .set("out", a.common.out)
        .set("train_frac", a.train_frac)
        .set("train.epochs", a.epochs)
        .set("train.batch_triplets", a.batch_triplets)
        .set("train.learning_rate", a.learning_rate)
        .set("train.momentum", a.momentum)
        .set("train.seed", a.seed)
        .set("ranking.margin", a.margin)
        .set("ranking.distance", a.distance)
        .set("ranking.attr_weight", a.attr_weight)
        .set("ranking.rank_weight", a.rank_weight)
        .set("eval.seed", a.seed);
    eval_overrides(&mut o, a.ks, a.pca_dim, a.gallery_sizes, a.sweep_k);
    let mut run: AblateRun = resolve(a.common.config.as_deref(), o)?;
    let out = required(&run.out, "out")?.to_path_buf();
    run.network.validate()?;
    run.train.validate()?;
    run.ranking.validate()?;
    if run.rungs.is_empty() {
        return Err(Error::Config {
            field: "rungs".into(),
            reason: "at least one variant is required".into(),
        });
    }
    let ds = load_dataset(required(&run.data, "data")?, Some(&run.network))?;
    let (train_ds, split) = split_info(&ds, run.train_frac, run.train.seed)?;
    let test: BTreeSet<&str> = split.test_items.iter().map(String::as_str).collect();
    let set = RetrievalSet::new(&ds.samples, &test);
    if set.queries.is_empty() {
        return Err(Error::Config {
            field: "train_frac".into(),
            reason: "the test split has no offline images to query with".into(),
        });
    }
    if run.eval.gallery_sizes.is_empty() {
        run.eval.gallery_sizes = auto_sizes(test.len(), set.gallery.len());
    }

    make_out(&out)?;
    echo(&out, &run)?;
    let t = Instant::now();
    let variants = train_ladder(&run.rungs, &train_ds.samples, &run.network, &ds.schema, &run.train, &run.ranking, &out.join("models"))?;
    let trained = t.elapsed().as_secs_f64();
    let table = run_ablation(&set, &variants, &run.eval)?;
    table.write(&out)?;
    run_log(
        &out,
        &[
            format!("trained {} variants in {trained:.3}s", variants.len()),
            format!("evaluated in {:.3}s", t.elapsed().as_secs_f64() - trained),
        ],
    )?;
    print!("{}", table.to_csv());
    Ok(0)
}

// ---------------------------------------------------------------- grad-check

#[derive(Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, env = "DARN_SEED")]
    seed: Option<u64>,
    /// Central-difference step.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Coordinates sampled per parameter tensor.
    #[arg(long)]
    coords_per_tensor: Option<usize>,
    /// Pass/fail threshold on the maximum relative error.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct GradCheckRun {
    out: Option<PathBuf>,
    seed: u64,
    epsilon: f64,
    coords_per_tensor: usize,
    max_resamples: usize,
    threshold: f64,
    network: SubNetworkConfig,
    schema: AttributeSchema,
}

impl Default for GradCheckRun {
    fn default() -> Self {
        let o = GradCheckOptions::default();
        GradCheckRun {
            out: None,
            seed: 0,
            epsilon: o.epsilon,
            coords_per_tensor: o.coords_per_tensor,
            max_resamples: o.max_resamples,
            threshold: 1e-4,
            network: SubNetworkConfig::default(),
            schema: AttributeSchema::desk_default(),
        }
    }
}

#[derive(Serialize)]
struct GradCheckLine {
    check: String,
    max_rel_error: f64,
    coordinates: usize,
    skipped_kinks: usize,
}

pub fn grad_check(a: GradCheckArgs) -> Result<u8> {
    let mut o = Overrides::default();
    o.set("out", a.common.out)
        .set("seed", a.seed)
        .set("epsilon", a.epsilon)
        .set("coords_per_tensor", a.coords_per_tensor)
        .set("threshold", a.threshold);
    let run: GradCheckRun = resolve(a.common.config.as_deref(), o)?;
    run.network.validate()?;
    let opts = GradCheckOptions {
        epsilon: run.epsilon,
        coords_per_tensor: run.coords_per_tensor,
        seed: run.seed,
        max_resamples: run.max_resamples,
    };
    let t = Instant::now();
    let results = full_suite(&run.network, &run.schema, run.seed, &opts)?;
    let lines: Vec<GradCheckLine> = results
        .iter()
        .map(|r| GradCheckLine {
            check: r.name.clone(),
            max_rel_error: r.report.max_rel_error,
            coordinates: r.report.entries.len(),
            skipped_kinks: r.report.skipped_kinks,
        })
        .collect();
    for l in &lines {
        println!(
            "{:<48} max rel err {:.3e} ({} coords, {} kink skips)",
            l.check, l.max_rel_error, l.coordinates, l.skipped_kinks
        );
    }
    let worst = max_rel_error(&results);
    println!("max relative error {worst:.6e}");
    if let Some(out) = &run.out {
        make_out(out)?;
        echo(out, &run)?;
        let json = serde_json::json!({ "checks": lines, "max_rel_error": worst, "pass": worst < run.threshold });
        write_text(&out.join("gradcheck.json"), &serde_json::to_string_pretty(&json).expect("report serializes"))?;
        run_log(out, &[format!("grad-check took {:.3}s", t.elapsed().as_secs_f64())])?;
    }
    Ok(if worst < run.threshold { 0 } else { 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parsers() {
        assert_eq!(parse_list("1, 5,20").unwrap(), vec![1, 5, 20]);
        assert!(parse_list("1,x").is_err());
        assert_eq!(parse_shape("3,16,16").unwrap(), [3, 16, 16]);
        assert!(parse_shape("3,16").is_err());
        let s = parse_schema("color:6,sleeve:4").unwrap();
        assert_eq!(s.total_cardinality(), 10);
        assert!(parse_schema("color:1").is_err());
        assert_eq!(auto_sizes(100, 500), vec![100, 200, 300, 400, 500]);
        assert_eq!(parse_topology("shared").unwrap(), Topology::Shared);
    }
}
