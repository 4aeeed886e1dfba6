//! Finite-difference gradient-check suite over every primitive and over the
//! full DARN objective. Shared by the `grad-check` command and the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{finite_difference_check, GradCheckOptions, GradCheckReport, Graph, NodeId};
use crate::error::Result;
use crate::losses::{total_loss, triplet_loss, Distance, FeatureSpec, RankingConfig, TripletIndex};
use crate::network::{build_dual_network, BoundDual, SubNetworkConfig};
use crate::schema::{AttributeLabels, AttributeSchema, Domain};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `Σ ‖y − target‖²` over the flattened rows of `y`.
fn squared_error(g: &mut Graph, y: NodeId, target: &Tensor) -> Result<NodeId> {
    let t = g.input(target.clone());
    let d = g.sub(y, t)?;
    let d = g.flatten(d)?;
    let n = g.row_norm(d, true)?;
    Ok(g.sum(n))
}

fn check(
    name: &str,
    mut params: Vec<Tensor>,
    opts: &GradCheckOptions,
    f: impl FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
) -> Result<CheckResult> {
    let report = finite_difference_check(&mut params, f, opts)?;
    Ok(CheckResult {
        name: name.into(),
        report,
    })
}

/// One check per differentiable primitive, on random inputs.
pub fn primitive_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let target = gaussian(&mut rng, &[2, 3, 3, 3]);
    let params = vec![gaussian(&mut rng, &[2, 2, 6, 5]), gaussian(&mut rng, &[3, 2, 3, 3]), gaussian(&mut rng, &[3])];
    out.push(check("conv2d(stride 2, pad 1)", params, opts, |g, p| {
        let y = g.conv2d(p[0], p[1], p[2], 2, 1)?;
        squared_error(g, y, &target)
    })?);

    let target = gaussian(&mut rng, &[2, 3, 3, 3]);
    out.push(check("maxpool", vec![gaussian(&mut rng, &[2, 3, 6, 7])], opts, |g, p| {
        let y = g.maxpool(p[0], 2, 2)?;
        squared_error(g, y, &target)
    })?);
    out.push(check("adaptive_maxpool_3x3", vec![gaussian(&mut rng, &[2, 3, 7, 5])], opts, |g, p| {
        let y = g.adaptive_maxpool_3x3(p[0])?;
        squared_error(g, y, &target)
    })?);

    let labels = [Some(1), None, Some(3)];
    let params = vec![gaussian(&mut rng, &[3, 5]), gaussian(&mut rng, &[5, 4]), gaussian(&mut rng, &[4])];
    out.push(check("linear + relu + softmax_cross_entropy", params, opts, |g, p| {
        let h = g.linear(p[0], p[1], p[2])?;
        let h = g.relu(h);
        g.softmax_cross_entropy(h, &labels)
    })?);

    let params = vec![gaussian(&mut rng, &[3, 2]), gaussian(&mut rng, &[3, 3])];
    out.push(check("concat + gather + slice + norm + scalar ops", params, opts, |g, p| {
        let c = g.concat(&[p[0], p[1]])?;
        let r = g.gather_rows(c, &[2, 0, 2])?;
        let s = g.slice_cols(r, 1, 4)?;
        let n = g.row_norm(s, false)?;
        let n = g.add_scalar(n, 0.3);
        let m = g.mean(n);
        Ok(g.scale(m, 2.5))
    })?);

    let params = vec![gaussian(&mut rng, &[4, 6]), gaussian(&mut rng, &[4, 6]), gaussian(&mut rng, &[4, 6])];
    out.push(check("triplet hinge (euclidean)", params, opts, |g, p| {
        let l = triplet_loss(g, p[0], p[1], p[2], 0.3, Distance::Euclidean)?;
        Ok(g.mean(l))
    })?);
    Ok(out)
}

/// Small desk-scale batch: two triplets with some missing labels.
fn probe_batch(cfg: &SubNetworkConfig, schema: &AttributeSchema, rng: &mut ChaCha8Rng) -> (Vec<(Domain, Tensor)>, Vec<AttributeLabels>) {
    let [c, h, w] = cfg.input_shape;
    let mut batch = Vec::new();
    let mut labels = Vec::new();
    for t in 0..2 {
        for d in [Domain::Offline, Domain::Online, Domain::Online] {
            let img: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
            batch.push((d, Tensor::new(vec![c, h, w], img).expect("image shape")));
            labels.push(
                schema
                    .categories()
                    .iter()
                    .enumerate()
                    .map(|(k, cat)| (k + t != 2).then(|| rng.random_range(0..cat.cardinality)))
                    .collect(),
            );
        }
    }
    (batch, labels)
}

/// Checks `total_loss` against central differences over the parameters of
/// both sub-networks.
pub fn darn_total_loss_check(
    cfg: &SubNetworkConfig,
    schema: &AttributeSchema,
    features: FeatureSpec,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<CheckResult> {
    let dual = build_dual_network(cfg, schema, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let (batch, labels) = probe_batch(cfg, schema, &mut rng);
    let ranking = RankingConfig {
        features: features.clone(),
        ..Default::default()
    };
    let n_shop = dual.shop().params().len();
    let params: Vec<Tensor> = dual.nets().iter().flat_map(|(_, n)| n.params().iter().cloned()).collect();
    let triplets = [0, 3].map(|b| TripletIndex {
        anchor: b,
        positive: b + 1,
        negative: b + 2,
    });
    check(&format!("DARN total_loss ({features})"), params, opts, |g, ids| {
        let bound = BoundDual {
            shop: ids[..n_shop].to_vec(),
            street: ids[n_shop..].to_vec(),
        };
        let refs: Vec<(Domain, &Tensor)> = batch.iter().map(|(d, t)| (*d, t)).collect();
        let routed = dual.route_batch(g, &bound, &refs)?;
        Ok(total_loss(g, &routed, &labels, &triplets, &ranking)?.total)
    })
}

/// Primitive suite followed by the full objective with FC1+C4+C5 features.
pub fn full_suite(cfg: &SubNetworkConfig, schema: &AttributeSchema, seed: u64, opts: &GradCheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = primitive_suite(seed, opts)?;
    out.push(darn_total_loss_check(cfg, schema, FeatureSpec::fc1_c4_c5(), seed, opts)?);
    Ok(out)
}

pub fn max_rel_error(results: &[CheckResult]) -> f64 {
    results.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max)
}
