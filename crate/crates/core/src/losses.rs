//! Joint objective: per-branch attribute cross-entropy on both sub-networks
//! plus the cross-network triplet ranking loss
//! `max(0, m + dist(a, b) - dist(a, c))` with `a` an offline anchor, `b` its
//! online match and `c` a different online item.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::network::{ForwardOutputs, RoutedOutputs};
use crate::schema::{AttributeLabels, Domain};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureLayer {
    Fc1,
    C4,
    C5,
}

/// Which activations make up the ranking feature. Always concatenated in the
/// fixed order FC1, pooled C4, pooled C5.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FeatureSpec(BTreeSet<FeatureLayer>);

impl FeatureSpec {
    pub fn new(layers: &[FeatureLayer]) -> Result<Self> {
        let set: BTreeSet<_> = layers.iter().copied().collect();
        if !set.contains(&FeatureLayer::Fc1) {
            return Err(Error::config("features", "FC1 must be part of the ranking feature"));
        }
        Ok(FeatureSpec(set))
    }

    pub fn fc1() -> Self {
        FeatureSpec::new(&[FeatureLayer::Fc1]).unwrap()
    }

    pub fn fc1_c5() -> Self {
        FeatureSpec::new(&[FeatureLayer::Fc1, FeatureLayer::C5]).unwrap()
    }

    pub fn fc1_c4_c5() -> Self {
        FeatureSpec::new(&[FeatureLayer::Fc1, FeatureLayer::C4, FeatureLayer::C5]).unwrap()
    }

    pub fn contains(&self, l: FeatureLayer) -> bool {
        self.0.contains(&l)
    }

    pub fn layers(&self) -> impl Iterator<Item = FeatureLayer> + '_ {
        self.0.iter().copied()
    }

    /// Segment widths in concatenation order.
    pub fn segment_widths(&self, fc1_dim: usize, f4: usize, f5: usize) -> Vec<usize> {
        self.layers()
            .map(|l| match l {
                FeatureLayer::Fc1 => fc1_dim,
                FeatureLayer::C4 => 9 * f4,
                FeatureLayer::C5 => 9 * f5,
            })
            .collect()
    }

    pub fn dim(&self, fc1_dim: usize, f4: usize, f5: usize) -> usize {
        self.segment_widths(fc1_dim, f4, f5).iter().sum()
    }
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self
            .layers()
            .map(|l| match l {
                FeatureLayer::Fc1 => "fc1",
                FeatureLayer::C4 => "c4",
                FeatureLayer::C5 => "c5",
            })
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for FeatureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            layers.push(match part.to_ascii_lowercase().as_str() {
                "fc1" => FeatureLayer::Fc1,
                "c4" | "conv4" => FeatureLayer::C4,
                "c5" | "conv5" => FeatureLayer::C5,
                other => return Err(Error::config("features", format!("unknown layer `{other}`"))),
            });
        }
        FeatureSpec::new(&layers)
    }
}

impl TryFrom<String> for FeatureSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FeatureSpec> for String {
    fn from(s: FeatureSpec) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Euclidean,
    SquaredEuclidean,
}

impl FromStr for Distance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Distance::Euclidean),
            "squared_euclidean" | "squared-euclidean" => Ok(Distance::SquaredEuclidean),
            other => Err(Error::config("distance", format!("unknown distance `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingConfig {
    pub margin: f64,
    pub features: FeatureSpec,
    pub distance: Distance,
    pub attr_weight: f64,
    pub rank_weight: f64,
}

impl Default for RankingConfig {
    fn default() -> Self {
        RankingConfig {
            margin: 0.3,
            features: FeatureSpec::fc1(),
            distance: Distance::Euclidean,
            attr_weight: 1.0,
            rank_weight: 1.0,
        }
    }
}

impl RankingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::config("margin", "must be positive"));
        }
        for (name, w) in [("attr_weight", self.attr_weight), ("rank_weight", self.rank_weight)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Heuristic margin: `0.3 * mean_pair_distance / unit_scale`.
pub fn calibrated_margin(mean_pair_distance: f64, unit_scale: f64) -> f64 {
    0.3 * mean_pair_distance / unit_scale
}

/// `[N, D]` ranking feature: FC1, then the 3x3-pooled C4 and C5 maps
/// (flattened), for whichever layers `spec` selects. Also returns segment
/// widths.
pub fn ranking_feature(
    g: &mut Graph,
    outputs: &ForwardOutputs,
    spec: &FeatureSpec,
) -> Result<(NodeId, Vec<usize>)> {
    if !spec.contains(FeatureLayer::Fc1) {
        return Err(Error::config("features", "FC1 must be part of the ranking feature"));
    }
    let mut parts = Vec::new();
    for layer in spec.layers() {
        let node = match layer {
            FeatureLayer::Fc1 => outputs.fc1,
            FeatureLayer::C4 => {
                let p = g.adaptive_maxpool_3x3(outputs.c4)?;
                g.flatten(p)?
            }
            FeatureLayer::C5 => {
                let p = g.adaptive_maxpool_3x3(outputs.c5)?;
                g.flatten(p)?
            }
        };
        parts.push(node);
    }
    let widths = parts.iter().map(|&p| g.value(p).shape()[1]).collect();
    if parts.len() == 1 {
        return Ok((parts[0], widths));
    }
    Ok((g.concat(&parts)?, widths))
}

/// Row-wise hinge over `[T, D]` anchor / positive / negative features,
/// giving `[T]` losses.
pub fn triplet_loss(
    g: &mut Graph,
    a: NodeId,
    b: NodeId,
    c: NodeId,
    margin: f64,
    distance: Distance,
) -> Result<NodeId> {
    let squared = distance == Distance::SquaredEuclidean;
    let ab = g.sub(a, b).map_err(|_| triplet_dims(g, a, b, c))?;
    let ac = g.sub(a, c).map_err(|_| triplet_dims(g, a, b, c))?;
    let dab = g.row_norm(ab, squared)?;
    let dac = g.row_norm(ac, squared)?;
    let diff = g.sub(dab, dac)?;
    let shifted = g.add_scalar(diff, margin);
    Ok(g.relu(shifted))
}

fn triplet_dims(g: &Graph, a: NodeId, b: NodeId, c: NodeId) -> Error {
    Error::dim(
        "triplet_loss",
        format!(
            "anchor {:?}, positive {:?}, negative {:?}",
            g.value(a).shape(),
            g.value(b).shape(),
            g.value(c).shape()
        ),
    )
}

/// Triplet loss of three plain vectors.
pub fn triplet_loss_value(a: &[f64], b: &[f64], c: &[f64], margin: f64, distance: Distance) -> Result<f64> {
    let mut g = Graph::new();
    let row = |g: &mut Graph, v: &[f64]| g.input(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap());
    let (a, b, c) = (row(&mut g, a), row(&mut g, b), row(&mut g, c));
    let l = triplet_loss(&mut g, a, b, c, margin, distance)?;
    Ok(g.value(l).data()[0])
}

/// A training triplet as indices into the routed sample list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletIndex {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Handles for the weighted objective and its two unweighted components.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: NodeId,
    pub attr: NodeId,
    pub rank: NodeId,
}

fn add_all(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    match terms.split_first() {
        None => Ok(g.input(Tensor::scalar(0.0))),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            Ok(acc)
        }
    }
}

/// Sum over both domains and all branches of each branch's mean
/// cross-entropy on its sub-batch.
pub fn attribute_loss(
    g: &mut Graph,
    routed: &RoutedOutputs,
    labels: &[AttributeLabels],
) -> Result<NodeId> {
    if labels.len() != routed.positions.len() {
        return Err(Error::Contract(format!(
            "{} label rows for {} samples",
            labels.len(),
            routed.positions.len()
        )));
    }
    let mut terms = Vec::new();
    for domain in [Domain::Online, Domain::Offline] {
        let Some(out) = routed.for_domain(domain) else { continue };
        let rows: Vec<&AttributeLabels> = routed
            .positions
            .iter()
            .zip(labels)
            .filter(|((d, _), _)| *d == domain)
            .map(|(_, l)| l)
            .collect();
        for (k, &logits) in out.branch_logits.iter().enumerate() {
            let col: Vec<Option<usize>> = rows
                .iter()
                .map(|l| l.get(k).copied().flatten())
                .collect();
            terms.push(g.softmax_cross_entropy(logits, &col)?);
        }
    }
    add_all(g, &terms)
}

/// Mean triplet loss over `triplets`, each anchor offline and each
/// positive/negative online.
pub fn ranking_loss(
    g: &mut Graph,
    routed: &RoutedOutputs,
    triplets: &[TripletIndex],
    cfg: &RankingConfig,
) -> Result<NodeId> {
    if triplets.is_empty() {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let pos = |i: usize, want: Domain, role: &str| -> Result<usize> {
        match routed.positions.get(i) {
            Some(&(d, r)) if d == want => Ok(r),
            Some(&(d, _)) => Err(Error::Contract(format!(
                "triplet {role} at position {i} is {d}, expected {want}"
            ))),
            None => Err(Error::Contract(format!("triplet {role} position {i} out of range"))),
        }
    };
    let mut ai = Vec::with_capacity(triplets.len());
    let mut pi = Vec::with_capacity(triplets.len());
    let mut ni = Vec::with_capacity(triplets.len());
    for t in triplets {
        ai.push(pos(t.anchor, Domain::Offline, "anchor")?);
        pi.push(pos(t.positive, Domain::Online, "positive")?);
        ni.push(pos(t.negative, Domain::Online, "negative")?);
    }
    let (off, on) = match (&routed.offline, &routed.online) {
        (Some(off), Some(on)) => (off, on),
        _ => return Err(Error::Contract("triplets need both domains in the batch".into())),
    };
    let (off_feat, _) = ranking_feature(g, off, &cfg.features)?;
    let (on_feat, _) = ranking_feature(g, on, &cfg.features)?;
    let a = g.gather_rows(off_feat, &ai)?;
    let b = g.gather_rows(on_feat, &pi)?;
    let c = g.gather_rows(on_feat, &ni)?;
    let per = triplet_loss(g, a, b, c, cfg.margin, cfg.distance)?;
    Ok(g.mean(per))
}

/// `attr_weight * attribute_loss + rank_weight * ranking_loss`. A term with
/// zero weight is left out of the graph entirely.
pub fn total_loss(
    g: &mut Graph,
    routed: &RoutedOutputs,
    labels: &[AttributeLabels],
    triplets: &[TripletIndex],
    cfg: &RankingConfig,
) -> Result<LossTerms> {
    let attr = if cfg.attr_weight > 0.0 {
        attribute_loss(g, routed, labels)?
    } else {
        g.input(Tensor::scalar(0.0))
    };
    let rank = if cfg.rank_weight > 0.0 {
        ranking_loss(g, routed, triplets, cfg)?
    } else {
        g.input(Tensor::scalar(0.0))
    };
    let mut terms = Vec::new();
    if cfg.attr_weight > 0.0 {
        terms.push(if cfg.attr_weight == 1.0 { attr } else { g.scale(attr, cfg.attr_weight) });
    }
    if cfg.rank_weight > 0.0 {
        terms.push(if cfg.rank_weight == 1.0 { rank } else { g.scale(rank, cfg.rank_weight) });
    }
    let total = add_all(g, &terms)?;
    Ok(LossTerms { total, attr, rank })
}
