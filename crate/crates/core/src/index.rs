//! Exact Euclidean nearest-neighbour gallery.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{read_features, write_features, FeatureVector};
use crate::schema::{AttributeLabels, Domain};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    dim: usize,
    ids: Vec<String>,
    matrix: Vec<f64>,
    attrs: BTreeMap<String, AttributeLabels>,
}

impl Gallery {
    /// `attrs` maps gallery ids to their attribute labels; ids without an
    /// entry are treated as fully unannotated.
    pub fn build(features: &[FeatureVector], attrs: BTreeMap<String, AttributeLabels>) -> Result<Self> {
        let dim = features.first().map_or(0, |f| f.values.len());
        let mut seen = HashSet::new();
        let mut matrix = Vec::with_capacity(features.len() * dim);
        for f in features {
            if !seen.insert(f.id.as_str()) {
                return Err(Error::Build(format!("duplicate gallery id {}", f.id)));
            }
            if f.values.len() != dim {
                return Err(Error::Build(format!("{} has dimension {}, expected {dim}", f.id, f.values.len())));
            }
            matrix.extend_from_slice(&f.values);
        }
        Ok(Gallery {
            dim,
            ids: features.iter().map(|f| f.id.clone()).collect(),
            matrix,
            attrs,
        })
    }

    pub fn from_matrix(ids: Vec<String>, m: &Tensor, attrs: BTreeMap<String, AttributeLabels>) -> Result<Self> {
        if m.ndim() != 2 || m.shape()[0] != ids.len() {
            return Err(Error::Build(format!("{} ids for matrix of shape {:?}", ids.len(), m.shape())));
        }
        let d = m.shape()[1];
        let feats: Vec<FeatureVector> = ids
            .into_iter()
            .enumerate()
            .map(|(r, id)| FeatureVector {
                item_id: id.split('/').next().unwrap_or_default().to_owned(),
                id,
                domain: Domain::Online,
                values: m.data()[r * d..(r + 1) * d].to_vec(),
            })
            .collect();
        let mut g = Gallery::build(&feats, attrs)?;
        g.dim = d;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn attrs(&self) -> &BTreeMap<String, AttributeLabels> {
        &self.attrs
    }

    /// The `min(k, N)` nearest rows, ties broken by ascending id.
    pub fn query(&self, query_id: &str, q: &[f64], k: usize) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::Contract("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Ok(RankedList {
                query_id: query_id.to_owned(),
                entries: Vec::new(),
            });
        }
        if q.len() != self.dim {
            return Err(Error::dim(
                "query",
                format!("query has {} values, gallery dimension is {}", q.len(), self.dim),
            ));
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .map(|r| {
                let d2: f64 = self.row(r).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, r)
            })
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]));
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(RankedList {
            query_id: query_id.to_owned(),
            entries: scored
                .into_iter()
                .map(|(d2, r)| RankedEntry {
                    id: self.ids[r].clone(),
                    distance: d2.sqrt(),
                })
                .collect(),
        })
    }

    /// [`Gallery::query`] for each `(id, vector)`, in input order.
    pub fn batch_query(&self, queries: &[(&str, &[f64])], k: usize) -> Result<Vec<RankedList>> {
        let start = Instant::now();
        let out: Result<Vec<RankedList>> = queries.par_iter().map(|(id, q)| self.query(id, q, k)).collect();
        let secs = start.elapsed().as_secs_f64();
        log::info!(
            "{} queries over {} rows in {secs:.3}s ({:.3}s per 1000 queries)",
            queries.len(),
            self.len(),
            secs * 1000.0 / queries.len().max(1) as f64
        );
        out
    }

    /// Writes `<stem>.tnsr`, `<stem>.ids` and `<stem>.attrs.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let feats: Vec<FeatureVector> = (0..self.len())
            .map(|r| FeatureVector {
                id: self.ids[r].clone(),
                item_id: String::new(),
                domain: Domain::Online,
                values: self.row(r).to_vec(),
            })
            .collect();
        write_features(&stem.with_extension("tnsr"), &feats)?;
        let p = stem.with_extension("attrs.json");
        let text = serde_json::to_string_pretty(&self.attrs).expect("attributes serialize");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (ids, m) = read_features(&stem.with_extension("tnsr"))?;
        let p = stem.with_extension("attrs.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let attrs = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "gallery attributes",
            detail: format!("{}: {e}", p.display()),
        })?;
        Gallery::from_matrix(ids, &m, attrs)
    }
}

/// CSV with header `query_id,rank,gallery_id,distance`; ranks start at 1.
pub fn results_csv(results: &[RankedList]) -> String {
    let mut s = String::from("query_id,rank,gallery_id,distance\n");
    for r in results {
        for (i, e) in r.entries.iter().enumerate() {
            s.push_str(&format!("{},{},{},{:.17e}\n", r.query_id, i + 1, e.id, e.distance));
        }
    }
    s
}
