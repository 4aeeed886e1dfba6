//! Retrieval features: ranking feature from the domain's sub-network,
//! per-layer L2 normalization, optional PCA.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::losses::{ranking_feature, FeatureSpec};
use crate::network::DualNetwork;
use crate::schema::Domain;
use crate::tensor::{read_archive, write_archive, Tensor};
use crate::trainer::Sample;

/// Images per forward pass during extraction.
pub const EXTRACT_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub id: String,
    pub item_id: String,
    pub domain: Domain,
    pub values: Vec<f64>,
}

/// Scales each segment to unit norm. The flag is set when some segment was
/// all zeros; such segments are left as zeros.
pub fn l2_normalize_per_layer(segments: &[&[f64]]) -> (Vec<f64>, bool) {
    let mut out = Vec::with_capacity(segments.iter().map(|s| s.len()).sum());
    let mut zero = false;
    for s in segments {
        let n = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            zero = true;
            out.extend_from_slice(s);
        } else {
            out.extend(s.iter().map(|v| v / n));
        }
    }
    (out, zero)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `[D, d]`, orthonormal columns.
    pub basis: Tensor,
    /// Explained variance per column, non-increasing.
    pub variances: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.variances.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mean = Tensor::from_vec(self.mean.clone());
        let var = Tensor::from_vec(self.variances.clone());
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        write_archive(
            &mut w,
            &[("mean".into(), &mean), ("basis".into(), &self.basis), ("variances".into(), &var)],
        )
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let entries = read_archive(&mut BufReader::new(file))?;
        let get = |name: &str| -> Result<Tensor> {
            let pos = entries.iter().position(|(n, _)| n == name).ok_or_else(|| Error::Format {
                what: "pca model",
                detail: format!("{}: missing tensor {name}", path.display()),
            })?;
            Ok(entries[pos].1.clone())
        };
        let mean = get("mean")?.into_data();
        let basis = get("basis")?;
        let variances = get("variances")?.into_data();
        if basis.ndim() != 2 || basis.shape() != [mean.len(), variances.len()] {
            return Err(Error::Format {
                what: "pca model",
                detail: format!("{}: inconsistent tensor shapes", path.display()),
            });
        }
        Ok(PcaModel {
            mean,
            basis,
            variances,
        })
    }
}

/// Principal axes of the rows of `data` (`[N, D]`), keeping `d` of them.
pub fn pca_fit(data: &Tensor, d: usize) -> Result<PcaModel> {
    if data.ndim() != 2 {
        return Err(Error::dim("pca_fit", format!("expected [N, D], got {:?}", data.shape())));
    }
    let (n, dim) = (data.shape()[0], data.shape()[1]);
    if d == 0 || n < 2 || d > (n - 1).min(dim) {
        return Err(Error::config(
            "pca_dim",
            format!("target dimension {d} must lie in 1..=min(N-1, D) = {}", n.saturating_sub(1).min(dim)),
        ));
    }
    let mut mean = vec![0.0; dim];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(data.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |r, c| data.data()[r * dim + c] - mean[c]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));

    let mut basis = vec![0.0; dim * d];
    let mut variances = Vec::with_capacity(d);
    for (j, &k) in order.iter().take(d).enumerate() {
        let s = svd.singular_values[k];
        variances.push(s * s / (n - 1) as f64);
        let col: Vec<f64> = (0..dim).map(|i| v_t[(k, i)]).collect();
        let mut best = 0;
        for i in 1..dim {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        let sign = if col[best] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dim {
            basis[i * d + j] = sign * col[i];
        }
    }
    Ok(PcaModel {
        mean,
        basis: Tensor::new(vec![dim, d], basis)?,
        variances,
    })
}

/// `basisᵀ · (v − mean)`.
pub fn pca_transform(model: &PcaModel, v: &[f64]) -> Result<Vec<f64>> {
    let dim = model.input_dim();
    if v.len() != dim {
        return Err(Error::dim("pca_transform", format!("vector has {} values, model expects {dim}", v.len())));
    }
    let d = model.output_dim();
    let b = model.basis.data();
    let mut out = vec![0.0; d];
    for i in 0..dim {
        let c = v[i] - model.mean[i];
        for j in 0..d {
            out[j] += b[i * d + j] * c;
        }
    }
    Ok(out)
}

/// Normalized (pre-PCA) ranking features for `samples`, each routed through
/// the sub-network of its domain.
pub fn extract_normalized(dual: &DualNetwork, samples: &[&Sample], spec: &FeatureSpec) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Result<Vec<Vec<f64>>>> = samples
        .par_chunks(EXTRACT_BATCH)
        .map(|chunk| {
            let mut g = Graph::new();
            let bound = dual.bind_frozen(&mut g);
            let batch: Vec<(Domain, &Tensor)> = chunk.iter().map(|s| (s.domain, &s.image)).collect();
            let routed = dual.route_batch(&mut g, &bound, &batch)?;
            let mut per_domain = Vec::new();
            for d in [Domain::Online, Domain::Offline] {
                let rows = match routed.for_domain(d) {
                    Some(out) => {
                        let (node, widths) = ranking_feature(&mut g, out, spec)?;
                        Some((g.value(node).clone(), widths))
                    }
                    None => None,
                };
                per_domain.push(rows);
            }
            let mut zero_rows = 0;
            let rows = routed
                .positions
                .iter()
                .map(|&(d, r)| {
                    let (t, widths) = per_domain[(d == Domain::Offline) as usize].as_ref().expect("domain present");
                    let row = t.row(r);
                    let mut segs = Vec::with_capacity(widths.len());
                    let mut at = 0;
                    for w in widths {
                        segs.push(&row[at..at + w]);
                        at += w;
                    }
                    let (v, zero) = l2_normalize_per_layer(&segs);
                    zero_rows += zero as usize;
                    v
                })
                .collect();
            if zero_rows > 0 {
                log::debug!("{zero_rows} feature rows had an all-zero layer segment");
            }
            Ok(rows)
        })
        .collect();
    let mut out = Vec::with_capacity(samples.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Ranking feature, per-layer normalization and optional PCA for each sample.
pub fn extract(
    dual: &DualNetwork,
    samples: &[&Sample],
    spec: &FeatureSpec,
    pca: Option<&PcaModel>,
) -> Result<Vec<FeatureVector>> {
    let (f4, f5) = dual.config().local_filters();
    let dim = spec.dim(dual.config().fc1_dim, f4, f5);
    if let Some(p) = pca {
        if p.input_dim() != dim {
            return Err(Error::config(
                "pca",
                format!("model expects {}-D features but spec {spec} gives {dim}-D", p.input_dim()),
            ));
        }
    }
    let raw = extract_normalized(dual, samples, spec)?;
    samples
        .iter()
        .zip(raw)
        .map(|(s, v)| {
            let values = match pca {
                Some(p) => pca_transform(p, &v)?,
                None => v,
            };
            Ok(FeatureVector {
                id: s.id.clone(),
                item_id: s.item_id.clone(),
                domain: s.domain,
                values,
            })
        })
        .collect()
}

/// Fits PCA on the online samples' normalized features.
pub fn fit_gallery_pca(dual: &DualNetwork, samples: &[&Sample], spec: &FeatureSpec, d: usize) -> Result<PcaModel> {
    let gallery: Vec<&Sample> = samples.iter().copied().filter(|s| s.domain == Domain::Online).collect();
    let rows = extract_normalized(dual, &gallery, spec)?;
    let dim = rows.first().map_or(0, Vec::len);
    let data = Tensor::new(vec![rows.len(), dim], rows.concat())?;
    pca_fit(&data, d)
}

pub fn ids_path(matrix_path: &Path) -> PathBuf {
    matrix_path.with_extension("ids")
}

/// Writes the `[N, d]` feature matrix and the row-aligned id sidecar.
pub fn write_features(path: &Path, feats: &[FeatureVector]) -> Result<()> {
    let d = feats.first().map_or(0, |f| f.values.len());
    if let Some(f) = feats.iter().find(|f| f.values.len() != d) {
        return Err(Error::dim("write_features", format!("{} has {} values, expected {d}", f.id, f.values.len())));
    }
    let data: Vec<f64> = feats.iter().flat_map(|f| f.values.iter().copied()).collect();
    Tensor::new(vec![feats.len(), d], data)?.save(path)?;
    let ids: String = feats.iter().map(|f| format!("{}\n", f.id)).collect();
    let sidecar = ids_path(path);
    fs::write(&sidecar, ids).map_err(|e| Error::io(&sidecar, e))
}

/// Reads a feature matrix and its id sidecar as `(ids, rows)`.
pub fn read_features(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let m = Tensor::load(path)?;
    let sidecar = ids_path(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let ids: Vec<String> = text.lines().map(str::to_owned).collect();
    let rows = if m.ndim() == 2 { m.shape()[0] } else { usize::MAX };
    if rows != ids.len() {
        return Err(Error::Validation(format!(
            "{}: {} ids for matrix of shape {:?}",
            sidecar.display(),
            ids.len(),
            m.shape()
        )));
    }
    Ok((ids, m))
}
