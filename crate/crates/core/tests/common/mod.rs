//! Reference implementations used as oracles by the integration tests. None
//! of them call into the library code they check.

#![allow(dead_code)]

use std::collections::HashMap;

/// Column means and sample covariance (divisor N-1) of `rows`.
pub fn covariance(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            mean[j] += r[j] / n as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    (mean, cov)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues in descending order and the matching unit eigenvectors.
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].total_cmp(&a[x][x]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

/// Every gallery id ordered by Euclidean distance to `q`, ties by id.
pub fn brute_force_ranking(ids: &[String], rows: &[Vec<f64>], q: &[f64]) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = ids
        .iter()
        .zip(rows)
        .map(|(id, r)| {
            let mut s = 0.0;
            for (a, b) in r.iter().zip(q) {
                s += (a - b) * (a - b);
            }
            (id.clone(), s.sqrt())
        })
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all
}

/// Fraction of queries with their item among the first `k` results.
/// `lists` holds (query item, ranked gallery items).
pub fn reference_top_k(lists: &[(String, Vec<String>)], k: usize) -> f64 {
    let hits = lists.iter().filter(|(item, ranked)| ranked.iter().take(k).any(|r| r == item)).count();
    hits as f64 / lists.len() as f64
}

fn matched_fraction(q: &[Option<usize>], r: &[Option<usize>]) -> f64 {
    let mut total = 0usize;
    let mut matched = 0usize;
    for i in 0..q.len() {
        if let Some(v) = q[i] {
            total += 1;
            if r[i] == Some(v) {
                matched += 1;
            }
        }
    }
    matched as f64 / total as f64
}

/// NDCG@k with gain `2^rel - 1` and discount `log2(j + 1)`, normalized by the
/// best achievable ordering of the full gallery.
pub fn reference_ndcg(
    query: &[Option<usize>],
    ranked: &[String],
    gallery: &HashMap<String, Vec<Option<usize>>>,
    k: usize,
) -> f64 {
    let gain = |rel: f64, j: usize| (2f64.powf(rel) - 1.0) / ((j + 1) as f64).log2();
    let mut got = 0.0;
    for (j, id) in ranked.iter().take(k).enumerate() {
        got += gain(matched_fraction(query, &gallery[id]), j + 1);
    }
    let mut rels: Vec<f64> = gallery.values().map(|a| matched_fraction(query, a)).collect();
    rels.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut best = 0.0;
    for (j, r) in rels.iter().take(k).enumerate() {
        best += gain(*r, j + 1);
    }
    if best == 0.0 {
        1.0
    } else {
        got / best
    }
}

/// Multinomial logistic regression fitted by full-batch gradient descent.
pub struct LinearProbe {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl LinearProbe {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, steps: usize, lr: f64) -> Self {
        let d = x[0].len();
        let mut w = vec![vec![0.0; d]; classes];
        let mut b = vec![0.0; classes];
        let n = x.len() as f64;
        for _ in 0..steps {
            let mut gw = vec![vec![0.0; d]; classes];
            let mut gb = vec![0.0; classes];
            for (xi, &yi) in x.iter().zip(y) {
                let p = softmax(&logits(&w, &b, xi));
                for c in 0..classes {
                    let e = p[c] - (c == yi) as u8 as f64;
                    gb[c] += e / n;
                    for j in 0..d {
                        gw[c][j] += e * xi[j] / n;
                    }
                }
            }
            for c in 0..classes {
                b[c] -= lr * gb[c];
                for j in 0..d {
                    w[c][j] -= lr * gw[c][j];
                }
            }
        }
        LinearProbe { w, b }
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let right = x
            .iter()
            .zip(y)
            .filter(|(xi, &yi)| {
                let l = logits(&self.w, &self.b, xi);
                let best = (0..l.len()).max_by(|&a, &c| l[a].partial_cmp(&l[c]).unwrap()).unwrap();
                best == yi
            })
            .count();
        right as f64 / x.len() as f64
    }
}

fn logits(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter().zip(b).map(|(wc, bc)| bc + wc.iter().zip(x).map(|(p, q)| p * q).sum::<f64>()).collect()
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean over `xs`.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
