use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates sampled per parameter tensor (all of them if fewer).
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Extra draws allowed per tensor to replace coordinates whose
    /// perturbation crossed a kink.
    pub max_resamples: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-4,
            coords_per_tensor: 8,
            seed: 0,
            max_resamples: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries: Vec<GradCheckEntry>,
    /// Coordinates discarded because `w +/- eps` left the smooth piece.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn evaluate<F>(params: &[Tensor], loss_fn: &mut F) -> Result<(Graph, Vec<NodeId>, NodeId)>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = loss_fn(&mut g, &ids)?;
    if g.value(loss).len() != 1 {
        return Err(Error::Contract("loss must be scalar".into()));
    }
    Ok((g, ids, loss))
}

/// Compares reverse-mode gradients with central differences
/// `(f(w+eps) - f(w-eps)) / 2eps` on a sampled subset of coordinates.
///
/// `loss_fn` rebuilds the computation from freshly registered parameter
/// leaves. Relative error uses `max(|analytic|, |numeric|, 1e-8)` as the
/// denominator. A coordinate whose perturbation changes the graph's branch
/// signature is replaced by another draw.
pub fn finite_difference_check<F>(
    params: &mut [Tensor],
    mut loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(opts.epsilon > 0.0 && opts.epsilon <= 1e-2) {
        return Err(Error::config("epsilon", "must lie in (0, 1e-2]"));
    }
    let (g0, ids, loss) = evaluate(params, &mut loss_fn)?;
    let base_sig = g0.signature();
    let grads = g0.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params.iter())
        .map(|(&id, p)| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();
    drop(g0);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let eps = opts.epsilon;
    for p in 0..params.len() {
        let n = params[p].len();
        let want = opts.coords_per_tensor.min(n);
        let draws = (want + opts.max_resamples).min(n);
        let candidates = sample(&mut rng, n, draws).into_vec();
        let mut accepted = 0;
        for idx in candidates {
            if accepted == want {
                break;
            }
            let orig = params[p].data()[idx];
            params[p].data_mut()[idx] = orig + eps;
            let (gp, _, lp) = evaluate(params, &mut loss_fn)?;
            params[p].data_mut()[idx] = orig - eps;
            let (gm, _, lm) = evaluate(params, &mut loss_fn)?;
            params[p].data_mut()[idx] = orig;
            if gp.signature() != base_sig || gm.signature() != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * eps);
            let a = analytic[p].data()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel_error = (a - numeric).abs() / denom;
            report.max_rel_error = report.max_rel_error.max(rel_error);
            report.entries.push(GradCheckEntry {
                param: p,
                index: idx,
                analytic: a,
                numeric,
                rel_error,
            });
            accepted += 1;
        }
    }
    Ok(report)
}
