//! Expert diversity and routing-balance diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::Matrix;
use crate::model::{MoEModel, RoutingRecord};

/// Threshold below which two parameter values count as similar.
pub const SIMILARITY_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub param_variance: f64,
    /// Mean over expert pairs of the similar-parameter fraction.
    pub similar_fraction: f64,
    pub output_variance: f64,
    pub load_entropy: f64,
}

/// Mean over parameter positions of the population variance across experts.
pub fn expert_param_variance(experts: &[Vec<f64>]) -> Result<f64> {
    if experts.len() < 2 {
        return Err(LabError::contract("variance needs at least two experts"));
    }
    let len = experts[0].len();
    if experts.iter().any(|e| e.len() != len) {
        return Err(LabError::contract("experts have different parameter counts"));
    }
    if len == 0 {
        return Ok(0.0);
    }
    let m = experts.len() as f64;
    let mut total = 0.0;
    for p in 0..len {
        // shifting by the first expert keeps identical experts at exactly 0
        let pivot = experts[0][p];
        let mean = experts.iter().map(|e| e[p] - pivot).sum::<f64>() / m;
        total += experts.iter().map(|e| (e[p] - pivot - mean).powi(2)).sum::<f64>() / m;
    }
    Ok(total / len as f64)
}

/// Flattened parameters of every expert in `model`.
pub fn expert_params(model: &MoEModel) -> Vec<Vec<f64>> {
    model.experts.iter().map(|e| e.flat_params()).collect()
}

/// Fraction of positions where `|a − b| < threshold`.
pub fn similar_fraction(a: &[f64], b: &[f64], threshold: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LabError::contract("parameter sets differ in length"));
    }
    if !(threshold > 0.0) {
        return Err(LabError::contract("threshold must be positive"));
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let close = a
        .iter()
        .zip(b)
        .filter(|(x, y)| (*x - *y).abs() < threshold)
        .count();
    Ok(close as f64 / a.len() as f64)
}

/// Mean similar fraction over all unordered expert pairs.
pub fn mean_pairwise_similarity(experts: &[Vec<f64>], threshold: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..experts.len() {
        for j in (i + 1)..experts.len() {
            total += similar_fraction(&experts[i], &experts[j], threshold)?;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(LabError::contract("similarity needs at least two experts"));
    }
    Ok(total / pairs as f64)
}

/// Counts behind [`diverse_degree`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiverseDegree {
    /// Fraction of (pair, position) entries where the first model's
    /// difference is strictly larger.
    pub larger: f64,
    /// Fraction of entries with equal differences.
    pub ties: f64,
}

/// Fraction of (expert pair, position) entries whose absolute difference is
/// strictly larger in `omoe` than in `base`. `reference`, when given, must
/// share the architecture and is only used for that check.
pub fn diverse_degree(omoe: &MoEModel, base: &MoEModel, reference: Option<&MoEModel>) -> Result<f64> {
    Ok(diverse_degree_detail(omoe, base, reference)?.larger)
}

pub fn diverse_degree_detail(
    omoe: &MoEModel,
    base: &MoEModel,
    reference: Option<&MoEModel>,
) -> Result<DiverseDegree> {
    let same = |a: &MoEModel, b: &MoEModel| a.dims == b.dims && a.expert_count() == b.expert_count();
    if !same(omoe, base) || reference.is_some_and(|r| !same(omoe, r)) {
        return Err(LabError::contract("models have different architectures"));
    }
    diverse_degree_params(&expert_params(omoe), &expert_params(base))
}

/// [`diverse_degree_detail`] on raw per-expert parameter vectors.
pub fn diverse_degree_params(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<DiverseDegree> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(LabError::contract("need matching expert counts of at least two"));
    }
    let len = a[0].len();
    if a.iter().chain(b).any(|e| e.len() != len) {
        return Err(LabError::contract("experts have different parameter counts"));
    }
    let mut larger = 0usize;
    let mut ties = 0usize;
    let mut total = 0usize;
    for i in 0..a.len() {
        for j in (i + 1)..a.len() {
            for p in 0..len {
                let da = (a[i][p] - a[j][p]).abs();
                let db = (b[i][p] - b[j][p]).abs();
                if da > db {
                    larger += 1;
                } else if da == db {
                    ties += 1;
                }
                total += 1;
            }
        }
    }
    let total = total.max(1) as f64;
    Ok(DiverseDegree {
        larger: larger as f64 / total,
        ties: ties as f64 / total,
    })
}

/// Mean over output coordinates of the variance across experts, each run on
/// the post-input-map representation of the raw input `x`.
pub fn output_variance(model: &MoEModel, x: &[f64]) -> Result<f64> {
    if model.expert_count() < 2 {
        return Err(LabError::contract("output variance needs at least two experts"));
    }
    if x.len() != model.dims.d_raw {
        return Err(LabError::contract("input width does not match the model"));
    }
    let z0 = model.input_map(x);
    let outs: Vec<Vec<f64>> = model
        .experts
        .iter()
        .enumerate()
        .map(|(m, e)| e.forward(model.activation, &z0, m).out)
        .collect();
    output_variance_of(&outs)
}

/// Per-coordinate population variance across expert outputs, averaged.
pub fn output_variance_of(outputs: &[Vec<f64>]) -> Result<f64> {
    expert_param_variance(outputs)
}

/// Mean [`output_variance`] over the rows of `x`.
pub fn mean_output_variance(model: &MoEModel, x: &Matrix) -> Result<f64> {
    let n = x.rows();
    if n == 0 {
        return Err(LabError::contract("no samples"));
    }
    let mut total = 0.0;
    for r in 0..n {
        total += output_variance(model, x.row(r))?;
    }
    Ok(total / n as f64)
}

/// Natural-log entropy of the expert assignment distribution.
pub fn load_entropy<'a>(routing: impl IntoIterator<Item = &'a RoutingRecord>, experts: usize) -> Result<f64> {
    let mut counts = vec![0usize; experts];
    let mut n = 0usize;
    for r in routing {
        if r.selected >= experts {
            return Err(LabError::contract("routing names a missing expert"));
        }
        counts[r.selected] += 1;
        n += 1;
    }
    if n == 0 {
        return Err(LabError::contract("entropy needs at least one token"));
    }
    Ok(entropy_of_counts(&counts))
}

pub fn entropy_of_counts(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Full diversity snapshot of `model` evaluated on inputs `x`.
pub fn diversity_report(model: &MoEModel, x: &Matrix) -> Result<DiversityReport> {
    let params = expert_params(model);
    let (_, tape) = model.forward(x)?;
    Ok(DiversityReport {
        param_variance: expert_param_variance(&params)?,
        similar_fraction: mean_pairwise_similarity(&params, SIMILARITY_THRESHOLD)?,
        output_variance: mean_output_variance(model, x)?,
        load_entropy: load_entropy(tape.routing(), model.expert_count())?,
    })
}
