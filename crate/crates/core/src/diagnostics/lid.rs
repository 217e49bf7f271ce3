//! Maximum-likelihood local intrinsic dimensionality from k-NN distances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, DenseMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// `1 - cos(a, b)`.
    Cosine,
    Euclidean,
}

impl std::fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistanceMetric::Cosine => "cosine",
            DistanceMetric::Euclidean => "euclidean",
        })
    }
}

impl DistanceMetric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DistanceMetric::Cosine => {
                let na = norm(a);
                let nb = norm(b);
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    (1.0 - dot(a, b) / (na * nb)).max(0.0)
                }
            }
            DistanceMetric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
        }
    }
}

/// `-(1/k sum_j log(r_j / r_k))^-1` over ascending distances `r_1..r_k`.
///
/// Returns `+inf` when every distance equals `r_k` (the estimator's
/// denominator vanishes).
pub fn lid_point(dists: &[f64]) -> Result<f64> {
    let k = dists.len();
    if k < 2 {
        return Err(Error::Input(format!(
            "LID needs k >= 2 neighbours, got {k}"
        )));
    }
    if dists.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Contract(
            "neighbour distances must be ascending".into(),
        ));
    }
    let rk = dists[k - 1];
    if !(rk > 0.0) {
        return Err(Error::Input(format!(
            "largest neighbour distance must be > 0, got {rk}"
        )));
    }
    let s: f64 = dists.iter().map(|&r| (r / rk).ln()).sum::<f64>() / k as f64;
    if s == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-1.0 / s)
}

/// Ascending distances from row `i` to its `k` nearest other rows.
pub fn knn_distances(points: &DenseMatrix, i: usize, k: usize, metric: DistanceMetric) -> Vec<f64> {
    let mut d: Vec<f64> = (0..points.rows())
        .filter(|&j| j != i)
        .map(|j| metric.distance(points.row(i), points.row(j)))
        .collect();
    d.sort_by(f64::total_cmp);
    d.truncate(k);
    d
}

/// Mean pointwise LID over every row of `points`, neighbours drawn from the same set.
pub fn mean_lid(points: &DenseMatrix, k: usize, metric: DistanceMetric) -> Result<f64> {
    if points.rows() <= k {
        return Err(Error::Input(format!(
            "{} points cannot supply {k} neighbours each",
            points.rows()
        )));
    }
    let mut acc = 0.0;
    for i in 0..points.rows() {
        acc += lid_point(&knn_distances(points, i, k, metric))?;
    }
    Ok(acc / points.rows() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidReport {
    pub k: usize,
    /// Mean LID per class; `None` for classes that were skipped.
    pub per_class: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

impl LidReport {
    /// Mean over the classes that were measured.
    pub fn mean(&self) -> Option<f64> {
        let vals: Vec<f64> = self.per_class.iter().flatten().copied().collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Per-class mean LID; classes with at most `k` samples are skipped with a warning.
pub fn lid_per_class(
    features: &DenseMatrix,
    labels: &[usize],
    num_classes: usize,
    k: usize,
    metric: DistanceMetric,
) -> Result<LidReport> {
    if features.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "lid-per-class",
            lhs: features.shape(),
            rhs: (labels.len(), 1),
        });
    }
    let mut per_class = Vec::with_capacity(num_classes);
    let mut warnings = Vec::new();
    for c in 0..num_classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() <= k {
            warnings.push(format!(
                "class {c}: {} samples cannot supply k = {k} neighbours; skipped",
                idx.len()
            ));
            per_class.push(None);
            continue;
        }
        per_class.push(Some(mean_lid(&features.select_rows(&idx), k, metric)?));
    }
    Ok(LidReport {
        k,
        per_class,
        warnings,
    })
}

/// Per-class `shifted - id`; `None` where either side was skipped.
pub fn delta_lid(id: &LidReport, shifted: &LidReport) -> Result<Vec<Option<f64>>> {
    if id.per_class.len() != shifted.per_class.len() {
        return Err(Error::Input(
            "LID reports cover different class sets".into(),
        ));
    }
    Ok(id
        .per_class
        .iter()
        .zip(&shifted.per_class)
        .map(|(a, b)| match (a, b) {
            (Some(a), Some(b)) => Some(b - a),
            _ => None,
        })
        .collect())
}
