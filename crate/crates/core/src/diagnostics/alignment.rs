//! Class-conditional feature statistics: centroid alignment, the
//! mean/covariance discrepancy surrogate, and feature displacement.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::EncoderModel;
use crate::tensor::{dot, norm, DenseMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    /// Plain mean of the features.
    pub mean: Vec<f64>,
    /// Mean rescaled to unit norm (zero stays zero).
    pub centroid: Vec<f64>,
    /// Biased (1/n) covariance, `D x D`.
    pub covariance: DenseMatrix,
    pub prior: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub dim: usize,
    /// Indexed by class; `None` where the class has no samples.
    pub classes: Vec<Option<ClassStat>>,
}

pub fn class_stats(
    features: &DenseMatrix,
    labels: &[usize],
    num_classes: usize,
) -> Result<ClassStats> {
    if features.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "class-stats",
            lhs: features.shape(),
            rhs: (labels.len(), 1),
        });
    }
    if labels.is_empty() {
        return Err(Error::Input("class statistics of an empty set".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let d = features.cols();
    let n = labels.len() as f64;
    let mut classes = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            classes.push(None);
            continue;
        }
        let m = idx.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in &idx {
            mean.iter_mut()
                .zip(features.row(i))
                .for_each(|(a, x)| *a += x);
        }
        mean.iter_mut().for_each(|a| *a /= m);
        let mut cov = DenseMatrix::zeros(d, d);
        for &i in &idx {
            let x = features.row(i);
            for a in 0..d {
                let da = x[a] - mean[a];
                for b in 0..d {
                    let v = cov.get(a, b) + da * (x[b] - mean[b]);
                    cov.set(a, b, v);
                }
            }
        }
        cov.scale_in_place(1.0 / m);
        let mn = norm(&mean);
        let centroid = if mn > 0.0 {
            mean.iter().map(|v| v / mn).collect()
        } else {
            mean.clone()
        };
        classes.push(Some(ClassStat {
            mean,
            centroid,
            covariance: cov,
            prior: m / n,
            count: idx.len(),
        }));
    }
    Ok(ClassStats { dim: d, classes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Cosine of unit centroids per class; `None` where a class is missing.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub warnings: Vec<String>,
}

pub fn centroid_alignment(s: &ClassStats, t: &ClassStats) -> Result<Alignment> {
    if s.classes.len() != t.classes.len() || s.dim != t.dim {
        return Err(Error::Input(
            "alignment between mismatched class sets".into(),
        ));
    }
    let mut per_class = Vec::with_capacity(s.classes.len());
    let mut warnings = Vec::new();
    for (c, (a, b)) in s.classes.iter().zip(&t.classes).enumerate() {
        match (a, b) {
            (Some(a), Some(b)) => per_class.push(Some(dot(&a.centroid, &b.centroid))),
            _ => {
                warnings.push(format!("class {c} missing in one domain; excluded"));
                per_class.push(None);
            }
        }
    }
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(Error::Input("no class present in both domains".into()));
    }
    Ok(Alignment {
        mean: vals.iter().sum::<f64>() / vals.len() as f64,
        per_class,
        warnings,
    })
}

/// `2 L_f sum_c pi_c (|mu_s - mu_t| + |Sigma_s - Sigma_t|_F)` over classes
/// present in both domains, with `pi_c` the average of the two priors.
pub fn discrepancy_bound(s: &ClassStats, t: &ClassStats, lipschitz: f64) -> Result<f64> {
    if s.dim != t.dim {
        return Err(Error::Input(format!(
            "feature dims differ: {} vs {}",
            s.dim, t.dim
        )));
    }
    if s.classes.len() != t.classes.len() {
        return Err(Error::Input(
            "discrepancy between mismatched class sets".into(),
        ));
    }
    if !(lipschitz > 0.0) {
        return Err(Error::Input(format!("L_f must be > 0, got {lipschitz}")));
    }
    let mut total = 0.0;
    for (a, b) in s.classes.iter().zip(&t.classes) {
        if let (Some(a), Some(b)) = (a, b) {
            let dmu = a
                .mean
                .iter()
                .zip(&b.mean)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let dsig = a.covariance.sub(&b.covariance)?.frobenius_norm();
            total += 0.5 * (a.prior + b.prior) * (dmu + dsig);
        }
    }
    Ok(2.0 * lipschitz * total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementStats {
    pub awp_cosine: f64,
    pub awp_l2: f64,
    pub ood_cosine: f64,
    pub ood_l2: f64,
}

fn mean_pair_stats(a: &DenseMatrix, b: &DenseMatrix) -> (f64, f64) {
    let n = a.rows() as f64;
    let mut cos = 0.0;
    let mut l2 = 0.0;
    for r in 0..a.rows() {
        let (x, y) = (a.row(r), b.row(r));
        let (nx, ny) = (norm(x), norm(y));
        cos += if nx > 0.0 && ny > 0.0 {
            dot(x, y) / (nx * ny)
        } else {
            0.0
        };
        l2 += x
            .iter()
            .zip(y)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
    }
    (cos / n, l2 / n)
}

/// Mean cosine and L2 between `f(x)` and `f_perturbed(x)` on `id` (AWP row),
/// and between `f(x_i)` and `f(x'_i)` for index-paired `id`/`ood` samples
/// (OOD row). The model's current branch supplies the perturbation.
pub fn awp_ood_displacement(
    model: &EncoderModel,
    id: &Batch,
    ood: &Batch,
) -> Result<DisplacementStats> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Input("displacement needs nonempty batches".into()));
    }
    if id.len() != ood.len() {
        return Err(Error::Input(format!(
            "ID and OOD batches must pair up: {} vs {}",
            id.len(),
            ood.len()
        )));
    }
    let f = model.features(&id.inputs, false)?;
    let f_awp = model.features(&id.inputs, true)?;
    let f_ood = model.features(&ood.inputs, false)?;
    let (awp_cosine, awp_l2) = mean_pair_stats(&f, &f_awp);
    let (ood_cosine, ood_l2) = mean_pair_stats(&f, &f_ood);
    Ok(DisplacementStats {
        awp_cosine,
        awp_l2,
        ood_cosine,
        ood_l2,
    })
}
