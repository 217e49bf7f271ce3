//! Gram-volume alignment of clean, input-adversarial and weight-perturbed
//! feature triplets.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{det3, dot, norm, DenseMatrix};

/// Tolerance on the unit-norm contract of triplet members.
pub const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GramConfig {
    pub jitter: f64,
}

impl Default for GramConfig {
    fn default() -> Self {
        Self { jitter: 1e-4 }
    }
}

impl GramConfig {
    pub fn new(jitter: f64) -> Result<Self> {
        if !(jitter > 0.0 && jitter <= 1e-2) {
            return Err(Error::Config {
                key: "gram_jitter".into(),
                reason: format!("must lie in (0, 1e-2], got {jitter}"),
            });
        }
        Ok(Self { jitter })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTriplet {
    pub f_id: Vec<f64>,
    pub f_adv: Vec<f64>,
    pub f_awp: Vec<f64>,
}

impl FeatureTriplet {
    pub fn new(f_id: Vec<f64>, f_adv: Vec<f64>, f_awp: Vec<f64>) -> Result<Self> {
        let t = Self { f_id, f_adv, f_awp };
        t.check()?;
        Ok(t)
    }

    fn members(&self) -> [&[f64]; 3] {
        [&self.f_id, &self.f_adv, &self.f_awp]
    }

    fn check(&self) -> Result<()> {
        let d = self.f_id.len();
        for v in self.members() {
            if v.len() != d {
                return Err(Error::Dimension {
                    op: "feature-triplet",
                    lhs: (1, d),
                    rhs: (1, v.len()),
                });
            }
            let n = norm(v);
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Contract(format!(
                    "triplet member has norm {n}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// `G[a][b] = <v_a, v_b> + jitter * [a == b]`, row-major.
pub fn gram_matrix(t: &FeatureTriplet, cfg: &GramConfig) -> Result<[f64; 9]> {
    t.check()?;
    let v = t.members();
    let mut g = [0.0; 9];
    for a in 0..3 {
        for b in 0..3 {
            g[3 * a + b] = dot(v[a], v[b]) + if a == b { cfg.jitter } else { 0.0 };
        }
    }
    Ok(g)
}

/// `sqrt(|det G|)` for a row-major 3x3 matrix.
pub fn gram_volume(g: &[f64; 9]) -> f64 {
    det3(g).abs().sqrt()
}

/// Mean Gram volume over a batch of triplets.
pub fn gram_volume_batch(triplets: &[FeatureTriplet], cfg: &GramConfig) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Input("gram volume of an empty batch".into()));
    }
    let mut total = 0.0;
    for t in triplets {
        total += gram_volume(&gram_matrix(t, cfg)?);
    }
    Ok(total / triplets.len() as f64)
}

/// Triplets from three row-aligned feature matrices.
pub fn triplets_from_rows(
    f_id: &DenseMatrix,
    f_adv: &DenseMatrix,
    f_awp: &DenseMatrix,
) -> Result<Vec<FeatureTriplet>> {
    if f_id.shape() != f_adv.shape() || f_id.shape() != f_awp.shape() {
        return Err(Error::Dimension {
            op: "triplets",
            lhs: f_id.shape(),
            rhs: if f_id.shape() != f_adv.shape() {
                f_adv.shape()
            } else {
                f_awp.shape()
            },
        });
    }
    (0..f_id.rows())
        .map(|r| {
            FeatureTriplet::new(
                f_id.row(r).to_vec(),
                f_adv.row(r).to_vec(),
                f_awp.row(r).to_vec(),
            )
        })
        .collect()
}

/// Records the mean Gram-volume loss over row-aligned feature nodes.
pub fn gram_volume_node(
    g: &mut Graph,
    f_id: NodeId,
    f_adv: NodeId,
    f_awp: NodeId,
    cfg: &GramConfig,
) -> Result<NodeId> {
    let rows = g.value(f_id).rows();
    if rows == 0 {
        return Err(Error::Input("gram volume of an empty batch".into()));
    }
    let feats = [f_id, f_adv, f_awp];
    let mut inner = [[None; 3]; 3];
    for a in 0..3 {
        for b in a..3 {
            let prod = g.mul(feats[a], feats[b])?;
            let s = g.row_sum(prod)?;
            inner[a][b] = Some(s);
            inner[b][a] = Some(s);
        }
    }
    let eps = g.constant(DenseMatrix::filled(rows, 1, cfg.jitter));
    let mut cols = Vec::with_capacity(9);
    for (a, row) in inner.iter().enumerate() {
        for (b, cell) in row.iter().enumerate() {
            let s = cell.expect("all pairs filled");
            cols.push(if a == b { g.add(s, eps)? } else { s });
        }
    }
    let gram = g.concat_cols(&cols)?;
    let vol = g.sqrt_abs_det3(gram)?;
    g.mean(vol)
}
