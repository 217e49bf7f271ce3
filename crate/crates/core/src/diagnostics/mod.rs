//! Geometry measurements of a trained encoder: Hessian spectra, class
//! centroid alignment, local intrinsic dimensionality, domain discrepancy,
//! loss slices and the generalization ledger.

mod alignment;
mod curvature;
mod landscape;
mod lid;
mod theory;

pub use alignment::{
    awp_ood_displacement, centroid_alignment, class_stats, discrepancy_bound, Alignment, ClassStat,
    ClassStats, DisplacementStats,
};
pub use curvature::{
    curvature_report, hessian_frob, hutchinson_layer_trace, kappa, lambda_max, CurvatureReport,
    LayerCurvature, PowerIteration, ProbeKind,
};
pub use landscape::{loss_slice, slice_directions, LossSlice};
pub use lid::{
    delta_lid, knn_distances, lid_per_class, lid_point, mean_lid, DistanceMetric, LidReport,
};
pub use theory::{kl_proximity, theory_ledger, TheoryLedger};

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackConfig, ModelLoss};
use crate::awp::{assign_radii, awp_ascend, AscentConfig, AwpConfig};
use crate::data::{Batch, Bundle};
use crate::error::{Error, Result};
use crate::model::{EncoderModel, HessianScope, ModelObjective};
use crate::rng::{permutation, rng_for, sub_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagConfig {
    pub probes: usize,
    pub power_iters: usize,
    pub probe_kind: ProbeKind,
    /// Samples of the ID test set used for Hessian quantities.
    pub batch: usize,
    pub scope: HessianScope,
    pub lid_k: usize,
    pub lid_metric: DistanceMetric,
    /// Lipschitz multiplier of the discrepancy surrogate.
    pub lipschitz: f64,
    /// Prior width of the KL proximity term.
    pub prior_sigma: f64,
    pub confidence_delta: f64,
    pub slice_grid: usize,
    pub slice_extent: f64,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            probes: 200,
            power_iters: 50,
            probe_kind: ProbeKind::Rademacher,
            batch: 256,
            scope: HessianScope::Lora,
            lid_k: 20,
            lid_metric: DistanceMetric::Cosine,
            lipschitz: 1.0,
            prior_sigma: 1.0,
            confidence_delta: 0.05,
            slice_grid: 21,
            slice_extent: 1.0,
        }
    }
}

impl DiagConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.probes == 0 {
            return bad("diag_probes", "must be >= 1");
        }
        if self.power_iters == 0 {
            return bad("diag_power_iters", "must be >= 1");
        }
        if self.batch == 0 {
            return bad("diag_batch", "must be >= 1");
        }
        if self.lid_k < 2 {
            return bad("lid_k", "must be >= 2");
        }
        if !(self.lipschitz > 0.0) {
            return bad("lipschitz", "must be > 0");
        }
        if !(self.prior_sigma > 0.0) {
            return bad("prior_sigma", "must be > 0");
        }
        if !(self.confidence_delta > 0.0 && self.confidence_delta < 1.0) {
            return bad("confidence_delta", "must lie in (0, 1)");
        }
        if self.slice_grid < 3 {
            return bad("slice_grid", "must be >= 3");
        }
        if !(self.slice_extent > 0.0) {
            return bad("slice_extent", "must be > 0");
        }
        Ok(())
    }
}

/// A seeded, class-balanced-in-expectation subset of at most `n` rows.
pub fn diag_subset(batch: &Batch, n: usize, seed: u64) -> Batch {
    if n >= batch.len() {
        return batch.clone();
    }
    let mut rng = rng_for(seed, "diag/subset");
    let mut idx: Vec<usize> = permutation(&mut rng, batch.len())
        .into_iter()
        .take(n)
        .collect();
    idx.sort_unstable();
    batch.select(&idx)
}

/// Parameter blocks of each layer under `scope`.
pub fn layer_blocks(model: &EncoderModel, scope: HessianScope) -> Vec<(String, Vec<String>)> {
    model
        .layers
        .iter()
        .map(|l| {
            let blocks = match scope {
                HessianScope::Lora => vec![format!("{}.A", l.name), format!("{}.B", l.name)],
                HessianScope::Effective => vec![format!("{}.W", l.name)],
            };
            (l.name.clone(), blocks)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureSummary {
    pub lambda_max: f64,
    pub residual: f64,
    pub iters: usize,
    pub scope: HessianScope,
    pub samples: usize,
}

/// Top Hessian eigenvalue of clean cross-entropy on a seeded subset of `batch`.
pub fn curvature_summary(
    model: &EncoderModel,
    batch: &Batch,
    cfg: &DiagConfig,
    seed: u64,
) -> Result<CurvatureSummary> {
    let sub = diag_subset(batch, cfg.batch, seed);
    let obj = ModelObjective::new(model, &sub, cfg.scope);
    let p = lambda_max(
        &obj,
        &obj.params(),
        cfg.power_iters,
        sub_seed(seed, "diag/probes"),
    )?;
    Ok(CurvatureSummary {
        lambda_max: p.lambda,
        residual: p.residual,
        iters: p.iters,
        scope: cfg.scope,
        samples: sub.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainGeometry {
    pub domain: String,
    /// Centroid cosine from ID features to this domain's features.
    pub alignment: Alignment,
    pub lid: LidReport,
    /// Per-class LID of this domain minus ID.
    pub delta_lid: Vec<Option<f64>>,
    pub discrepancy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub curvature: CurvatureReport,
    pub id_lid: LidReport,
    /// OOD, natural-shift and PGD-adversarial ID features, in that order.
    pub domains: Vec<DomainGeometry>,
    pub displacement: DisplacementStats,
    pub ledger: TheoryLedger,
    pub lipschitz: f64,
    pub seed: u64,
}

/// Runs every measurement on `model` against `bundle`.
pub fn diagnose(
    model: &EncoderModel,
    bundle: &Bundle,
    attack: &AttackConfig,
    awp: &AwpConfig,
    cfg: &DiagConfig,
    seed: u64,
) -> Result<DiagnosticReport> {
    cfg.validate()?;
    let k = model.num_classes();
    let id = &bundle.id_test.batch;

    let sub = diag_subset(id, cfg.batch, seed);
    let obj = ModelObjective::new(model, &sub, cfg.scope);
    let probe_seed = sub_seed(seed, "diag/probes");
    let curvature = curvature_report(
        &obj,
        &obj.params(),
        &layer_blocks(model, cfg.scope),
        cfg.probes,
        cfg.power_iters,
        cfg.probe_kind,
        probe_seed,
    )?;

    let mut attack_rng = rng_for(seed, "diag/attack");
    let x_adv = pgd(
        &ModelLoss::clean(model),
        &id.inputs,
        &id.labels,
        attack,
        &mut attack_rng,
    )?;
    let adv = Batch::new(x_adv, id.labels.clone())?;

    let f_id = model.encode(&id.inputs)?;
    let s_id = class_stats(&f_id, &id.labels, k)?;
    let id_lid = lid_per_class(&f_id, &id.labels, k, cfg.lid_k, cfg.lid_metric)?;
    for w in &id_lid.warnings {
        log::warn!("id: {w}");
    }
    let shifted: [(&str, &Batch); 3] = [
        ("ood", &bundle.ood.batch),
        ("nat_shift", &bundle.nat_shift.batch),
        ("adv", &adv),
    ];
    let mut domains = Vec::with_capacity(3);
    for (name, b) in shifted {
        let f = model.encode(&b.inputs)?;
        let s = class_stats(&f, &b.labels, k)?;
        let lid = lid_per_class(&f, &b.labels, k, cfg.lid_k, cfg.lid_metric)?;
        for w in &lid.warnings {
            log::warn!("{name}: {w}");
        }
        domains.push(DomainGeometry {
            domain: name.to_string(),
            alignment: centroid_alignment(&s_id, &s)?,
            delta_lid: delta_lid(&id_lid, &lid)?,
            lid,
            discrepancy: discrepancy_bound(&s_id, &s, cfg.lipschitz)?,
        });
    }

    let mut perturbed = model.clone();
    perturbed.zero_awp();
    for layer in &mut perturbed.layers {
        let r = layer.awp.r_max();
        layer.awp.set_active_rank(r);
    }
    assign_radii(&mut perturbed, awp.rho_rel);
    let mut awp_rng = rng_for(seed, "diag/awp");
    awp_ascend(&mut perturbed, &adv, &AscentConfig::from(awp), &mut awp_rng)?;
    let displacement = awp_ood_displacement(&perturbed, id, &bundle.ood.batch)?;

    let trace: f64 = curvature.layers.iter().map(|l| l.trace).sum();
    let worst = domains.iter().map(|d| d.discrepancy).fold(0.0, f64::max);
    let ledger = theory_ledger(
        &model.layers,
        cfg.prior_sigma,
        bundle.train.batch.len(),
        cfg.confidence_delta,
        trace,
        worst,
        cfg.lipschitz,
    )?;
    Ok(DiagnosticReport {
        curvature,
        id_lid,
        domains,
        displacement,
        ledger,
        lipschitz: cfg.lipschitz,
        seed,
    })
}
