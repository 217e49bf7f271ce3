//! Hessian estimators built on finite-difference Hessian-vector products.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hvp::{hvp_fd, Objective, DEFAULT_HVP_STEP};
use crate::params::ParamVector;
use crate::rng::{normal_vec, rademacher_vec, rng_for, SeededRng};

/// Distribution of Hutchinson probe entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Uniform signs; zero variance on diagonal Hessians.
    Rademacher,
    Gaussian,
}

impl std::fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProbeKind::Rademacher => "rademacher",
            ProbeKind::Gaussian => "gaussian",
        })
    }
}

fn draw(rng: &mut SeededRng, kind: ProbeKind, n: usize) -> Vec<f64> {
    match kind {
        ProbeKind::Rademacher => rademacher_vec(rng, n),
        ProbeKind::Gaussian => normal_vec(rng, n),
    }
}

/// Probe supported on the named blocks (all blocks when `blocks` is empty).
fn block_probe(
    params: &ParamVector,
    blocks: &[&str],
    kind: ProbeKind,
    rng: &mut SeededRng,
) -> Result<ParamVector> {
    let mut v = vec![0.0; params.len()];
    if blocks.is_empty() {
        v = draw(rng, kind, params.len());
    } else {
        for name in blocks {
            let b = params
                .block(name)
                .ok_or_else(|| Error::Input(format!("unknown parameter block {name}")))?;
            let vals = draw(rng, kind, b.len());
            v[b.range()].copy_from_slice(&vals);
        }
    }
    params.with_values(v)
}

fn block_len(params: &ParamVector, blocks: &[&str]) -> Result<usize> {
    if blocks.is_empty() {
        return Ok(params.len());
    }
    blocks
        .iter()
        .map(|n| {
            params
                .block(n)
                .map(|b| b.len())
                .ok_or_else(|| Error::Input(format!("unknown parameter block {n}")))
        })
        .sum()
}

/// `(1/m) sum_j v_j^T H v_j` with probes supported on `blocks`; the
/// Hutchinson estimate of the trace of that diagonal block of the Hessian.
/// An empty `blocks` slice means every parameter.
pub fn hutchinson_layer_trace<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamVector,
    blocks: &[&str],
    probes: usize,
    kind: ProbeKind,
    seed: u64,
) -> Result<f64> {
    if probes == 0 {
        return Err(Error::Input(
            "Hutchinson estimator needs at least one probe".into(),
        ));
    }
    if block_len(params, blocks)? == 0 {
        return Ok(0.0);
    }
    let mut rng = rng_for(seed, "hutchinson");
    let mut acc = 0.0;
    for _ in 0..probes {
        let v = block_probe(params, blocks, kind, &mut rng)?;
        if v.norm() == 0.0 {
            continue;
        }
        let hv = hvp_fd(objective, params, &v, DEFAULT_HVP_STEP)?;
        acc += v.dot(&hv)?;
    }
    Ok(acc / probes as f64)
}

/// Average curvature per parameter, `trace / count`.
pub fn kappa(trace: f64, count: usize) -> Result<f64> {
    if count == 0 {
        return Err(Error::Input("kappa needs a nonzero parameter count".into()));
    }
    Ok(trace / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerIteration {
    pub lambda: f64,
    /// `|Hv - lambda v|` at the final iterate.
    pub residual: f64,
    pub iters: usize,
    /// Rayleigh quotient of each iterate before normalization.
    pub history: Vec<f64>,
    /// Set when `Hv` vanished; `lambda` is then reported as 0.
    pub degenerate: bool,
}

/// Power iteration `v <- Hv / |Hv|` from a seeded Gaussian start; returns the
/// Rayleigh quotient of the final iterate.
pub fn lambda_max<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamVector,
    iters: usize,
    seed: u64,
) -> Result<PowerIteration> {
    if iters == 0 {
        return Err(Error::Input(
            "power iteration needs at least one iteration".into(),
        ));
    }
    if params.is_empty() {
        return Err(Error::Input("power iteration over zero parameters".into()));
    }
    let mut rng = rng_for(seed, "power-iteration");
    let mut v = params.with_values(normal_vec(&mut rng, params.len()))?;
    v = v.scale(1.0 / v.norm());
    let mut history = Vec::with_capacity(iters);
    let degenerate = |iters, history| PowerIteration {
        lambda: 0.0,
        residual: 0.0,
        iters,
        history,
        degenerate: true,
    };
    for t in 0..iters {
        let hv = hvp_fd(objective, params, &v, DEFAULT_HVP_STEP)?;
        let n = hv.norm();
        history.push(v.dot(&hv)?);
        if n == 0.0 {
            return Ok(degenerate(t + 1, history));
        }
        v = hv.scale(1.0 / n);
    }
    let hv = hvp_fd(objective, params, &v, DEFAULT_HVP_STEP)?;
    if hv.norm() == 0.0 {
        return Ok(degenerate(iters, history));
    }
    let lambda = v.dot(&hv)?;
    let residual = hv.axpy(-lambda, &v)?.norm();
    Ok(PowerIteration {
        lambda,
        residual,
        iters,
        history,
        degenerate: false,
    })
}

/// `sqrt((1/m) sum_j |H u_j|^2) / sqrt(d)`.
pub fn hessian_frob<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamVector,
    probes: usize,
    kind: ProbeKind,
    seed: u64,
) -> Result<f64> {
    if probes == 0 {
        return Err(Error::Input(
            "Frobenius estimator needs at least one probe".into(),
        ));
    }
    if params.is_empty() {
        return Err(Error::Input(
            "Frobenius estimate over zero parameters".into(),
        ));
    }
    let mut rng = rng_for(seed, "hessian-frobenius");
    let mut acc = 0.0;
    for _ in 0..probes {
        let u = block_probe(params, &[], kind, &mut rng)?;
        if u.norm() == 0.0 {
            continue;
        }
        let hu = hvp_fd(objective, params, &u, DEFAULT_HVP_STEP)?;
        acc += hu.dot(&hu)?;
    }
    Ok((acc / probes as f64).sqrt() / (params.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCurvature {
    pub layer: String,
    pub trace: f64,
    pub count: usize,
    pub kappa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub lambda_max: f64,
    pub lambda_residual: f64,
    pub lambda_degenerate: bool,
    pub frob_normalized: f64,
    pub layers: Vec<LayerCurvature>,
    pub probes: usize,
    pub iters: usize,
    pub probe_kind: ProbeKind,
}

/// Full curvature report; `layers` maps a layer name to its parameter blocks.
pub fn curvature_report<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamVector,
    layers: &[(String, Vec<String>)],
    probes: usize,
    iters: usize,
    kind: ProbeKind,
    seed: u64,
) -> Result<CurvatureReport> {
    let power = lambda_max(objective, params, iters, seed)?;
    let frob = hessian_frob(objective, params, probes, kind, seed)?;
    let mut out = Vec::with_capacity(layers.len());
    for (name, blocks) in layers {
        let names: Vec<&str> = blocks.iter().map(String::as_str).collect();
        let trace = hutchinson_layer_trace(objective, params, &names, probes, kind, seed)?;
        let count = block_len(params, &names)?;
        out.push(LayerCurvature {
            layer: name.clone(),
            trace,
            count,
            kappa: kappa(trace, count)?,
        });
    }
    Ok(CurvatureReport {
        lambda_max: power.lambda,
        lambda_residual: power.residual,
        lambda_degenerate: power.degenerate,
        frob_normalized: frob,
        layers: out,
        probes,
        iters,
        probe_kind: kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hvp::QuadraticObjective;

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa(4.0, 2).unwrap(), 2.0);
        assert_eq!(kappa(0.0, 3).unwrap(), 0.0);
        assert!(kappa(1.0, 0).is_err());
    }

    #[test]
    fn identity_power_iteration() {
        let q = QuadraticObjective::diagonal(&[1.0, 1.0, 1.0]);
        let theta = q.params(vec![0.1, 0.2, 0.3]).unwrap();
        let p = lambda_max(&q, &theta, 1, 4).unwrap();
        assert!((p.lambda - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_hessian_is_degenerate() {
        let q = QuadraticObjective::diagonal(&[0.0, 0.0]);
        let theta = q.params(vec![0.0, 0.0]).unwrap();
        let p = lambda_max(&q, &theta, 5, 1).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.lambda, 0.0);
        assert_eq!(
            hessian_frob(&q, &theta, 10, ProbeKind::Gaussian, 1).unwrap(),
            0.0
        );
        assert_eq!(
            hutchinson_layer_trace(&q, &theta, &[], 10, ProbeKind::Gaussian, 1).unwrap(),
            0.0
        );
    }
}
