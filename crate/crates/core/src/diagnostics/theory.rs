//! Generalization-ledger terms: KL proximity of the adapters to the prior,
//! a curvature sharpness term and the worst domain discrepancy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LoraLayer;

/// `sum over layers (|A|_F^2 + |B|_F^2) / (2 sigma^2)`.
pub fn kl_proximity(layers: &[LoraLayer], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Input(format!("sigma must be > 0, got {sigma}")));
    }
    let sq: f64 = layers
        .iter()
        .map(|l| l.a.frobenius_sq() + l.b.frobenius_sq())
        .sum();
    Ok(sq / (2.0 * sigma * sigma))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryLedger {
    pub sigma: f64,
    pub n: usize,
    pub delta: f64,
    pub kl: f64,
    /// `KL / n + ln(2n/delta) / (2n)`.
    pub proximity: f64,
    /// `sigma^2 / 2 * tr(H)` with the trace summed over layers.
    pub sharpness: f64,
    /// Largest ID-to-shifted discrepancy surrogate.
    pub discrepancy: f64,
    pub lipschitz: f64,
}

pub fn theory_ledger(
    layers: &[LoraLayer],
    sigma: f64,
    n: usize,
    delta: f64,
    trace: f64,
    discrepancy: f64,
    lipschitz: f64,
) -> Result<TheoryLedger> {
    if n == 0 {
        return Err(Error::Input("sample count must be >= 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Input(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    let kl = kl_proximity(layers, sigma)?;
    let nf = n as f64;
    Ok(TheoryLedger {
        sigma,
        n,
        delta,
        kl,
        proximity: kl / nf + (2.0 * nf / delta).ln() / (2.0 * nf),
        sharpness: 0.5 * sigma * sigma * trace,
        discrepancy,
        lipschitz,
    })
}
