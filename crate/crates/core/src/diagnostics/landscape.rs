//! Two-dimensional loss slices along random orthonormal directions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hvp::Objective;
use crate::params::ParamVector;
use crate::rng::{normal_vec, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSlice {
    /// Grid coordinates in `[-1, 1]`, shared by both axes.
    pub coords: Vec<f64>,
    pub extent: f64,
    /// `values[i][j] = L(theta + extent * (coords[i] d1 + coords[j] d2))`.
    pub values: Vec<Vec<f64>>,
    pub center_loss: f64,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl LossSlice {
    pub fn grid(&self) -> usize {
        self.coords.len()
    }
}

/// Two seeded Gaussian directions, Gram-Schmidt orthonormalized.
pub fn slice_directions(dim: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if dim < 2 {
        return Err(Error::Input(format!(
            "a 2-D slice needs at least 2 parameters, got {dim}"
        )));
    }
    let mut rng = rng_for(seed, "landscape/directions");
    loop {
        let mut d1 = normal_vec(&mut rng, dim);
        let n1 = d1.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n1 == 0.0 {
            continue;
        }
        d1.iter_mut().for_each(|v| *v /= n1);
        let mut d2 = normal_vec(&mut rng, dim);
        // Two passes of projection keep d1.d2 at rounding level.
        for _ in 0..2 {
            let p: f64 = d1.iter().zip(&d2).map(|(a, b)| a * b).sum();
            d2.iter_mut().zip(&d1).for_each(|(b, a)| *b -= p * a);
        }
        let n2 = d2.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n2 < 1e-8 {
            continue;
        }
        d2.iter_mut().for_each(|v| *v /= n2);
        return Ok((d1, d2));
    }
}

pub fn loss_slice<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamVector,
    grid: usize,
    extent: f64,
    seed: u64,
) -> Result<LossSlice> {
    if grid < 3 {
        return Err(Error::Input(format!("slice grid must be >= 3, got {grid}")));
    }
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(Error::Input(format!(
            "slice extent must be > 0, got {extent}"
        )));
    }
    let (d1, d2) = slice_directions(params.len(), seed)?;
    let coords: Vec<f64> = (0..grid)
        .map(|i| -1.0 + 2.0 * i as f64 / (grid - 1) as f64)
        .collect();
    let base = params.values();
    let mut values = Vec::with_capacity(grid);
    for &a in &coords {
        let mut row = Vec::with_capacity(grid);
        for &b in &coords {
            let (sa, sb) = (a * extent, b * extent);
            let point: Vec<f64> = base
                .iter()
                .zip(d1.iter().zip(&d2))
                .map(|(t, (x, y))| t + sa * x + sb * y)
                .collect();
            row.push(objective.value(&params.with_values(point)?)?);
        }
        values.push(row);
    }
    Ok(LossSlice {
        center_loss: objective.value(params)?,
        coords,
        extent,
        values,
        d1,
        d2,
    })
}
