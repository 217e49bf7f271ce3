//! Layerwise adaptive low-rank adversarial weight perturbation.
//!
//! Each layer carries a perturbation branch `B_awp A_awp` whose active rank is
//! set by a curriculum over a squared-gradient curvature proxy. The branch is
//! driven by normalized gradient ascent on the perturbed-model loss, masked to
//! its active rank and projected onto a ball of radius `rho` in factor space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{AwpMode, BindOptions, BoundModel, EncoderModel, WeightMode};
use crate::rng::normal_matrix;
use crate::tensor::DenseMatrix;

/// Maximum number of step-size halvings tried before an ascent step is dropped.
pub const MAX_HALVINGS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AwpBranch {
    /// `r_max x n2`.
    pub a: DenseMatrix,
    /// `n1 x r_max`.
    pub b: DenseMatrix,
    pub active_rank: usize,
    pub rho: f64,
}

impl AwpBranch {
    /// A zero branch with every rank slot active and `rho = 0`.
    pub fn new(n1: usize, n2: usize, r_max: usize) -> Self {
        Self {
            a: DenseMatrix::zeros(r_max, n2),
            b: DenseMatrix::zeros(n1, r_max),
            active_rank: r_max,
            rho: 0.0,
        }
    }

    pub fn r_max(&self) -> usize {
        self.a.rows()
    }

    pub fn clear(&mut self) {
        self.a.data_mut().iter_mut().for_each(|v| *v = 0.0);
        self.b.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn is_zero(&self) -> bool {
        self.a.data().iter().chain(self.b.data()).all(|&v| v == 0.0)
    }

    /// `sqrt(|A|_F^2 + |B|_F^2)`.
    pub fn combined_norm(&self) -> f64 {
        (self.a.frobenius_sq() + self.b.frobenius_sq()).sqrt()
    }

    /// Zeroes rows of `A` and columns of `B` at or beyond the active rank.
    pub fn apply_mask(&mut self) {
        let r = self.active_rank.min(self.r_max());
        for i in r..self.a.rows() {
            self.a.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
        for row in 0..self.b.rows() {
            self.b.row_mut(row)[r..].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn set_active_rank(&mut self, rank: usize) {
        self.active_rank = rank.min(self.r_max());
        self.apply_mask();
    }

    /// The perturbation `B A` added to the layer weight.
    pub fn delta(&self) -> DenseMatrix {
        self.b
            .matmul(&self.a)
            .expect("branch factor shapes are consistent")
    }
}

/// Scales both factors by `rho / n` when their combined norm `n` exceeds `rho`.
pub fn project_awp(branch: &mut AwpBranch, rho: f64) -> Result<()> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::Contract(format!(
            "rho must be finite and >= 0, got {rho}"
        )));
    }
    let n = branch.combined_norm();
    if n > rho {
        if rho == 0.0 {
            branch.clear();
        } else {
            let s = rho / n;
            branch.a.scale_in_place(s);
            branch.b.scale_in_place(s);
            // Rounding can leave the scaled norm a few ulps above rho.
            let mut guard = 0;
            while branch.combined_norm() > rho && guard < 8 {
                let s = 1.0 - f64::EPSILON * 4.0;
                branch.a.scale_in_place(s);
                branch.b.scale_in_place(s);
                guard += 1;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AwpConfig {
    /// EMA coefficient of the curvature proxy.
    pub beta: f64,
    /// Percentile (0..=100) above which a layer receives the maximal rank.
    pub percentile: f64,
    /// Curriculum period in training steps.
    pub update_period: usize,
    pub r_max: usize,
    /// Per-layer radius as a fraction of the layer's effective weight norm.
    pub rho_rel: f64,
    pub inner_steps: usize,
    /// Ascent step as a fraction of the layer radius.
    pub lr_rel: f64,
    /// Norm of the random `A_awp` seed as a fraction of the layer radius.
    pub init_rel: f64,
    /// Samples drawn for each curvature proxy evaluation.
    pub proxy_batch: usize,
}

impl Default for AwpConfig {
    fn default() -> Self {
        Self {
            beta: 0.9,
            percentile: 80.0,
            update_period: 50,
            r_max: 4,
            rho_rel: 0.05,
            inner_steps: 1,
            lr_rel: 0.01,
            init_rel: 0.5,
            proxy_batch: 64,
        }
    }
}

impl AwpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Error::Config {
            key: key.into(),
            reason,
        };
        if !(0.0..1.0).contains(&self.beta) {
            return Err(bad(
                "awp_beta",
                format!("must be in [0, 1), got {}", self.beta),
            ));
        }
        if !(0.0..=100.0).contains(&self.percentile) {
            return Err(bad(
                "awp_percentile",
                format!("must be in [0, 100], got {}", self.percentile),
            ));
        }
        if self.update_period == 0 {
            return Err(bad("awp_update_period", "must be >= 1".into()));
        }
        if self.inner_steps == 0 {
            return Err(bad("awp_inner_steps", "must be >= 1".into()));
        }
        if !(self.rho_rel >= 0.0) {
            return Err(bad(
                "awp_rho_rel",
                format!("must be >= 0, got {}", self.rho_rel),
            ));
        }
        if !(self.lr_rel > 0.0) {
            return Err(bad(
                "awp_lr_rel",
                format!("must be > 0, got {}", self.lr_rel),
            ));
        }
        if !(self.init_rel > 0.0 && self.init_rel <= 1.0) {
            return Err(bad(
                "awp_init_rel",
                format!("must be in (0, 1], got {}", self.init_rel),
            ));
        }
        if self.proxy_batch == 0 {
            return Err(bad("awp_proxy_batch", "must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureState {
    pub ema: Vec<f64>,
    pub beta: f64,
    pub percentile: f64,
    pub update_period: usize,
    pub r_max: usize,
    pub ranks: Vec<usize>,
    pub updates: usize,
}

impl CurvatureState {
    /// Zero EMA; every layer starts at `r_max`.
    pub fn new(layers: usize, cfg: &AwpConfig) -> Self {
        Self {
            ema: vec![0.0; layers],
            beta: cfg.beta,
            percentile: cfg.percentile,
            update_period: cfg.update_period,
            r_max: cfg.r_max,
            ranks: vec![cfg.r_max; layers],
            updates: 0,
        }
    }

    pub fn is_due(&self, step: usize) -> bool {
        step.is_multiple_of(self.update_period)
    }

    /// Folds in fresh scores and reallocates ranks.
    pub fn update(&mut self, fresh: &[f64]) -> Result<&[usize]> {
        update_curvature_ema(self, fresh)?;
        self.ranks = allocate_ranks(&self.ema, self.percentile, self.r_max)?;
        self.updates += 1;
        Ok(&self.ranks)
    }
}

/// `beta * prev + (1 - beta) * fresh`.
pub fn ema_step(prev: f64, fresh: f64, beta: f64) -> f64 {
    beta * prev + (1.0 - beta) * fresh
}

pub fn update_curvature_ema(state: &mut CurvatureState, fresh: &[f64]) -> Result<()> {
    if fresh.len() != state.ema.len() {
        return Err(Error::Dimension {
            op: "curvature-ema",
            lhs: (state.ema.len(), 1),
            rhs: (fresh.len(), 1),
        });
    }
    if !(0.0..1.0).contains(&state.beta) {
        return Err(Error::Contract(format!(
            "beta must be in [0, 1), got {}",
            state.beta
        )));
    }
    if fresh.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
        return Err(Error::Numeric(
            "curvature scores must be finite and >= 0".into(),
        ));
    }
    for (h, &s) in state.ema.iter_mut().zip(fresh) {
        *h = ema_step(*h, s, state.beta);
    }
    Ok(())
}

/// Layer score `(1/|W|) * sum(n_v * g^2)` from per-layer gradients of the
/// mean loss.
pub fn proxy_scores(grads: &[&DenseMatrix], n_v: usize) -> Vec<f64> {
    grads
        .iter()
        .map(|g| {
            if g.is_empty() {
                0.0
            } else {
                n_v as f64 * g.frobenius_sq() / g.len() as f64
            }
        })
        .collect()
}

/// Squared-gradient curvature proxy per layer, taken with respect to the
/// effective weights on clean mean cross-entropy.
pub fn curvature_proxy(model: &EncoderModel, batch: &Batch) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Input(
            "curvature proxy needs a nonempty batch".into(),
        ));
    }
    let mut g = Graph::new();
    let bound = model.bind(
        &mut g,
        BindOptions {
            weights: WeightMode::Effective,
            awp: AwpMode::Off,
        },
    )?;
    let x = g.constant(batch.inputs.clone());
    let f = model.encode_node(&mut g, &bound, x, false)?;
    let logits = model.logits_node(&mut g, &bound, f)?;
    let loss = g.softmax_cross_entropy(logits, &batch.labels)?;
    g.backward(loss)?;
    let grads: Vec<&DenseMatrix> = bound.layers.iter().map(|l| g.grad(l.w)).collect();
    Ok(proxy_scores(&grads, batch.len()))
}

/// Nearest-rank percentile of an ascending slice: the value at 1-based
/// position `ceil(p/100 * n)`, clamped to `[1, n]`.
pub fn nearest_rank_percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[pos.clamp(1, n) - 1]
}

/// Percentile curriculum: scores at or above the `percentile`-th value get
/// `r_max`; scores at or below the `(100 - percentile)`-th value get 0; the
/// rest are interpolated linearly over `[1, r_max - 1]` and rounded.
pub fn allocate_ranks(scores: &[f64], percentile: f64, r_max: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::Input(
            "rank allocation needs at least one layer".into(),
        ));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let hi = nearest_rank_percentile(&sorted, percentile);
    let lo = nearest_rank_percentile(&sorted, 100.0 - percentile);
    let ranks = scores
        .iter()
        .map(|&s| {
            if s >= hi {
                r_max
            } else if s <= lo || r_max < 2 {
                0
            } else {
                let t = (s - lo) / (hi - lo);
                let r = 1.0 + t * (r_max as f64 - 2.0);
                (r.round() as usize).clamp(1, r_max - 1)
            }
        })
        .collect();
    Ok(ranks)
}

#[derive(Clone, Debug)]
pub struct AscentConfig {
    pub inner_steps: usize,
    pub lr_rel: f64,
    pub init_rel: f64,
}

impl From<&AwpConfig> for AscentConfig {
    fn from(cfg: &AwpConfig) -> Self {
        Self {
            inner_steps: cfg.inner_steps,
            lr_rel: cfg.lr_rel,
            init_rel: cfg.init_rel,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AscentReport {
    pub loss_entry: f64,
    pub loss_exit: f64,
    /// Loss after each inner step, accepted or not.
    pub step_losses: Vec<f64>,
    pub accepted: usize,
    pub halvings: usize,
}

/// Sets each layer's radius to `rho_rel * |W_eff|_F`.
pub fn assign_radii(model: &mut EncoderModel, rho_rel: f64) {
    for layer in &mut model.layers {
        let w = crate::model::lora_effective_weight(layer, false);
        layer.awp.rho = rho_rel * w.frobenius_norm();
    }
}

/// Inner maximization over every layer's branch on a graph where the branch
/// factors are bound as trainable leaves and `root` is the perturbed loss.
///
/// Branches must be zero at entry. `A_awp` is seeded with a random matrix of
/// norm `init_rel * rho` (which leaves `B A` and hence the loss unchanged);
/// then each step moves both factors along their normalized gradients,
/// masks and projects. A step that lowers the loss is retried with half the
/// step size up to [`MAX_HALVINGS`] times and otherwise dropped.
pub fn ascend_on_graph(
    g: &mut Graph,
    model: &mut EncoderModel,
    bound: &BoundModel,
    root: NodeId,
    cfg: &AscentConfig,
    rng: &mut impl Rng,
) -> Result<AscentReport> {
    if cfg.inner_steps == 0 {
        return Err(Error::Contract(
            "inner ascent needs at least one step".into(),
        ));
    }
    let mut leaves = Vec::with_capacity(bound.layers.len());
    for bl in &bound.layers {
        match (bl.awp_a, bl.awp_b) {
            (Some(a), Some(b)) => leaves.push((a, b)),
            _ => return Err(Error::Contract("graph bound without AWP leaves".into())),
        }
    }
    for (layer, &(la, lb)) in model.layers.iter_mut().zip(&leaves) {
        if !layer.awp.is_zero() {
            return Err(Error::Contract(format!(
                "branch of {} must be zero at ascent entry",
                layer.name
            )));
        }
        let br = &mut layer.awp;
        let (r, n2) = br.a.shape();
        let seed = normal_matrix(rng, r, n2, 1.0);
        br.a = seed;
        br.apply_mask();
        let n = br.a.frobenius_norm();
        if n > 0.0 {
            br.a.scale_in_place(cfg.init_rel * br.rho / n);
        }
        project_awp(br, br.rho)?;
        g.set_value(la, br.a.clone())?;
        g.set_value(lb, br.b.clone())?;
    }

    let mut current = checked_loss(g, root)?;
    let mut report = AscentReport {
        loss_entry: current,
        ..AscentReport::default()
    };
    for _ in 0..cfg.inner_steps {
        g.forward(root)?;
        g.backward(root)?;
        let grads: Vec<(DenseMatrix, DenseMatrix)> = leaves
            .iter()
            .map(|&(la, lb)| (g.grad(la).clone(), g.grad(lb).clone()))
            .collect();
        let saved: Vec<AwpBranch> = model.layers.iter().map(|l| l.awp.clone()).collect();
        let mut scale = 1.0;
        let mut accepted = false;
        let mut last = current;
        for attempt in 0..=MAX_HALVINGS {
            for ((layer, prev), (ga, gb)) in model.layers.iter_mut().zip(&saved).zip(&grads) {
                let br = &mut layer.awp;
                *br = prev.clone();
                let eta = scale * cfg.lr_rel * br.rho;
                step_normalized(&mut br.a, ga, eta);
                step_normalized(&mut br.b, gb, eta);
                br.apply_mask();
                project_awp(br, br.rho)?;
            }
            for (layer, &(la, lb)) in model.layers.iter().zip(&leaves) {
                g.set_value(la, layer.awp.a.clone())?;
                g.set_value(lb, layer.awp.b.clone())?;
            }
            last = checked_loss(g, root)?;
            if last >= current {
                accepted = true;
                break;
            }
            if attempt < MAX_HALVINGS {
                scale *= 0.5;
                report.halvings += 1;
            }
        }
        report.step_losses.push(last);
        if accepted {
            current = last;
            report.accepted += 1;
        } else {
            for ((layer, prev), &(la, lb)) in model.layers.iter_mut().zip(saved).zip(&leaves) {
                layer.awp = prev;
                g.set_value(la, layer.awp.a.clone())?;
                g.set_value(lb, layer.awp.b.clone())?;
            }
            g.forward(root)?;
        }
    }
    report.loss_exit = current;
    Ok(report)
}

fn step_normalized(x: &mut DenseMatrix, grad: &DenseMatrix, eta: f64) {
    let n = grad.frobenius_norm();
    if n > 0.0 && eta > 0.0 {
        x.axpy(eta / n, grad)
            .expect("gradient matches factor shape");
    }
}

fn checked_loss(g: &mut Graph, root: NodeId) -> Result<f64> {
    let v = g.forward(root)?.item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite perturbed loss {v}")));
    }
    Ok(v)
}

/// Runs the inner maximization on the perturbed-model cross-entropy of
/// `batch` and leaves the resulting branches on `model`.
pub fn awp_ascend(
    model: &mut EncoderModel,
    batch: &Batch,
    cfg: &AscentConfig,
    rng: &mut impl Rng,
) -> Result<AscentReport> {
    let mut g = Graph::new();
    let bound = model.bind(
        &mut g,
        BindOptions {
            weights: WeightMode::Lora { trainable: false },
            awp: AwpMode::Trainable,
        },
    )?;
    let x = g.constant(batch.inputs.clone());
    let f = model.encode_node(&mut g, &bound, x, true)?;
    let logits = model.logits_node(&mut g, &bound, f)?;
    let loss = g.softmax_cross_entropy(logits, &batch.labels)?;
    ascend_on_graph(&mut g, model, &bound, loss, cfg, rng)
}

/// Unit-norm features under `W + B_awp A_awp`.
pub fn perturbed_features(model: &EncoderModel, x: &DenseMatrix) -> Result<DenseMatrix> {
    model.features(x, true)
}
