//! Sign-gradient input attacks under an l-infinity ball.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{AwpMode, BindOptions, EncoderModel, WeightMode};
use crate::tensor::DenseMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step: f64,
    pub iters: usize,
    pub clip_min: f64,
    pub clip_max: f64,
    /// Start from a uniform point in the ball instead of the clean input.
    pub random_start: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 4.0 / 255.0,
            step: 1.0 / 255.0,
            iters: 10,
            clip_min: f64::NEG_INFINITY,
            clip_max: f64::INFINITY,
            random_start: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config {
                key: "attack_epsilon".into(),
                reason: format!("must be finite and >= 0, got {}", self.epsilon),
            });
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::Config {
                key: "attack_step".into(),
                reason: format!("must be finite and > 0, got {}", self.step),
            });
        }
        if self.iters == 0 {
            return Err(Error::Config {
                key: "attack_iters".into(),
                reason: "must be >= 1".into(),
            });
        }
        if !(self.clip_min <= self.clip_max) {
            return Err(Error::Config {
                key: "attack_clip_min".into(),
                reason: format!("{} exceeds clip_max {}", self.clip_min, self.clip_max),
            });
        }
        Ok(())
    }
}

/// A differentiable loss of a batch of inputs.
pub trait InputLoss {
    /// Loss and its gradient with respect to `x`.
    fn loss_and_input_grad(&self, x: &DenseMatrix, labels: &[usize]) -> Result<(f64, DenseMatrix)>;
}

/// Mean cross-entropy of an encoder, optionally through its weight-perturbation branch.
pub struct ModelLoss<'a> {
    pub model: &'a EncoderModel,
    pub perturbed: bool,
}

impl<'a> ModelLoss<'a> {
    pub fn clean(model: &'a EncoderModel) -> Self {
        Self {
            model,
            perturbed: false,
        }
    }
}

impl InputLoss for ModelLoss<'_> {
    fn loss_and_input_grad(&self, x: &DenseMatrix, labels: &[usize]) -> Result<(f64, DenseMatrix)> {
        let mut g = Graph::new();
        let bound = self.model.bind(
            &mut g,
            BindOptions {
                weights: WeightMode::Lora { trainable: false },
                awp: if self.perturbed {
                    AwpMode::Constant
                } else {
                    AwpMode::Off
                },
            },
        )?;
        let xn = g.param(x.clone());
        let f = self.model.encode_node(&mut g, &bound, xn, self.perturbed)?;
        let logits = self.model.logits_node(&mut g, &bound, f)?;
        let loss = g.softmax_cross_entropy(logits, labels)?;
        g.backward(loss)?;
        Ok((g.value(loss).item()?, g.grad(xn).clone()))
    }
}

/// Elementwise clamp into `[x_ref - eps, x_ref + eps]` intersected with `[clip_min, clip_max]`.
pub fn project_linf(
    x_adv: &DenseMatrix,
    x_ref: &DenseMatrix,
    eps: f64,
    clip_min: f64,
    clip_max: f64,
) -> Result<DenseMatrix> {
    if x_adv.shape() != x_ref.shape() {
        return Err(Error::Dimension {
            op: "project-linf",
            lhs: x_adv.shape(),
            rhs: x_ref.shape(),
        });
    }
    let data = x_adv
        .data()
        .iter()
        .zip(x_ref.data())
        .map(|(&v, &r)| {
            let mut p = v.clamp(r - eps, r + eps);
            // `r + eps` can round so that `p - r` exceeds eps by an ulp; step
            // back toward the reference until the measured distance fits.
            while p - r > eps {
                p = p.next_down();
            }
            while r - p > eps {
                p = p.next_up();
            }
            // Clipping moves toward a reference inside the box, so the
            // distance can only shrink.
            p.clamp(clip_min, clip_max)
        })
        .collect();
    DenseMatrix::from_vec(x_adv.rows(), x_adv.cols(), data)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sign_step(
    loss: &impl InputLoss,
    x_cur: &DenseMatrix,
    x_ref: &DenseMatrix,
    labels: &[usize],
    step: f64,
    cfg: &AttackConfig,
) -> Result<DenseMatrix> {
    let (_, grad) = loss.loss_and_input_grad(x_cur, labels)?;
    if !grad.is_finite() {
        return Err(Error::Numeric("non-finite input gradient".into()));
    }
    let moved = x_cur
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| x + step * sign(g))
        .collect();
    let moved = DenseMatrix::from_vec(x_cur.rows(), x_cur.cols(), moved)?;
    project_linf(&moved, x_ref, cfg.epsilon, cfg.clip_min, cfg.clip_max)
}

/// One step of size `epsilon` along the gradient sign.
pub fn fgsm(
    loss: &impl InputLoss,
    x: &DenseMatrix,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<DenseMatrix> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    sign_step(loss, x, x, labels, cfg.epsilon, cfg)
}

/// Projected sign-gradient ascent; returns the final iterate.
pub fn pgd(
    loss: &impl InputLoss,
    x: &DenseMatrix,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<DenseMatrix> {
    Ok(pgd_trace(loss, x, labels, cfg, rng)?
        .pop()
        .expect("trace holds at least the start point"))
}

/// Every PGD iterate, starting point first.
pub fn pgd_trace(
    loss: &impl InputLoss,
    x: &DenseMatrix,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<Vec<DenseMatrix>> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(vec![x.clone()]);
    }
    let start = if cfg.random_start {
        let data = x
            .data()
            .iter()
            .map(|&v| v + rng.random_range(-cfg.epsilon..=cfg.epsilon))
            .collect();
        let noisy = DenseMatrix::from_vec(x.rows(), x.cols(), data)?;
        project_linf(&noisy, x, cfg.epsilon, cfg.clip_min, cfg.clip_max)?
    } else {
        x.clone()
    };
    let mut trace = Vec::with_capacity(cfg.iters + 1);
    trace.push(start);
    for _ in 0..cfg.iters {
        let cur = trace.last().expect("nonempty");
        let next = sign_step(loss, cur, x, labels, cfg.step, cfg)?;
        trace.push(next);
    }
    Ok(trace)
}
