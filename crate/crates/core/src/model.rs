//! LoRA-parameterized MLP encoder scored against a frozen class-embedding head.
//!
//! Every dense layer computes `W = W0 + (alpha / r) * B * A` with `W0` frozen.
//! Encoder outputs are unit rows; logits are `logit_scale * features * head^T`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::awp::AwpBranch;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::hvp::Objective;
use crate::params::ParamVector;
use crate::rng::{normal_matrix, rng_for, uniform_matrix};
use crate::tensor::DenseMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub awp_max_rank: usize,
    /// Multiplier applied to the cosine logits.
    pub logit_scale: f64,
    /// Number of trailing input coordinates whose first-layer base weights
    /// are amplified by `sensitive_gain`.
    pub sensitive_inputs: usize,
    pub sensitive_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden: vec![64, 64],
            feature_dim: 16,
            num_classes: 8,
            lora_rank: 8,
            lora_alpha: 8.0,
            awp_max_rank: 4,
            logit_scale: 8.0,
            sensitive_inputs: 4,
            sensitive_gain: 30.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraLayer {
    pub name: String,
    pub w0: DenseMatrix,
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub alpha: f64,
    pub awp: AwpBranch,
}

impl LoraLayer {
    /// Standard LoRA initialization: `A ~ U(-1/sqrt(n2), 1/sqrt(n2))`, `B = 0`.
    pub fn new(
        name: impl Into<String>,
        w0: DenseMatrix,
        rank: usize,
        alpha: f64,
        awp_max_rank: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let (n1, n2) = w0.shape();
        if rank == 0 || rank > n1.min(n2) {
            return Err(Error::Input(format!(
                "LoRA rank {rank} must lie in [1, {}] for a {n1}x{n2} layer",
                n1.min(n2)
            )));
        }
        let a = uniform_matrix(rng, rank, n2, 1.0 / (n2 as f64).sqrt());
        let b = DenseMatrix::zeros(n1, rank);
        Ok(Self {
            name: name.into(),
            awp: AwpBranch::new(n1, n2, awp_max_rank.min(n1.min(n2))),
            w0,
            a,
            b,
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn param_count(&self) -> usize {
        self.w0.len()
    }
}

/// `W0 + (alpha/r) B A`, plus the weight-perturbation branch `B_awp A_awp`
/// when `include_awp` is set.
pub fn lora_effective_weight(layer: &LoraLayer, include_awp: bool) -> DenseMatrix {
    let delta = layer
        .b
        .matmul(&layer.a)
        .expect("LoRA factor shapes are consistent")
        .scale(layer.scaling());
    let mut w = layer.w0.add(&delta).expect("delta matches W0");
    if include_awp {
        let pert = layer
            .awp
            .b
            .matmul(&layer.awp.a)
            .expect("branch factor shapes are consistent");
        w.add_assign(&pert).expect("branch matches W0");
    }
    w
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub layers: Vec<LoraLayer>,
    /// K x D unit-norm class embeddings, frozen.
    pub class_head: DenseMatrix,
    pub logit_scale: f64,
}

/// How layer weights enter a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    /// `W0 + s B A` with the LoRA factors as leaves.
    Lora { trainable: bool },
    /// Effective weights as trainable leaves (factors folded in).
    Effective,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AwpMode {
    Off,
    Constant,
    Trainable,
}

#[derive(Clone, Copy, Debug)]
pub struct BindOptions {
    pub weights: WeightMode,
    pub awp: AwpMode,
}

impl BindOptions {
    pub const FROZEN: BindOptions = BindOptions {
        weights: WeightMode::Lora { trainable: false },
        awp: AwpMode::Off,
    };
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub a: Option<NodeId>,
    pub b: Option<NodeId>,
    /// Effective weight without the perturbation branch.
    pub w: NodeId,
    pub w_t: NodeId,
    pub awp_a: Option<NodeId>,
    pub awp_b: Option<NodeId>,
    pub w_pert_t: Option<NodeId>,
}

/// Model weights recorded on a graph, shared by every pass built from them.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub layers: Vec<BoundLayer>,
    head_t: NodeId,
}

impl EncoderModel {
    /// Random base model: Kaiming-normal `W0`, unit-norm class embeddings.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.num_classes < 2 {
            return Err(Error::Input("need at least two classes".into()));
        }
        let mut rng = rng_for(seed, "model-init");
        let mut dims = vec![cfg.input_dim];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(cfg.feature_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let (n2, n1) = (pair[0], pair[1]);
            let mut w0 = normal_matrix(&mut rng, n1, n2, (2.0 / n2 as f64).sqrt());
            if i == 0 && cfg.sensitive_inputs > 0 {
                let first = n2.saturating_sub(cfg.sensitive_inputs);
                for r in 0..n1 {
                    for c in first..n2 {
                        w0.set(r, c, w0.get(r, c) * cfg.sensitive_gain);
                    }
                }
            }
            let rank = cfg.lora_rank.min(n1.min(n2));
            let alpha = cfg.lora_alpha * rank as f64 / cfg.lora_rank as f64;
            layers.push(LoraLayer::new(
                format!("layer{i}"),
                w0,
                rank,
                alpha,
                cfg.awp_max_rank,
                &mut rng,
            )?);
        }
        let class_head = unit_rows(normal_matrix(
            &mut rng,
            cfg.num_classes,
            cfg.feature_dim,
            1.0,
        ));
        Self::from_parts(layers, class_head, cfg.logit_scale)
    }

    pub fn from_parts(
        layers: Vec<LoraLayer>,
        class_head: DenseMatrix,
        logit_scale: f64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Input("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension {
                    op: "layer chain",
                    lhs: pair[0].w0.shape(),
                    rhs: pair[1].w0.shape(),
                });
            }
        }
        let feat = layers.last().map(LoraLayer::out_dim).unwrap_or(0);
        if class_head.cols() != feat {
            return Err(Error::Dimension {
                op: "class head",
                lhs: class_head.shape(),
                rhs: (class_head.rows(), feat),
            });
        }
        Ok(Self {
            layers,
            class_head,
            logit_scale,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.class_head.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_head.rows()
    }

    pub fn bind(&self, g: &mut Graph, opts: BindOptions) -> Result<BoundModel> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (a, b, w) = match opts.weights {
                WeightMode::Lora { trainable } => {
                    let a = g.leaf(layer.a.clone(), trainable);
                    let b = g.leaf(layer.b.clone(), trainable);
                    let w0 = g.constant(layer.w0.clone());
                    let ba = g.matmul(b, a)?;
                    let delta = g.scale(ba, layer.scaling())?;
                    (Some(a), Some(b), g.add(w0, delta)?)
                }
                WeightMode::Effective => {
                    let w = g.param(lora_effective_weight(layer, false));
                    (None, None, w)
                }
            };
            let w_t = g.transpose(w)?;
            let (awp_a, awp_b, w_pert_t) = match opts.awp {
                AwpMode::Off => (None, None, None),
                AwpMode::Constant | AwpMode::Trainable => {
                    let trainable = opts.awp == AwpMode::Trainable;
                    let aa = g.leaf(layer.awp.a.clone(), trainable);
                    let ab = g.leaf(layer.awp.b.clone(), trainable);
                    let pert = g.matmul(ab, aa)?;
                    let wp = g.add(w, pert)?;
                    (Some(aa), Some(ab), Some(g.transpose(wp)?))
                }
            };
            layers.push(BoundLayer {
                a,
                b,
                w,
                w_t,
                awp_a,
                awp_b,
                w_pert_t,
            });
        }
        let head_t = g.constant(self.class_head.transpose().scale(self.logit_scale));
        Ok(BoundModel { layers, head_t })
    }

    /// Records an encoder pass; `perturbed` routes through `W_pert`.
    pub fn encode_node(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        x: NodeId,
        perturbed: bool,
    ) -> Result<NodeId> {
        let in_dim = self.input_dim();
        if g.value(x).cols() != in_dim {
            return Err(Error::Dimension {
                op: "encode",
                lhs: g.value(x).shape(),
                rhs: (g.value(x).rows(), in_dim),
            });
        }
        let last = bound.layers.len() - 1;
        let mut h = x;
        for (i, layer) in bound.layers.iter().enumerate() {
            let wt = if perturbed {
                layer.w_pert_t.ok_or_else(|| {
                    Error::Contract("perturbed pass requested on a graph bound without AWP".into())
                })?
            } else {
                layer.w_t
            };
            h = g.matmul(h, wt)?;
            if i < last {
                h = g.relu(h)?;
            }
        }
        g.l2_normalize(h)
    }

    pub fn logits_node(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        features: NodeId,
    ) -> Result<NodeId> {
        g.matmul(features, bound.head_t)
    }

    /// Unit-norm features for each input row.
    pub fn encode(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.features(x, false)
    }

    pub fn features(&self, x: &DenseMatrix, perturbed: bool) -> Result<DenseMatrix> {
        let mut g = Graph::new();
        let opts = BindOptions {
            weights: WeightMode::Lora { trainable: false },
            awp: if perturbed {
                AwpMode::Constant
            } else {
                AwpMode::Off
            },
        };
        let bound = self.bind(&mut g, opts)?;
        let xn = g.constant(x.clone());
        let f = self.encode_node(&mut g, &bound, xn, perturbed)?;
        Ok(g.value(f).clone())
    }

    pub fn logits(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let f = self.encode(x)?;
        f.matmul(&self.class_head.transpose().scale(self.logit_scale))
    }

    pub fn predict(&self, x: &DenseMatrix) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        cross_entropy(&self.logits(&batch.inputs)?, &batch.labels)
    }

    /// Trainable LoRA factors, named `<layer>.A` / `<layer>.B`.
    pub fn lora_params(&self) -> ParamVector {
        let names: Vec<(String, String)> = self
            .layers
            .iter()
            .map(|l| (format!("{}.A", l.name), format!("{}.B", l.name)))
            .collect();
        ParamVector::flatten(
            self.layers
                .iter()
                .zip(&names)
                .flat_map(|(l, (na, nb))| [(na.as_str(), &l.a), (nb.as_str(), &l.b)]),
        )
    }

    pub fn set_lora_params(&mut self, params: &ParamVector) -> Result<()> {
        for layer in &mut self.layers {
            for (suffix, target) in [("A", &mut layer.a), ("B", &mut layer.b)] {
                let name = format!("{}.{suffix}", layer.name);
                let m = params
                    .matrix(&name)
                    .ok_or_else(|| Error::Input(format!("missing parameter block {name}")))?;
                if m.shape() != target.shape() {
                    return Err(Error::Dimension {
                        op: "set_lora_params",
                        lhs: target.shape(),
                        rhs: m.shape(),
                    });
                }
                *target = m;
            }
        }
        Ok(())
    }

    /// Effective weights `W0 + s B A`, named `<layer>.W`.
    pub fn effective_params(&self) -> ParamVector {
        let mats: Vec<(String, DenseMatrix)> = self
            .layers
            .iter()
            .map(|l| (format!("{}.W", l.name), lora_effective_weight(l, false)))
            .collect();
        ParamVector::flatten(mats.iter().map(|(n, m)| (n.as_str(), m)))
    }

    /// Frozen base weights, laid out like [`Self::effective_params`].
    pub fn base_params(&self) -> ParamVector {
        let names: Vec<String> = self
            .layers
            .iter()
            .map(|l| format!("{}.W", l.name))
            .collect();
        ParamVector::flatten(
            names
                .iter()
                .zip(&self.layers)
                .map(|(n, l)| (n.as_str(), &l.w0)),
        )
    }

    /// Order-sensitive FNV-1a hash over the bits of every `W0` and the class head.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |m: &DenseMatrix| {
            for v in m.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        };
        for l in &self.layers {
            feed(&l.w0);
        }
        feed(&self.class_head);
        h
    }

    pub fn zero_awp(&mut self) {
        for l in &mut self.layers {
            l.awp.clear();
        }
    }
}

/// Mean negative log-softmax probability of the true class.
pub fn cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = g.softmax_cross_entropy(z, labels)?;
    g.value(l).item()
}

/// `||theta - theta_ref||_F / ||theta_ref||_F` over effective weights.
pub fn relative_param_distance(model: &EncoderModel, reference: &ParamVector) -> Result<f64> {
    let current = model.effective_params();
    if current.len() != reference.len() {
        return Err(Error::Dimension {
            op: "relative_param_distance",
            lhs: (current.len(), 1),
            rhs: (reference.len(), 1),
        });
    }
    let denom = reference.norm();
    if denom == 0.0 {
        return Err(Error::Input("reference parameters have zero norm".into()));
    }
    Ok(current.sub(reference)?.norm() / denom)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn unit_rows(mut m: DenseMatrix) -> DenseMatrix {
    for r in 0..m.rows() {
        let n = crate::tensor::norm(m.row(r));
        if n > 0.0 {
            m.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
    }
    m
}

/// Which parameters a Hessian is taken over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianScope {
    /// LoRA factors `A`, `B` of every layer.
    Lora,
    /// Effective weight matrices.
    Effective,
}

/// Mean clean cross-entropy of a fixed batch as a function of model parameters.
pub struct ModelObjective<'a> {
    model: &'a EncoderModel,
    batch: &'a Batch,
    scope: HessianScope,
}

impl<'a> ModelObjective<'a> {
    pub fn new(model: &'a EncoderModel, batch: &'a Batch, scope: HessianScope) -> Self {
        Self {
            model,
            batch,
            scope,
        }
    }

    /// Current parameters in this objective's layout.
    pub fn params(&self) -> ParamVector {
        match self.scope {
            HessianScope::Lora => self.model.lora_params(),
            HessianScope::Effective => self.model.effective_params(),
        }
    }

    fn eval(&self, params: &ParamVector, want_grad: bool) -> Result<(f64, Option<ParamVector>)> {
        let mut model = self.model.clone();
        let weights = match self.scope {
            HessianScope::Lora => {
                model.set_lora_params(params)?;
                WeightMode::Lora { trainable: true }
            }
            HessianScope::Effective => {
                for layer in &mut model.layers {
                    let name = format!("{}.W", layer.name);
                    let w = params
                        .matrix(&name)
                        .ok_or_else(|| Error::Input(format!("missing parameter block {name}")))?;
                    // Fold the effective weight into W0 with zeroed factors.
                    layer.w0 = w;
                    layer.b = DenseMatrix::zeros(layer.b.rows(), layer.b.cols());
                }
                WeightMode::Effective
            }
        };
        let mut g = Graph::new();
        let bound = model.bind(
            &mut g,
            BindOptions {
                weights,
                awp: AwpMode::Off,
            },
        )?;
        let x = g.constant(self.batch.inputs.clone());
        let f = model.encode_node(&mut g, &bound, x, false)?;
        let logits = model.logits_node(&mut g, &bound, f)?;
        let loss = g.softmax_cross_entropy(logits, &self.batch.labels)?;
        let value = g.value(loss).item()?;
        if !want_grad {
            return Ok((value, None));
        }
        g.backward(loss)?;
        let mut grad = Vec::with_capacity(params.len());
        for bl in &bound.layers {
            match self.scope {
                HessianScope::Lora => {
                    grad.extend_from_slice(g.grad(bl.a.expect("lora binding")).data());
                    grad.extend_from_slice(g.grad(bl.b.expect("lora binding")).data());
                }
                HessianScope::Effective => grad.extend_from_slice(g.grad(bl.w).data()),
            }
        }
        Ok((value, Some(params.with_values(grad)?)))
    }
}

impl Objective for ModelObjective<'_> {
    fn value(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.eval(params, false)?.0)
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        let (v, g) = self.eval(params, true)?;
        Ok((v, g.expect("gradient requested")))
    }
}
