//! Finite-difference gradient cases shared by the gradient suite and the
//! acceptance target.

use grace_core::autodiff::{Graph, NodeId};
use grace_core::gram::{gram_volume_node, GramConfig};
use grace_core::model::{AwpMode, BindOptions, EncoderModel, ModelConfig, WeightMode};
use grace_core::rng::{normal_matrix, rng_for, SeededRng};
use grace_core::DenseMatrix;
use rand::Rng;

pub const POINTS: usize = 20;
pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|)` over the concatenated gradient of every leaf.
fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares backward() on `root` with central differences over `leaves`.
fn check_graph(g: &mut Graph, leaves: &[NodeId], root: NodeId) -> f64 {
    g.forward(root).unwrap();
    g.backward(root).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &leaf in leaves {
        analytic.extend_from_slice(g.grad(leaf).data());
        let base = g.value(leaf).clone();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[i] += STEP;
            g.set_value(leaf, plus).unwrap();
            let lp = g.forward(root).unwrap().item().unwrap();
            let mut minus = base.clone();
            minus.data_mut()[i] -= STEP;
            g.set_value(leaf, minus).unwrap();
            let lm = g.forward(root).unwrap().item().unwrap();
            numeric.push((lp - lm) / (2.0 * STEP));
        }
        g.set_value(leaf, base).unwrap();
    }
    rel_error(&analytic, &numeric)
}

/// Reduces a matrix node to a scalar through a random weighting, so every
/// output entry contributes a distinct cotangent.
fn weighted_sum(g: &mut Graph, x: NodeId, rng: &mut SeededRng) -> NodeId {
    let (r, c) = g.value(x).shape();
    let w = g.constant(normal_matrix(rng, r, c, 1.0));
    let m = g.mul(x, w).unwrap();
    g.sum(m).unwrap()
}

fn away_from_zero(rng: &mut SeededRng, r: usize, c: usize) -> DenseMatrix {
    normal_matrix(rng, r, c, 1.0).map(|v| {
        if v.abs() < 1e-2 {
            v + 0.1f64.copysign(v)
        } else {
            v
        }
    })
}

pub type Build = fn(&mut Graph, &mut SeededRng) -> (Vec<NodeId>, NodeId);

/// Runs `build` at `POINTS` seeded points and returns the worst error.
pub fn sweep(name: &str, build: Build) -> f64 {
    let mut worst: f64 = 0.0;
    for p in 0..POINTS {
        let mut rng = rng_for(p as u64, name);
        let mut g = Graph::new();
        let (leaves, root) = build(&mut g, &mut rng);
        worst = worst.max(check_graph(&mut g, &leaves, root));
    }
    worst
}

fn matmul(g: &mut Graph, rng: &mut SeededRng) -> (Vec<NodeId>, NodeId) {
    let a = g.param(normal_matrix(rng, 3, 4, 1.0));
    let b = g.param(normal_matrix(rng, 4, 2, 1.0));
    let y = g.matmul(a, b).unwrap();
    (vec![a, b], weighted_sum(g, y, rng))
}

fn transpose(g: &mut Graph, rng: &mut SeededRng) -> (Vec<NodeId>, NodeId) {
    let a = g.param(normal_matrix(rng, 3, 4, 1.0));
    let y = g.transpose(a).unwrap();
    (vec![a], weighted_sum(g, y, rng))
}

fn add_and_scale(g: &mut Graph, rng: &mut SeededRng) -> (Vec<NodeId>, NodeId) {
    let a = g.param(normal_matrix(rng, 3, 4, 1.0));
    let b = g.param(normal_matrix(rng, 3, 4, 1.0));
    let s: f64 = rng.random_range(-3.0..3.0);
    let sb = g.scale(b, s).unwrap();
    let y = g.add(a, sb).unwrap();
    (vec![a, b], weighted_sum(g, y, rng))
}

fn relu(g: &mut Graph, rng: &mut SeededRng) -> (Vec<NodeId>, NodeId) {
    let a = g.param(away_from_zero(rng, 4, 5));
    let y = g.relu(a).unwrap();
    (vec![a], weighted_sum(g, y, rng))
}

fn softmax_cross_entropy(g: &mut Graph, rng: &mut SeededRng) -> (Vec<NodeId>, NodeId) {
    let a = g.param(normal_matrix(rng, 5, 4, 2.0));
    let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
    let y = g.softmax_cross_entropy(a, &labels).unwrap();
    (vec![a], y)
}

fn l2_normalize(g: &mut Graph, rng: &mut SeededRng) -> (Vec<NodeId>, NodeId) {
    let a = g.param(normal_matrix(rng, 4, 5, 1.0));
    let y = g.l2_normalize(a).unwrap();
    (vec![a], weighted_sum(g, y, rng))
}

fn mul(g: &mut Graph, rng: &mut SeededRng) -> (Vec<NodeId>, NodeId) {
    let a = g.param(normal_matrix(rng, 3, 4, 1.0));
    let b = g.param(normal_matrix(rng, 3, 4, 1.0));
    let y = g.mul(a, b).unwrap();
    (vec![a, b], weighted_sum(g, y, rng))
}

fn sum_and_mean(g: &mut Graph, rng: &mut SeededRng) -> (Vec<NodeId>, NodeId) {
    let a = g.param(normal_matrix(rng, 3, 4, 1.0));
    let b = g.param(normal_matrix(rng, 2, 5, 1.0));
    let sa = weighted_sum(g, a, rng);
    let sq = g.mul(b, b).unwrap();
    let mb = g.mean(sq).unwrap();
    let y = g.add(sa, mb).unwrap();
    (vec![a, b], y)
}

fn row_sum(g: &mut Graph, rng: &mut SeededRng) -> (Vec<NodeId>, NodeId) {
    let a = g.param(normal_matrix(rng, 4, 5, 1.0));
    let y = g.row_sum(a).unwrap();
    (vec![a], weighted_sum(g, y, rng))
}

fn concat_cols(g: &mut Graph, rng: &mut SeededRng) -> (Vec<NodeId>, NodeId) {
    let a = g.param(normal_matrix(rng, 3, 2, 1.0));
    let b = g.param(normal_matrix(rng, 3, 3, 1.0));
    let c = g.param(normal_matrix(rng, 3, 1, 1.0));
    let y = g.concat_cols(&[a, b, c]).unwrap();
    (vec![a, b, c], weighted_sum(g, y, rng))
}

fn sqrt_abs_det3(g: &mut Graph, rng: &mut SeededRng) -> (Vec<NodeId>, NodeId) {
    // Rows with |det| bounded away from the floor.
    let mut m = normal_matrix(rng, 4, 9, 1.0);
    for r in 0..4 {
        while grace_core::tensor::det3(m.row(r)).abs() < 0.05 {
            let fresh = normal_matrix(rng, 1, 9, 1.0);
            m.row_mut(r).copy_from_slice(fresh.row(0));
        }
    }
    let a = g.param(m);
    let y = g.sqrt_abs_det3(a).unwrap();
    (vec![a], weighted_sum(g, y, rng))
}

fn gram_volume(g: &mut Graph, rng: &mut SeededRng) -> (Vec<NodeId>, NodeId) {
    let raw: Vec<NodeId> = (0..3)
        .map(|_| g.param(normal_matrix(rng, 5, 4, 1.0)))
        .collect();
    let unit: Vec<NodeId> = raw.iter().map(|&r| g.l2_normalize(r).unwrap()).collect();
    let y = gram_volume_node(g, unit[0], unit[1], unit[2], &GramConfig::default()).unwrap();
    (raw, y)
}

fn small_model(seed: u64) -> EncoderModel {
    let cfg = ModelConfig {
        input_dim: 6,
        hidden: vec![5],
        feature_dim: 4,
        num_classes: 3,
        lora_rank: 2,
        lora_alpha: 2.0,
        awp_max_rank: 2,
        logit_scale: 4.0,
        sensitive_inputs: 0,
        sensitive_gain: 1.0,
    };
    let mut model = EncoderModel::init(&cfg, seed).unwrap();
    let mut rng = rng_for(seed, "gradcheck/model");
    for layer in &mut model.layers {
        layer.b = normal_matrix(&mut rng, layer.b.rows(), layer.b.cols(), 0.3);
        layer.awp.a = normal_matrix(&mut rng, layer.awp.a.rows(), layer.awp.a.cols(), 0.1);
        layer.awp.b = normal_matrix(&mut rng, layer.awp.b.rows(), layer.awp.b.cols(), 0.1);
    }
    model
}

/// Worst error of the combined task + LAR + Gram-volume loss with respect to
/// every LoRA factor, the branch held constant.
pub fn combined_loss() -> f64 {
    let mut worst: f64 = 0.0;
    for p in 0..POINTS {
        let model = small_model(p as u64);
        let mut rng = rng_for(p as u64, "gradcheck/batch");
        let x = normal_matrix(&mut rng, 6, 6, 1.0);
        let delta = normal_matrix(&mut rng, 6, 6, 0.05);
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();

        let mut g = Graph::new();
        let bound = model
            .bind(
                &mut g,
                BindOptions {
                    weights: WeightMode::Lora { trainable: true },
                    awp: AwpMode::Constant,
                },
            )
            .unwrap();
        let xn = g.constant(x.clone());
        let xa = g.constant(x.add(&delta).unwrap());
        let f_id = model.encode_node(&mut g, &bound, xn, false).unwrap();
        let logits = model.logits_node(&mut g, &bound, f_id).unwrap();
        let task = g.softmax_cross_entropy(logits, &labels).unwrap();
        let f_adv = model.encode_node(&mut g, &bound, xa, false).unwrap();
        let f_awp = model.encode_node(&mut g, &bound, xn, true).unwrap();
        let f_adv_pert = model.encode_node(&mut g, &bound, xa, true).unwrap();
        let lp = model.logits_node(&mut g, &bound, f_adv_pert).unwrap();
        let lar = g.softmax_cross_entropy(lp, &labels).unwrap();
        let gv = gram_volume_node(&mut g, f_id, f_adv, f_awp, &GramConfig::default()).unwrap();
        let lar_t = g.scale(lar, 1.0).unwrap();
        let gv_t = g.scale(gv, 0.1).unwrap();
        let s = g.add(task, lar_t).unwrap();
        let total = g.add(s, gv_t).unwrap();

        let leaves: Vec<NodeId> = bound
            .layers
            .iter()
            .flat_map(|l| [l.a.unwrap(), l.b.unwrap()])
            .collect();
        worst = worst.max(check_graph(&mut g, &leaves, total));
    }
    worst
}

/// Every primitive with its sweep label.
pub const CASES: &[(&str, Build)] = &[
    ("matmul", matmul),
    ("transpose", transpose),
    ("add-scale", add_and_scale),
    ("relu", relu),
    ("softmax-ce", softmax_cross_entropy),
    ("l2-normalize", l2_normalize),
    ("mul", mul),
    ("sum-mean", sum_and_mean),
    ("row-sum", row_sum),
    ("concat", concat_cols),
    ("sqrt-abs-det3", sqrt_abs_det3),
    ("gram-volume", gram_volume),
];
