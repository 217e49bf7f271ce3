//! The robust fine-tuning loop and its two baselines.
//!
//! A `grace` step generates a PGD batch under the current weights, runs the
//! low-rank weight-perturbation ascent on it, and then takes one SGD step on
//! the LoRA factors against
//! `task + lambda_lar * perturbed_adv_loss + lambda_gv * gram_volume`.
//! `vanilla_ft` minimizes clean cross-entropy only; `at` minimizes
//! cross-entropy on the PGD batch only.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackConfig, ModelLoss};
use crate::autodiff::{Graph, NodeId};
use crate::awp::{
    ascend_on_graph, assign_radii, awp_ascend, curvature_proxy, AscentConfig, AwpConfig,
    CurvatureState,
};
use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_bundle, Batch, Bundle};
use crate::diagnostics::{centroid_alignment, class_stats, curvature_summary, CurvatureSummary};
use crate::error::{Error, Result};
use crate::gram::{gram_volume_node, GramConfig};
use crate::model::{
    argmax, relative_param_distance, AwpMode, BindOptions, EncoderModel, WeightMode,
};
use crate::rng::{permutation, rng_for, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Grace,
    VanillaFt,
    At,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Grace => "grace",
            Mode::VanillaFt => "vanilla_ft",
            Mode::At => "at",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda_lar: f64,
    pub lambda_gv: f64,
    pub gram_jitter: f64,
    pub attack: AttackConfig,
    /// Generate the PGD batch under `W + B_awp A_awp` instead of `W`.
    pub attack_under_awp: bool,
    pub awp: AwpConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Grace,
            lambda_lar: 1.0,
            lambda_gv: 0.1,
            gram_jitter: 1e-4,
            attack: AttackConfig::default(),
            attack_under_awp: false,
            awp: AwpConfig::default(),
            lr: 0.5,
            epochs: 30,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda_lar", self.lambda_lar),
            ("lambda_gv", self.lambda_gv),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config {
                    key: key.into(),
                    reason: format!("must be finite and >= 0, got {v}"),
                });
            }
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config {
                key: "lr".into(),
                reason: format!("must be finite and > 0, got {}", self.lr),
            });
        }
        if self.epochs == 0 {
            return Err(Error::Config {
                key: "epochs".into(),
                reason: "must be >= 1".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config {
                key: "batch_size".into(),
                reason: "must be >= 1".into(),
            });
        }
        GramConfig::new(self.gram_jitter)?;
        self.attack.validate()?;
        self.awp.validate()
    }

    pub fn gram(&self) -> GramConfig {
        GramConfig {
            jitter: self.gram_jitter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub mode: Mode,
    pub task: f64,
    pub lar_awp: f64,
    pub gv: f64,
    pub total: f64,
    /// Clean accuracy of the pre-update model on the minibatch.
    pub accuracy: f64,
    pub ranks: Vec<usize>,
    /// Curvature EMA, present on steps where the curriculum was updated.
    pub curvature: Option<Vec<f64>>,
    pub grad_norm: f64,
    pub awp_entry: Option<f64>,
    pub awp_exit: Option<f64>,
    /// Excluded from the metrics log so that logs stay bit-identical across reruns.
    #[serde(skip)]
    pub wall_ms: f64,
}

pub struct Trainer {
    pub model: EncoderModel,
    pub config: TrainConfig,
    pub curvature: CurvatureState,
    step: usize,
    attack_rng: SeededRng,
    awp_rng: SeededRng,
    proxy_rng: SeededRng,
}

impl Trainer {
    pub fn new(model: EncoderModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let curvature = CurvatureState::new(model.layers.len(), &config.awp);
        let seed = config.seed;
        Ok(Self {
            model,
            curvature,
            step: 0,
            attack_rng: rng_for(seed, "train/attack"),
            awp_rng: rng_for(seed, "train/awp"),
            proxy_rng: rng_for(seed, "train/curvature"),
            config,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Refreshes the curvature EMA from a random sample of `pool` and
    /// reassigns every branch's active rank.
    pub fn update_curriculum(&mut self, pool: &Batch) -> Result<()> {
        let n = self.config.awp.proxy_batch.min(pool.len());
        let idx: Vec<usize> = permutation(&mut self.proxy_rng, pool.len())
            .into_iter()
            .take(n)
            .collect();
        let fresh = curvature_proxy(&self.model, &pool.select(&idx))?;
        let ranks = self.curvature.update(&fresh)?.to_vec();
        for (layer, r) in self.model.layers.iter_mut().zip(ranks) {
            layer.awp.set_active_rank(r);
        }
        Ok(())
    }

    fn adversarial(&mut self, batch: &Batch) -> Result<Batch> {
        let cfg = self.config.attack.clone();
        let x_adv = if self.config.attack_under_awp {
            let mut probe = self.model.clone();
            probe.zero_awp();
            assign_radii(&mut probe, self.config.awp.rho_rel);
            awp_ascend(
                &mut probe,
                batch,
                &AscentConfig::from(&self.config.awp),
                &mut self.awp_rng,
            )?;
            let loss = ModelLoss {
                model: &probe,
                perturbed: true,
            };
            pgd(
                &loss,
                &batch.inputs,
                &batch.labels,
                &cfg,
                &mut self.attack_rng,
            )?
        } else {
            let loss = ModelLoss::clean(&self.model);
            pgd(
                &loss,
                &batch.inputs,
                &batch.labels,
                &cfg,
                &mut self.attack_rng,
            )?
        };
        Batch::new(x_adv, batch.labels.clone())
    }

    /// One minibatch update. `pool` feeds the periodic curvature proxy.
    pub fn train_step(&mut self, batch: &Batch, pool: &Batch, epoch: usize) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::Input("empty training batch".into()));
        }
        let started = Instant::now();
        let mode = self.config.mode;
        let mut curvature = None;
        if mode == Mode::Grace && self.curvature.is_due(self.step) {
            self.update_curriculum(pool)?;
            curvature = Some(self.curvature.ema.clone());
        }
        let adv = match mode {
            Mode::VanillaFt => None,
            Mode::Grace | Mode::At => Some(self.adversarial(batch)?),
        };

        let mut g = Graph::new();
        let bound = self.model.bind(
            &mut g,
            BindOptions {
                weights: WeightMode::Lora { trainable: true },
                awp: if mode == Mode::Grace {
                    AwpMode::Trainable
                } else {
                    AwpMode::Off
                },
            },
        )?;
        let x = g.constant(batch.inputs.clone());
        let f_id = self.model.encode_node(&mut g, &bound, x, false)?;
        let logits_id = self.model.logits_node(&mut g, &bound, f_id)?;
        let train_acc = batch_accuracy(g.value(logits_id), &batch.labels);

        let mut awp_entry = None;
        let mut awp_exit = None;
        let (task, lar, gv, total): (NodeId, Option<NodeId>, Option<NodeId>, NodeId) = match mode {
            Mode::VanillaFt => {
                let task = g.softmax_cross_entropy(logits_id, &batch.labels)?;
                (task, None, None, task)
            }
            Mode::At => {
                let adv = adv.as_ref().expect("adversarial batch");
                let xa = g.constant(adv.inputs.clone());
                let f_adv = self.model.encode_node(&mut g, &bound, xa, false)?;
                let logits = self.model.logits_node(&mut g, &bound, f_adv)?;
                let task = g.softmax_cross_entropy(logits, &batch.labels)?;
                (task, None, None, task)
            }
            Mode::Grace => {
                let adv = adv.as_ref().expect("adversarial batch");
                let task = g.softmax_cross_entropy(logits_id, &batch.labels)?;
                let xa = g.constant(adv.inputs.clone());
                let f_adv = self.model.encode_node(&mut g, &bound, xa, false)?;
                let f_awp = self.model.encode_node(&mut g, &bound, x, true)?;
                let f_adv_pert = self.model.encode_node(&mut g, &bound, xa, true)?;
                let logits_pert = self.model.logits_node(&mut g, &bound, f_adv_pert)?;
                let lar = g.softmax_cross_entropy(logits_pert, &batch.labels)?;
                let gv = gram_volume_node(&mut g, f_id, f_adv, f_awp, &self.config.gram())?;
                let lar_term = g.scale(lar, self.config.lambda_lar)?;
                let gv_term = g.scale(gv, self.config.lambda_gv)?;
                let partial = g.add(task, lar_term)?;
                let total = g.add(partial, gv_term)?;

                self.model.zero_awp();
                assign_radii(&mut self.model, self.config.awp.rho_rel);
                let report = ascend_on_graph(
                    &mut g,
                    &mut self.model,
                    &bound,
                    lar,
                    &AscentConfig::from(&self.config.awp),
                    &mut self.awp_rng,
                )?;
                awp_entry = Some(report.loss_entry);
                awp_exit = Some(report.loss_exit);
                (task, Some(lar), Some(gv), total)
            }
        };

        let total_value = g.forward(total)?.item()?;
        if !total_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite total loss {total_value}"
            )));
        }
        g.backward(total)?;

        let mut grad_sq = 0.0;
        let lr = self.config.lr;
        let mut updates = Vec::with_capacity(bound.layers.len());
        for bl in &bound.layers {
            let ga = g.grad(bl.a.expect("lora binding")).clone();
            let gb = g.grad(bl.b.expect("lora binding")).clone();
            grad_sq += ga.frobenius_sq() + gb.frobenius_sq();
            updates.push((ga, gb));
        }
        if !grad_sq.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        for (layer, (ga, gb)) in self.model.layers.iter_mut().zip(&updates) {
            layer.a.axpy(-lr, ga)?;
            layer.b.axpy(-lr, gb)?;
        }
        self.model.zero_awp();

        let metrics = StepMetrics {
            step: self.step,
            epoch,
            mode,
            task: g.value(task).item()?,
            lar_awp: match lar {
                Some(n) => g.value(n).item()?,
                None => 0.0,
            },
            gv: match gv {
                Some(n) => g.value(n).item()?,
                None => 0.0,
            },
            total: total_value,
            accuracy: train_acc,
            ranks: self
                .model
                .layers
                .iter()
                .map(|l| l.awp.active_rank)
                .collect(),
            curvature,
            grad_norm: grad_sq.sqrt(),
            awp_entry,
            awp_exit,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        Ok(metrics)
    }
}

fn batch_accuracy(logits: &crate::tensor::DenseMatrix, labels: &[usize]) -> f64 {
    let correct = (0..logits.rows())
        .filter(|&r| argmax(logits.row(r)) == labels[r])
        .count();
    correct as f64 / labels.len().max(1) as f64
}

/// Argmax accuracy on `batch`, optionally after a PGD attack on every sample.
pub fn evaluate(
    model: &EncoderModel,
    batch: &Batch,
    attack: Option<&AttackConfig>,
    rng: &mut impl rand::Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let inputs = match attack {
        Some(cfg) => pgd(
            &ModelLoss::clean(model),
            &batch.inputs,
            &batch.labels,
            cfg,
            rng,
        )?,
        None => batch.inputs.clone(),
    };
    let preds = model.predict(&inputs)?;
    let correct = preds
        .iter()
        .zip(&batch.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// `3 / (1/id + 1/ood + 1/adv)`.
pub fn harmonic_mean(id: f64, ood: f64, adv: f64) -> Result<f64> {
    if !(id > 0.0 && ood > 0.0 && adv > 0.0) {
        return Err(Error::Input(format!(
            "harmonic mean needs positive inputs, got ({id}, {ood}, {adv})"
        )));
    }
    Ok(3.0 / (1.0 / id + 1.0 / ood + 1.0 / adv))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain: String,
    pub clean: f64,
    pub adversarial: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub domains: Vec<DomainAccuracy>,
    /// Percent-scale harmonic mean of ID clean, OOD clean and ID adversarial
    /// accuracy; absent when one of them is zero.
    pub harmonic_mean: Option<f64>,
}

impl EvalTable {
    pub fn get(&self, domain: &str) -> Option<&DomainAccuracy> {
        self.domains.iter().find(|d| d.domain == domain)
    }
}

/// Clean and PGD accuracy on every evaluation domain of `bundle`.
pub fn evaluate_bundle(
    model: &EncoderModel,
    bundle: &Bundle,
    attack: &AttackConfig,
    seed: u64,
) -> Result<EvalTable> {
    let mut domains = Vec::new();
    for d in bundle.eval_domains() {
        let mut rng = rng_for(seed, &format!("eval/{}", d.tag));
        domains.push(DomainAccuracy {
            domain: d.tag.to_string(),
            clean: evaluate(model, &d.batch, None, &mut rng)?,
            adversarial: evaluate(model, &d.batch, Some(attack), &mut rng)?,
        });
    }
    let id = &domains[0];
    let ood = &domains[1];
    let hm = harmonic_mean(100.0 * id.clean, 100.0 * ood.clean, 100.0 * id.adversarial).ok();
    Ok(EvalTable {
        domains,
        harmonic_mean: hm,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub steps: usize,
    pub eval: EvalTable,
    pub relative_param_distance: f64,
    pub curvature: CurvatureSummary,
    /// Mean per-class cosine between clean and PGD feature centroids on ID test data.
    pub id_adv_alignment: f64,
    pub final_ranks: Vec<usize>,
    pub frozen_checksum: String,
    pub final_task_loss: f64,
}

pub struct RunArtifacts {
    pub model: EncoderModel,
    pub metrics: Vec<StepMetrics>,
    pub summary: RunSummary,
    pub dir: Option<PathBuf>,
}

/// File names inside a run directory.
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "final.grk";
pub const ABORT_DUMP_FILE: &str = "abort_last_good.grk";

/// Trains from scratch on the configured bundle and evaluates the result.
/// With `out_dir`, writes the resolved config, metrics log, summary and checkpoint.
pub fn run(config: &RunConfig, out_dir: Option<&Path>) -> Result<RunArtifacts> {
    config.validate()?;
    let bundle = generate_bundle(&config.data)?;
    run_on_bundle(config, &bundle, out_dir)
}

pub fn run_on_bundle(
    config: &RunConfig,
    bundle: &Bundle,
    out_dir: Option<&Path>,
) -> Result<RunArtifacts> {
    config.validate()?;
    let tc = &config.train;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(CONFIG_FILE);
        std::fs::write(&p, config.to_text()).map_err(|e| Error::io(&p, e))?;
    }
    let model = EncoderModel::init(&config.model, tc.seed)?;
    let base = model.base_params();
    let checksum = model.frozen_checksum();
    let mut trainer = Trainer::new(model, tc.clone())?;
    let train = &bundle.train.batch;
    let mut shuffle = rng_for(tc.seed, "train/shuffle");
    let mut log = match out_dir {
        Some(dir) => {
            let p = dir.join(METRICS_FILE);
            let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            Some((p, std::io::BufWriter::new(f)))
        }
        None => None,
    };
    let mut metrics = Vec::new();
    for epoch in 0..tc.epochs {
        let order = permutation(&mut shuffle, train.len());
        for chunk in order.chunks(tc.batch_size) {
            let batch = train.select(chunk);
            let last_good = trainer.model.clone();
            let m = match trainer.train_step(&batch, train, epoch) {
                Ok(m) => m,
                Err(Error::Numeric(reason)) => {
                    let dump = match out_dir {
                        Some(dir) => {
                            let p = dir.join(ABORT_DUMP_FILE);
                            save_checkpoint(&last_good, &p)?;
                            Some(p)
                        }
                        None => None,
                    };
                    return Err(Error::NumericAbort {
                        step: trainer.steps_taken(),
                        reason,
                        dump,
                    });
                }
                Err(e) => return Err(e),
            };
            if let Some((p, w)) = log.as_mut() {
                let line = serde_json::to_string(&m).expect("metrics serialize");
                writeln!(w, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
            }
            metrics.push(m);
        }
    }
    if let Some((p, mut w)) = log {
        w.flush().map_err(|e| Error::io(&p, e))?;
    }

    let model = trainer.model;
    if model.frozen_checksum() != checksum {
        return Err(Error::Contract(
            "frozen base weights changed during training".into(),
        ));
    }
    let eval = evaluate_bundle(&model, bundle, &tc.attack, tc.seed)?;
    let id = &bundle.id_test.batch;
    let mut adv_rng = rng_for(tc.seed, "summary/attack");
    let x_adv = pgd(
        &ModelLoss::clean(&model),
        &id.inputs,
        &id.labels,
        &tc.attack,
        &mut adv_rng,
    )?;
    let k = model.num_classes();
    let s_id = class_stats(&model.encode(&id.inputs)?, &id.labels, k)?;
    let s_adv = class_stats(&model.encode(&x_adv)?, &id.labels, k)?;
    let alignment = centroid_alignment(&s_id, &s_adv)?.mean;
    let curvature = curvature_summary(&model, id, &config.diag, tc.seed)?;
    let summary = RunSummary {
        mode: tc.mode,
        seed: tc.seed,
        steps: metrics.len(),
        eval,
        relative_param_distance: relative_param_distance(&model, &base)?,
        curvature,
        id_adv_alignment: alignment,
        final_ranks: trainer.curvature.ranks.clone(),
        frozen_checksum: format!("{checksum:016x}"),
        final_task_loss: metrics.last().map(|m| m.task).unwrap_or(f64::NAN),
    };
    if let Some(dir) = out_dir {
        let p = dir.join(SUMMARY_FILE);
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        save_checkpoint(&model, &dir.join(CHECKPOINT_FILE))?;
    }
    Ok(RunArtifacts {
        model,
        metrics,
        summary,
        dir: out_dir.map(Path::to_path_buf),
    })
}
