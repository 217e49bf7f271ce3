//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a fixed
//! type; unknown keys and unparsable values are rejected with the key name.
//! [`RunConfig::to_text`] writes every key, so the output of a resolved merge
//! reproduces the run on its own.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::diagnostics::{DiagConfig, DistanceMetric, ProbeKind};
use crate::error::{Error, Result};
use crate::model::{HessianScope, ModelConfig};
use crate::trainer::{Mode, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub diag: DiagConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::Config {
        key: key.to_string(),
        reason: format!("cannot parse `{value}`: {e}"),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_float(key: &str, value: &str) -> Result<f64> {
    match value {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => parse(key, value),
    }
}

impl RunConfig {
    /// Every accepted key, in output order.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "mode",
        "data_seed",
        "num_classes",
        "input_dim",
        "n_per_class",
        "sigma_id",
        "ood_angle_deg",
        "ood_cov_scale",
        "shift_df",
        "mask_frac",
        "silent_dims",
        "hidden",
        "feature_dim",
        "lora_rank",
        "lora_alpha",
        "logit_scale",
        "sensitive_gain",
        "lr",
        "epochs",
        "batch_size",
        "lambda_lar",
        "lambda_gv",
        "gram_jitter",
        "attack_epsilon",
        "attack_step",
        "attack_iters",
        "attack_clip_min",
        "attack_clip_max",
        "attack_random_start",
        "attack_under_awp",
        "awp_beta",
        "awp_percentile",
        "awp_update_period",
        "awp_r_max",
        "awp_rho_rel",
        "awp_inner_steps",
        "awp_lr_rel",
        "awp_init_rel",
        "awp_proxy_batch",
        "diag_probes",
        "diag_power_iters",
        "diag_probe_kind",
        "diag_batch",
        "diag_scope",
        "lid_k",
        "lid_metric",
        "lipschitz",
        "prior_sigma",
        "confidence_delta",
        "slice_grid",
        "slice_extent",
    ];

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                reason: format!("line {} is not `key = value`", lineno + 1),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.data;
        let m = &mut self.model;
        let t = &mut self.train;
        let g = &mut self.diag;
        match key {
            "seed" => t.seed = parse(key, value)?,
            "mode" => t.mode = parse(key, value)?,
            "data_seed" => d.seed = parse(key, value)?,
            "num_classes" => {
                d.num_classes = parse(key, value)?;
                m.num_classes = d.num_classes;
            }
            "input_dim" => {
                d.input_dim = parse(key, value)?;
                m.input_dim = d.input_dim;
            }
            "n_per_class" => d.n_per_class = parse(key, value)?,
            "sigma_id" => d.sigma_id = parse_float(key, value)?,
            "ood_angle_deg" => d.ood_angle_deg = parse_float(key, value)?,
            "ood_cov_scale" => d.ood_cov_scale = parse_float(key, value)?,
            "shift_df" => d.shift_df = parse_float(key, value)?,
            "mask_frac" => d.mask_frac = parse_float(key, value)?,
            "silent_dims" => {
                d.silent_dims = parse(key, value)?;
                m.sensitive_inputs = d.silent_dims;
            }
            "hidden" => m.hidden = parse_list(key, value)?,
            "feature_dim" => m.feature_dim = parse(key, value)?,
            "lora_rank" => m.lora_rank = parse(key, value)?,
            "lora_alpha" => m.lora_alpha = parse_float(key, value)?,
            "logit_scale" => m.logit_scale = parse_float(key, value)?,
            "sensitive_gain" => m.sensitive_gain = parse_float(key, value)?,
            "lr" => t.lr = parse_float(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lambda_lar" => t.lambda_lar = parse_float(key, value)?,
            "lambda_gv" => t.lambda_gv = parse_float(key, value)?,
            "gram_jitter" => t.gram_jitter = parse_float(key, value)?,
            "attack_epsilon" => t.attack.epsilon = parse_float(key, value)?,
            "attack_step" => t.attack.step = parse_float(key, value)?,
            "attack_iters" => t.attack.iters = parse(key, value)?,
            "attack_clip_min" => t.attack.clip_min = parse_float(key, value)?,
            "attack_clip_max" => t.attack.clip_max = parse_float(key, value)?,
            "attack_random_start" => t.attack.random_start = parse(key, value)?,
            "attack_under_awp" => t.attack_under_awp = parse(key, value)?,
            "awp_beta" => t.awp.beta = parse_float(key, value)?,
            "awp_percentile" => t.awp.percentile = parse_float(key, value)?,
            "awp_update_period" => t.awp.update_period = parse(key, value)?,
            "awp_r_max" => {
                t.awp.r_max = parse(key, value)?;
                m.awp_max_rank = t.awp.r_max;
            }
            "awp_rho_rel" => t.awp.rho_rel = parse_float(key, value)?,
            "awp_inner_steps" => t.awp.inner_steps = parse(key, value)?,
            "awp_lr_rel" => t.awp.lr_rel = parse_float(key, value)?,
            "awp_init_rel" => t.awp.init_rel = parse_float(key, value)?,
            "awp_proxy_batch" => t.awp.proxy_batch = parse(key, value)?,
            "diag_probes" => g.probes = parse(key, value)?,
            "diag_power_iters" => g.power_iters = parse(key, value)?,
            "diag_probe_kind" => g.probe_kind = parse(key, value)?,
            "diag_batch" => g.batch = parse(key, value)?,
            "diag_scope" => g.scope = parse_scope(key, value)?,
            "lid_k" => g.lid_k = parse(key, value)?,
            "lid_metric" => g.lid_metric = parse(key, value)?,
            "lipschitz" => g.lipschitz = parse_float(key, value)?,
            "prior_sigma" => g.prior_sigma = parse_float(key, value)?,
            "confidence_delta" => g.confidence_delta = parse_float(key, value)?,
            "slice_grid" => g.slice_grid = parse(key, value)?,
            "slice_extent" => g.slice_extent = parse_float(key, value)?,
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    reason: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let g = &self.diag;
        match key {
            "seed" => t.seed.to_string(),
            "mode" => t.mode.to_string(),
            "data_seed" => d.seed.to_string(),
            "num_classes" => d.num_classes.to_string(),
            "input_dim" => d.input_dim.to_string(),
            "n_per_class" => d.n_per_class.to_string(),
            "sigma_id" => fmt_f(d.sigma_id),
            "ood_angle_deg" => fmt_f(d.ood_angle_deg),
            "ood_cov_scale" => fmt_f(d.ood_cov_scale),
            "shift_df" => fmt_f(d.shift_df),
            "mask_frac" => fmt_f(d.mask_frac),
            "silent_dims" => d.silent_dims.to_string(),
            "hidden" => m
                .hidden
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "feature_dim" => m.feature_dim.to_string(),
            "lora_rank" => m.lora_rank.to_string(),
            "lora_alpha" => fmt_f(m.lora_alpha),
            "logit_scale" => fmt_f(m.logit_scale),
            "sensitive_gain" => fmt_f(m.sensitive_gain),
            "lr" => fmt_f(t.lr),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lambda_lar" => fmt_f(t.lambda_lar),
            "lambda_gv" => fmt_f(t.lambda_gv),
            "gram_jitter" => fmt_f(t.gram_jitter),
            "attack_epsilon" => fmt_f(t.attack.epsilon),
            "attack_step" => fmt_f(t.attack.step),
            "attack_iters" => t.attack.iters.to_string(),
            "attack_clip_min" => fmt_f(t.attack.clip_min),
            "attack_clip_max" => fmt_f(t.attack.clip_max),
            "attack_random_start" => t.attack.random_start.to_string(),
            "attack_under_awp" => t.attack_under_awp.to_string(),
            "awp_beta" => fmt_f(t.awp.beta),
            "awp_percentile" => fmt_f(t.awp.percentile),
            "awp_update_period" => t.awp.update_period.to_string(),
            "awp_r_max" => t.awp.r_max.to_string(),
            "awp_rho_rel" => fmt_f(t.awp.rho_rel),
            "awp_inner_steps" => t.awp.inner_steps.to_string(),
            "awp_lr_rel" => fmt_f(t.awp.lr_rel),
            "awp_init_rel" => fmt_f(t.awp.init_rel),
            "awp_proxy_batch" => t.awp.proxy_batch.to_string(),
            "diag_probes" => g.probes.to_string(),
            "diag_power_iters" => g.power_iters.to_string(),
            "diag_probe_kind" => g.probe_kind.to_string(),
            "diag_batch" => g.batch.to_string(),
            "diag_scope" => match g.scope {
                HessianScope::Lora => "lora".into(),
                HessianScope::Effective => "effective".into(),
            },
            "lid_k" => g.lid_k.to_string(),
            "lid_metric" => g.lid_metric.to_string(),
            "lipschitz" => fmt_f(g.lipschitz),
            "prior_sigma" => fmt_f(g.prior_sigma),
            "confidence_delta" => fmt_f(g.confidence_delta),
            "slice_grid" => g.slice_grid.to_string(),
            "slice_extent" => fmt_f(g.slice_extent),
            _ => unreachable!("key list and getter disagree on {key}"),
        }
    }

    /// The resolved configuration as `key = value` lines, one per key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            writeln!(out, "{key} = {}", self.get(key)).expect("writing to a String");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.diag.validate()?;
        if self.model.input_dim != self.data.input_dim
            || self.model.num_classes != self.data.num_classes
        {
            return Err(Error::Config {
                key: "input_dim".into(),
                reason: "model and data disagree on input width or class count".into(),
            });
        }
        if self.model.lora_rank == 0 {
            return Err(Error::Config {
                key: "lora_rank".into(),
                reason: "must be >= 1".into(),
            });
        }
        if self.model.awp_max_rank != self.train.awp.r_max {
            return Err(Error::Config {
                key: "awp_r_max".into(),
                reason: "model branch rank and curriculum r_max disagree".into(),
            });
        }
        Ok(())
    }
}

fn parse_scope(key: &str, value: &str) -> Result<HessianScope> {
    match value {
        "lora" => Ok(HessianScope::Lora),
        "effective" => Ok(HessianScope::Effective),
        _ => Err(Error::Config {
            key: key.into(),
            reason: format!("expected `lora` or `effective`, got `{value}`"),
        }),
    }
}

/// Shortest text that parses back to the same bits.
fn fmt_f(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:?}")
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "grace" => Ok(Mode::Grace),
            "vanilla_ft" => Ok(Mode::VanillaFt),
            "at" => Ok(Mode::At),
            _ => Err(format!("expected grace, vanilla_ft or at, got `{s}`")),
        }
    }
}

impl FromStr for ProbeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "rademacher" => Ok(ProbeKind::Rademacher),
            "gaussian" => Ok(ProbeKind::Gaussian),
            _ => Err(format!("expected rademacher or gaussian, got `{s}`")),
        }
    }
}

impl FromStr for DistanceMetric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(DistanceMetric::Cosine),
            "euclidean" => Ok(DistanceMetric::Euclidean),
            _ => Err(format!("expected cosine or euclidean, got `{s}`")),
        }
    }
}
