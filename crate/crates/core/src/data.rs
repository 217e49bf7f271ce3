//! Deterministic multi-domain synthetic classification bundles.
//!
//! All domains share `K` unit-norm class centers living in the first
//! `input_dim - silent_dims` coordinates. The trailing "silent" coordinates
//! carry no signal and no noise in any domain.
//!
//! * `id`: Gaussian clusters around the centers with per-coordinate std `sigma_id`.
//! * `ood`: centers rotated by `ood_angle_deg` (every center moves by exactly
//!   that angle) and noise std scaled by `ood_cov_scale`.
//! * `nat_shift`: ID centers with Student-t noise and random coordinate masking.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, sub_seed, SeededRng};
use crate::tensor::{dot, DenseMatrix};

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: DenseMatrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "batch",
                lhs: inputs.shape(),
                rhs: (labels.len(), 1),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Rows whose label is `class`, in order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == class)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Id,
    Ood,
    NatShift,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Id => "id",
            DomainTag::Ood => "ood",
            DomainTag::NatShift => "nat_shift",
        }
    }
}

impl std::fmt::Display for DomainTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub tag: DomainTag,
    pub batch: Batch,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub n_per_class: usize,
    pub sigma_id: f64,
    pub ood_angle_deg: f64,
    pub ood_cov_scale: f64,
    pub shift_df: f64,
    pub mask_frac: f64,
    pub silent_dims: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            input_dim: 32,
            n_per_class: 64,
            sigma_id: 0.15,
            ood_angle_deg: 35.0,
            ood_cov_scale: 1.5,
            shift_df: 3.0,
            mask_frac: 0.1,
            silent_dims: 4,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn signal_dims(&self) -> usize {
        self.input_dim - self.silent_dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Input("need at least two classes".into()));
        }
        if self.n_per_class < 1 {
            return Err(Error::Input("need at least one sample per class".into()));
        }
        if self.silent_dims >= self.input_dim || self.signal_dims() < 2 {
            return Err(Error::Input(format!(
                "{} silent dims leave fewer than two signal dims of {}",
                self.silent_dims, self.input_dim
            )));
        }
        if !(self.sigma_id > 0.0) || !self.sigma_id.is_finite() {
            return Err(Error::Input(format!(
                "sigma_id must be > 0, got {}",
                self.sigma_id
            )));
        }
        if !(self.ood_cov_scale > 0.0) {
            return Err(Error::Input(format!(
                "ood_cov_scale must be > 0, got {}",
                self.ood_cov_scale
            )));
        }
        if !(self.shift_df > 0.0) {
            return Err(Error::Input(format!(
                "shift_df must be > 0, got {}",
                self.shift_df
            )));
        }
        if !(0.0..1.0).contains(&self.mask_frac) {
            return Err(Error::Input(format!(
                "mask_frac must be in [0, 1), got {}",
                self.mask_frac
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub config: DataConfig,
    pub centers: DenseMatrix,
    pub train: DomainDataset,
    pub id_test: DomainDataset,
    pub ood: DomainDataset,
    pub nat_shift: DomainDataset,
}

impl Bundle {
    /// Evaluation domains, in reporting order.
    pub fn eval_domains(&self) -> [&DomainDataset; 3] {
        [&self.id_test, &self.ood, &self.nat_shift]
    }

    pub fn domain(&self, tag: DomainTag) -> &DomainDataset {
        match tag {
            DomainTag::Id => &self.id_test,
            DomainTag::Ood => &self.ood,
            DomainTag::NatShift => &self.nat_shift,
        }
    }

    /// FNV-1a over every generated value and label.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        for d in [&self.train, &self.id_test, &self.ood, &self.nat_shift] {
            for v in d.batch.inputs.data() {
                feed(&v.to_bits().to_le_bytes());
            }
            for &y in &d.batch.labels {
                feed(&(y as u64).to_le_bytes());
            }
        }
        h
    }

    /// One sample per line: `domain label v1 v2 ...`.
    pub fn export_text(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let domains = [
            ("train", &self.train),
            ("id", &self.id_test),
            ("ood", &self.ood),
            ("nat_shift", &self.nat_shift),
        ];
        for (name, d) in domains {
            for i in 0..d.batch.len() {
                write!(w, "{name} {}", d.batch.labels[i]).map_err(|e| Error::io(path, e))?;
                for v in d.batch.inputs.row(i) {
                    write!(w, " {v:e}").map_err(|e| Error::io(path, e))?;
                }
                writeln!(w).map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug)]
enum Noise {
    Gaussian,
    StudentT { df: f64 },
}

pub fn generate_bundle(cfg: &DataConfig) -> Result<Bundle> {
    cfg.validate()?;
    let centers = class_centers(cfg);
    let theta = cfg.ood_angle_deg.to_radians();
    let mut rot_rng = rng_for(cfg.seed, "data/ood-rotation");
    let ood_centers = rotate_centers(&centers, cfg.signal_dims(), theta, &mut rot_rng);

    let train = draw_domain(
        cfg,
        &centers,
        DomainTag::Id,
        cfg.sigma_id,
        Noise::Gaussian,
        0.0,
        "data/train",
    )?;
    let id_test = draw_domain(
        cfg,
        &centers,
        DomainTag::Id,
        cfg.sigma_id,
        Noise::Gaussian,
        0.0,
        "data/id-test",
    )?;
    let ood = draw_domain(
        cfg,
        &ood_centers,
        DomainTag::Ood,
        cfg.sigma_id * cfg.ood_cov_scale,
        Noise::Gaussian,
        0.0,
        "data/ood",
    )?;
    let nat_shift = draw_domain(
        cfg,
        &centers,
        DomainTag::NatShift,
        cfg.sigma_id,
        Noise::StudentT { df: cfg.shift_df },
        cfg.mask_frac,
        "data/nat-shift",
    )?;
    Ok(Bundle {
        config: cfg.clone(),
        centers,
        train,
        id_test,
        ood,
        nat_shift,
    })
}

/// An ID-distributed draw from an arbitrary named stream; with a null shift
/// (`ood_angle_deg = 0`, `ood_cov_scale = 1`) the `"data/ood"` stream
/// reproduces the OOD domain bit for bit.
pub fn draw_id(cfg: &DataConfig, stream: &str) -> Result<DomainDataset> {
    cfg.validate()?;
    let centers = class_centers(cfg);
    draw_domain(
        cfg,
        &centers,
        DomainTag::Id,
        cfg.sigma_id,
        Noise::Gaussian,
        0.0,
        stream,
    )
}

fn class_centers(cfg: &DataConfig) -> DenseMatrix {
    let mut rng = rng_for(cfg.seed, "data/centers");
    let d_sig = cfg.signal_dims();
    let mut centers = DenseMatrix::zeros(cfg.num_classes, cfg.input_dim);
    for c in 0..cfg.num_classes {
        let v: Vec<f64> = (0..d_sig)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let n = dot(&v, &v).sqrt();
        for (j, x) in v.iter().enumerate() {
            centers.set(c, j, x / n);
        }
    }
    centers
}

/// Rotation of the signal subspace by `theta` in each of `d_sig / 2` random
/// orthogonal planes, so every vector in the subspace turns by exactly `theta`.
fn rotate_centers(
    centers: &DenseMatrix,
    d_sig: usize,
    theta: f64,
    rng: &mut SeededRng,
) -> DenseMatrix {
    let basis = random_orthonormal_basis(d_sig, rng);
    let (s, c) = theta.sin_cos();
    let mut out = centers.clone();
    for r in 0..centers.rows() {
        let x = &centers.row(r)[..d_sig];
        let mut y = x.to_vec();
        for pair in basis.chunks_exact(2) {
            let (u, v) = (&pair[0], &pair[1]);
            let (xu, xv) = (dot(x, u), dot(x, v));
            for j in 0..d_sig {
                y[j] += (c - 1.0) * (xu * u[j] + xv * v[j]) + s * (xu * v[j] - xv * u[j]);
            }
        }
        out.row_mut(r)[..d_sig].copy_from_slice(&y);
    }
    out
}

fn random_orthonormal_basis(d: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

fn draw_domain(
    cfg: &DataConfig,
    centers: &DenseMatrix,
    tag: DomainTag,
    sigma: f64,
    noise: Noise,
    mask_frac: f64,
    stream: &str,
) -> Result<DomainDataset> {
    let seed = sub_seed(cfg.seed, stream);
    let mut rng = rng_for(cfg.seed, stream);
    let d_sig = cfg.signal_dims();
    let n = cfg.num_classes * cfg.n_per_class;
    let mut inputs = DenseMatrix::zeros(n, cfg.input_dim);
    let mut labels = Vec::with_capacity(n);
    let student = match noise {
        Noise::StudentT { df } => {
            Some(StudentT::new(df).map_err(|e| Error::Input(format!("student-t: {e}")))?)
        }
        Noise::Gaussian => None,
    };
    let mut row = 0;
    for c in 0..cfg.num_classes {
        for _ in 0..cfg.n_per_class {
            let out = inputs.row_mut(row);
            for (j, o) in out.iter_mut().enumerate().take(d_sig) {
                let z: f64 = match &student {
                    Some(t) => t.sample(&mut rng),
                    None => StandardNormal.sample(&mut rng),
                };
                *o = centers.get(c, j) + sigma * z;
            }
            if mask_frac > 0.0 {
                for o in out.iter_mut().take(d_sig) {
                    if rng.random::<f64>() < mask_frac {
                        *o = 0.0;
                    }
                }
            }
            labels.push(c);
            row += 1;
        }
    }
    Ok(DomainDataset {
        tag,
        batch: Batch::new(inputs, labels)?,
        seed,
    })
}

/// Nearest-class-mean classifier fitted on `train`; a fixed linear probe.
pub struct CentroidProbe {
    means: DenseMatrix,
}

impl CentroidProbe {
    pub fn fit(train: &Batch, num_classes: usize) -> Self {
        let d = train.inputs.cols();
        let mut means = DenseMatrix::zeros(num_classes, d);
        let mut counts = vec![0usize; num_classes];
        for i in 0..train.len() {
            let y = train.labels[i];
            counts[y] += 1;
            for (m, x) in means.row_mut(y).iter_mut().zip(train.inputs.row(i)) {
                *m += x;
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                means.row_mut(c).iter_mut().for_each(|m| *m /= n as f64);
            }
        }
        Self { means }
    }

    pub fn accuracy(&self, batch: &Batch) -> f64 {
        let mut correct = 0;
        for i in 0..batch.len() {
            let x = batch.inputs.row(i);
            let mut best = (f64::INFINITY, 0);
            for c in 0..self.means.rows() {
                let d: f64 = self
                    .means
                    .row(c)
                    .iter()
                    .zip(x)
                    .map(|(m, v)| (m - v) * (m - v))
                    .sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            if best.1 == batch.labels[i] {
                correct += 1;
            }
        }
        correct as f64 / batch.len() as f64
    }
}
