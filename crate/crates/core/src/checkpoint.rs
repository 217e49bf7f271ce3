//! Binary checkpoints.
//!
//! Layout: magic `GRK1`, u32 LE format version, then per tensor until end of
//! file: u32 name length, UTF-8 name, u32 rank, u32 dims, f64 LE values in
//! row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::awp::AwpBranch;
use crate::error::{Error, Result};
use crate::model::{EncoderModel, LoraLayer};
use crate::tensor::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"GRK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn matrix(name: impl Into<String>, m: &DenseMatrix) -> Self {
        Self {
            name: name.into(),
            shape: vec![m.rows(), m.cols()],
            values: m.data().to_vec(),
        }
    }

    pub fn scalar(name: impl Into<String>, v: f64) -> Self {
        Self {
            name: name.into(),
            shape: Vec::new(),
            values: vec![v],
        }
    }

    fn to_matrix(&self) -> Result<DenseMatrix> {
        match self.shape.as_slice() {
            [r, c] => DenseMatrix::from_vec(*r, *c, self.values.clone()),
            _ => Err(Error::Input(format!(
                "tensor {} has rank {}, expected a matrix",
                self.name,
                self.shape.len()
            ))),
        }
    }

    fn to_scalar(&self) -> Result<f64> {
        if !self.shape.is_empty() {
            return Err(Error::Input(format!(
                "tensor {} is not a scalar",
                self.name
            )));
        }
        Ok(self.values[0])
    }
}

pub fn write_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for t in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.values.len() {
            return Err(Error::Contract(format!(
                "tensor {} has {} values for shape {:?}",
                t.name,
                t.values.len(),
                t.shape
            )));
        }
        buf.extend_from_slice(&u32_len(t.name.len())?.to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&u32_len(t.shape.len())?.to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&u32_len(d)?.to_le_bytes());
        }
        for v in &t.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Contract(format!("{n} does not fit the checkpoint format")))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                what: what.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
    }
}

pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.take(4, "magic").map_err(|_| Error::CorruptHeader {
        path: path.to_path_buf(),
        reason: "file shorter than the magic number".into(),
    })?;
    if magic != MAGIC {
        return Err(Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: format!("magic {magic:?} is not {MAGIC:?}"),
        });
    }
    let version = r.u32("version").map_err(|_| Error::CorruptHeader {
        path: path.to_path_buf(),
        reason: "missing format version".into(),
    })?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut out = Vec::new();
    let mut i = 0;
    while r.pos < bytes.len() {
        let name_len = r.u32(&format!("name length of tensor {i}"))? as usize;
        let name_bytes = r.take(name_len, &format!("name of tensor {i}"))?;
        let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            reason: format!("tensor {i} name is not UTF-8"),
        })?;
        let rank = r.u32(&format!("rank of {name}"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32(&format!("dims of {name}"))? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: format!("shape of {name} overflows"),
            })?;
        let raw = r.take(
            n.checked_mul(8).ok_or_else(|| Error::Truncated {
                path: path.to_path_buf(),
                what: format!("values of {name}"),
            })?,
            &format!("values of {name}"),
        )?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        out.push(NamedTensor {
            name,
            shape,
            values,
        });
        i += 1;
    }
    Ok(out)
}

fn model_tensors(model: &EncoderModel) -> Vec<NamedTensor> {
    let mut t = vec![
        NamedTensor::scalar("layers", model.layers.len() as f64),
        NamedTensor::scalar("logit_scale", model.logit_scale),
        NamedTensor::matrix("class_head", &model.class_head),
    ];
    for l in &model.layers {
        t.push(NamedTensor::matrix(format!("{}.W0", l.name), &l.w0));
        t.push(NamedTensor::matrix(format!("{}.A", l.name), &l.a));
        t.push(NamedTensor::matrix(format!("{}.B", l.name), &l.b));
        t.push(NamedTensor::scalar(format!("{}.alpha", l.name), l.alpha));
        t.push(NamedTensor::matrix(format!("{}.awp.A", l.name), &l.awp.a));
        t.push(NamedTensor::matrix(format!("{}.awp.B", l.name), &l.awp.b));
        t.push(NamedTensor::scalar(
            format!("{}.awp.rank", l.name),
            l.awp.active_rank as f64,
        ));
        t.push(NamedTensor::scalar(
            format!("{}.awp.rho", l.name),
            l.awp.rho,
        ));
    }
    t
}

pub fn save_checkpoint(model: &EncoderModel, path: &Path) -> Result<()> {
    write_tensors(path, &model_tensors(model))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderModel> {
    let tensors = read_tensors(path)?;
    let get = |name: &str| {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: format!("missing tensor {name}"),
            })
    };
    let n_layers = get("layers")?.to_scalar()? as usize;
    let logit_scale = get("logit_scale")?.to_scalar()?;
    let class_head = get("class_head")?.to_matrix()?;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let name = format!("layer{i}");
        let m = |suffix: &str| get(&format!("{name}.{suffix}")).and_then(NamedTensor::to_matrix);
        let s = |suffix: &str| get(&format!("{name}.{suffix}")).and_then(NamedTensor::to_scalar);
        layers.push(LoraLayer {
            w0: m("W0")?,
            a: m("A")?,
            b: m("B")?,
            alpha: s("alpha")?,
            awp: AwpBranch {
                a: m("awp.A")?,
                b: m("awp.B")?,
                active_rank: s("awp.rank")? as usize,
                rho: s("awp.rho")?,
            },
            name,
        });
    }
    EncoderModel::from_parts(layers, class_head, logit_scale)
}
