//! Flat parameter vectors with a per-block index map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// A flat concatenation of named matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    blocks: Vec<BlockSpec>,
}

impl ParamVector {
    /// Flattens `(name, matrix)` pairs in order.
    pub fn flatten<'a, I>(blocks: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a DenseMatrix)>,
    {
        let mut values = Vec::new();
        let mut specs = Vec::new();
        for (name, m) in blocks {
            specs.push(BlockSpec {
                name: name.to_string(),
                offset: values.len(),
                rows: m.rows(),
                cols: m.cols(),
            });
            values.extend_from_slice(m.data());
        }
        Self {
            values,
            blocks: specs,
        }
    }

    /// A single unnamed block holding `values` as a column vector.
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            values,
            blocks: vec![BlockSpec {
                name: "theta".into(),
                offset: 0,
                rows: n,
                cols: 1,
            }],
        }
    }

    /// Same layout as `self`, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::Dimension {
                op: "param-vector",
                lhs: (self.values.len(), 1),
                rhs: (values.len(), 1),
            });
        }
        Ok(Self {
            values,
            blocks: self.blocks.clone(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            blocks: self.blocks.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&BlockSpec> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_values(&self, name: &str) -> Option<&[f64]> {
        self.block(name).map(|b| &self.values[b.range()])
    }

    /// Restores every block as a matrix, in order.
    pub fn unflatten(&self) -> Vec<(String, DenseMatrix)> {
        self.blocks
            .iter()
            .map(|b| {
                let m = DenseMatrix::from_vec(b.rows, b.cols, self.values[b.range()].to_vec())
                    .expect("block layout matches values");
                (b.name.clone(), m)
            })
            .collect()
    }

    pub fn matrix(&self, name: &str) -> Option<DenseMatrix> {
        self.block(name).map(|b| {
            DenseMatrix::from_vec(b.rows, b.cols, self.values[b.range()].to_vec())
                .expect("block layout matches values")
        })
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.blocks == other.blocks
    }

    fn check_len(&self, other: &ParamVector, op: &'static str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Dimension {
                op,
                lhs: (self.len(), 1),
                rhs: (other.len(), 1),
            });
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_len(other, "dot")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self + alpha * dir`.
    pub fn axpy(&self, alpha: f64, dir: &ParamVector) -> Result<ParamVector> {
        self.check_len(dir, "axpy")?;
        let values = self
            .values
            .iter()
            .zip(&dir.values)
            .map(|(a, b)| a + alpha * b)
            .collect();
        Ok(Self {
            values,
            blocks: self.blocks.clone(),
        })
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.axpy(-1.0, other)
    }

    pub fn scale(&self, s: f64) -> ParamVector {
        Self {
            values: self.values.iter().map(|v| v * s).collect(),
            blocks: self.blocks.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
