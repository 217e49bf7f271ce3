//! Scalar objectives over parameter vectors and finite-difference
//! Hessian-vector products.

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::tensor::DenseMatrix;

/// Default central-difference step for [`hvp_fd`].
pub const DEFAULT_HVP_STEP: f64 = 1e-5;

/// A differentiable scalar function of a parameter vector.
pub trait Objective {
    fn value(&self, params: &ParamVector) -> Result<f64>;

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)>;
}

impl<T: Objective + ?Sized> Objective for &T {
    fn value(&self, params: &ParamVector) -> Result<f64> {
        (**self).value(params)
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        (**self).value_and_grad(params)
    }
}

/// `(grad(theta + step*v) - grad(theta - step*v)) / (2*step)`.
pub fn hvp_fd<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamVector,
    v: &ParamVector,
    step: f64,
) -> Result<ParamVector> {
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Contract(format!(
            "hvp step must be positive, got {step}"
        )));
    }
    if v.norm() == 0.0 {
        return Err(Error::Contract("hvp direction must be nonzero".into()));
    }
    let plus = params.axpy(step, v)?;
    let minus = params.axpy(-step, v)?;
    let (lp, gp) = objective.value_and_grad(&plus)?;
    let (lm, gm) = objective.value_and_grad(&minus)?;
    if !lp.is_finite() || !lm.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss during hvp probe ({lp}, {lm})"
        )));
    }
    let values = gp
        .values()
        .iter()
        .zip(gm.values())
        .map(|(a, b)| (a - b) / (2.0 * step))
        .collect();
    let hv = params.with_values(values)?;
    if !hv.is_finite() {
        return Err(Error::Numeric("non-finite Hessian-vector product".into()));
    }
    Ok(hv)
}

/// `L(theta) = 0.5 * theta^T H theta + b^T theta`, with a dense symmetric `H`.
///
/// Its exact Hessian is known, which makes it the reference objective for
/// every curvature estimator.
#[derive(Clone, Debug)]
pub struct QuadraticObjective {
    hessian: DenseMatrix,
    linear: Vec<f64>,
    layout: ParamVector,
}

impl QuadraticObjective {
    pub fn new(hessian: DenseMatrix) -> Result<Self> {
        let n = hessian.rows();
        Self::with_layout(hessian, ParamVector::from_values(vec![0.0; n]))
    }

    /// Uses `layout`'s block structure for parameters and gradients.
    pub fn with_layout(hessian: DenseMatrix, layout: ParamVector) -> Result<Self> {
        if hessian.rows() != hessian.cols() || hessian.rows() != layout.len() {
            return Err(Error::Dimension {
                op: "quadratic",
                lhs: hessian.shape(),
                rhs: (layout.len(), layout.len()),
            });
        }
        Ok(Self {
            linear: vec![0.0; layout.len()],
            hessian,
            layout: layout.zeros_like(),
        })
    }

    pub fn with_linear(mut self, linear: Vec<f64>) -> Self {
        assert_eq!(linear.len(), self.linear.len());
        self.linear = linear;
        self
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut h = DenseMatrix::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            h.set(i, i, d);
        }
        Self::new(h).expect("square by construction")
    }

    pub fn hessian(&self) -> &DenseMatrix {
        &self.hessian
    }

    /// Parameter vector of the right layout holding `values`.
    pub fn params(&self, values: Vec<f64>) -> Result<ParamVector> {
        self.layout.with_values(values)
    }

    fn h_times(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|i| self.hessian.row(i).iter().zip(x).map(|(h, v)| h * v).sum())
            .collect()
    }
}

impl Objective for QuadraticObjective {
    fn value(&self, params: &ParamVector) -> Result<f64> {
        let x = params.values();
        if x.len() != self.linear.len() {
            return Err(Error::Dimension {
                op: "quadratic",
                lhs: (self.linear.len(), 1),
                rhs: (x.len(), 1),
            });
        }
        let hx = self.h_times(x);
        let quad: f64 = x.iter().zip(&hx).map(|(a, b)| a * b).sum();
        let lin: f64 = x.iter().zip(&self.linear).map(|(a, b)| a * b).sum();
        Ok(0.5 * quad + lin)
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        let value = self.value(params)?;
        let grad: Vec<f64> = self
            .h_times(params.values())
            .iter()
            .zip(&self.linear)
            .map(|(a, b)| a + b)
            .collect();
        Ok((value, params.with_values(grad)?))
    }
}
