//! Fully connected monotone parameterization `W = (1−m)I − AᵀA + B − Bᵀ`.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{MonDeqError, Result};
use crate::factor::{Factor, FactorGrad, FactorRole};
use crate::operator::{matvec, matvec_transpose, LinearOperator, StructuredInverse};
use crate::tensor::{fingerprint, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMonotoneParam {
    pub a: Factor,
    pub b: Factor,
    m: f64,
}

/// Gradients of a scalar loss with respect to the dense parameterization.
#[derive(Clone, Debug)]
pub struct DenseParamGrad {
    pub a: FactorGrad,
    pub b: FactorGrad,
}

pub(crate) fn check_margin(m: f64) -> Result<()> {
    if m.is_finite() && m > 0.0 {
        Ok(())
    } else {
        Err(MonDeqError::InvalidMargin(m))
    }
}

pub(crate) fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    let s = t.shape();
    DMatrix::from_row_slice(s[0], s[1], t.data())
}

pub(crate) fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let data = m.transpose().as_slice().to_vec();
    Tensor::from_vec(&[m.nrows(), m.ncols()], data).expect("shape matches")
}

impl DenseMonotoneParam {
    pub fn new(a: Tensor, b: Tensor, m: f64) -> Result<Self> {
        check_margin(m)?;
        let n = a.shape().first().copied().unwrap_or(0);
        a.expect_shape(&[n, n], "A")?;
        b.expect_shape(&[n, n], "B")?;
        Ok(Self {
            a: Factor::new(a, FactorRole::Quadratic),
            b: Factor::new(b, FactorRole::Linear),
            m,
        })
    }

    /// `A`, `B` with entries i.i.d. `N(0, 1/n)`.
    pub fn random<R: Rng + ?Sized>(n: usize, m: f64, rng: &mut R) -> Result<Self> {
        let std = (1.0 / n.max(1) as f64).sqrt();
        Self::new(
            Tensor::randn(&[n, n], std, rng),
            Tensor::randn(&[n, n], std, rng),
            m,
        )
    }

    pub fn with_weight_norm(mut self) -> Self {
        self.a = self.a.normalized();
        self.b = self.b.normalized();
        self
    }

    pub fn dim(&self) -> usize {
        self.a.weight.shape()[0]
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn fingerprint(&self) -> u64 {
        let mut parts = vec![&self.a.weight, &self.b.weight];
        parts.extend(self.a.scale.iter());
        parts.extend(self.b.scale.iter());
        fingerprint(parts, &[self.m])
    }

    pub fn materialize_w(&self) -> DMatrix<f64> {
        let n = self.dim();
        let a = to_matrix(&self.a.effective());
        let b = to_matrix(&self.b.effective());
        DMatrix::<f64>::identity(n, n) * (1.0 - self.m) - a.transpose() * &a + &b - b.transpose()
    }

    pub fn operator(&self) -> DenseWOperator {
        DenseWOperator {
            w: self.materialize_w(),
            fingerprint: self.fingerprint(),
        }
    }

    /// Explicit `(I + α(I − W))⁻¹`, reusable across iterations and batch
    /// columns until the parameters change.
    pub fn build_inverse(&self, alpha: f64) -> Result<DenseInverse> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(MonDeqError::Config(format!("alpha must be positive, got {alpha}")));
        }
        let n = self.dim();
        let w = self.materialize_w();
        let id = DMatrix::<f64>::identity(n, n);
        let system = &id + (&id - w) * alpha;
        let inv = system
            .lu()
            .try_inverse()
            .ok_or_else(|| MonDeqError::Singular("I + α(I − W)".into()))?;
        Ok(DenseInverse {
            inv,
            alpha,
            fingerprint: self.fingerprint(),
        })
    }

    /// Chain rule from `G = ∂ℓ/∂W` to the raw factors (and the
    /// normalization scalars when enabled).
    pub fn grad_through_parameterization(&self, g: &DMatrix<f64>) -> Result<DenseParamGrad> {
        let n = self.dim();
        if g.shape() != (n, n) {
            return Err(MonDeqError::Shape(format!(
                "dW has shape {:?}, W is {n}x{n}",
                g.shape()
            )));
        }
        let a = to_matrix(&self.a.effective());
        let sym = g + g.transpose();
        let grad_a_eff = -(a * sym);
        let grad_b_eff = g - g.transpose();
        Ok(DenseParamGrad {
            a: self.a.chain(&to_tensor(&grad_a_eff)),
            b: self.b.chain(&to_tensor(&grad_b_eff)),
        })
    }
}

/// Materialized `W` as an operator.
#[derive(Clone, Debug)]
pub struct DenseWOperator {
    w: DMatrix<f64>,
    fingerprint: u64,
}

impl DenseWOperator {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }
}

impl LinearOperator for DenseWOperator {
    fn dim_in(&self) -> usize {
        self.w.ncols()
    }

    fn dim_out(&self) -> usize {
        self.w.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        matvec(&self.w, x, y);
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        matvec_transpose(&self.w, y, x);
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

#[derive(Clone, Debug)]
pub struct DenseInverse {
    inv: DMatrix<f64>,
    alpha: f64,
    fingerprint: u64,
}

impl DenseInverse {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.inv
    }
}

impl StructuredInverse for DenseInverse {
    fn dim(&self) -> usize {
        self.inv.nrows()
    }

    fn alpha(&self) -> f64 {
        self.alpha
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn solve(&self, v: &[f64], x: &mut [f64]) {
        matvec(&self.inv, v, x);
    }

    fn solve_transpose(&self, v: &[f64], x: &mut [f64]) {
        matvec_transpose(&self.inv, v, x);
    }
}
