//! Shared operator machinery: the linear-operator abstraction, proximal
//! nonlinearities, spectral-norm estimation and the dense monotonicity check.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MonDeqError, Result};
use crate::par;
use crate::tensor::{axpy, dot, norm};

/// A real linear map given only through its action and its adjoint.
///
/// Implementations must satisfy `⟨A x, y⟩ = ⟨x, Aᵀ y⟩`.
pub trait LinearOperator: Send + Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;

    /// `y = A x`; `y` is overwritten.
    fn apply(&self, x: &[f64], y: &mut [f64]);

    /// `x = Aᵀ y`; `x` is overwritten.
    fn apply_transpose(&self, y: &[f64], x: &mut [f64]);

    /// Identifies the parameters the operator was built from. Structured
    /// inverses record it so that stale factorizations can be detected.
    fn fingerprint(&self) -> u64 {
        0
    }

    fn apply_batch(&self, xs: &[f64], ys: &mut [f64]) {
        let (din, dout) = (self.dim_in(), self.dim_out());
        par::for_each_row(ys, dout, |i, y| self.apply(&xs[i * din..(i + 1) * din], y));
    }

    fn apply_transpose_batch(&self, ys: &[f64], xs: &mut [f64]) {
        let (din, dout) = (self.dim_in(), self.dim_out());
        par::for_each_row(xs, din, |i, x| {
            self.apply_transpose(&ys[i * dout..(i + 1) * dout], x)
        });
    }
}

/// A reusable factorization of `V = (I + α(I − W))⁻¹`.
pub trait StructuredInverse: Send + Sync {
    fn dim(&self) -> usize;
    fn alpha(&self) -> f64;

    /// Fingerprint of the `W` this inverse was built for.
    fn fingerprint(&self) -> u64;

    /// `x = V v`
    fn solve(&self, v: &[f64], x: &mut [f64]);

    /// `x = Vᵀ v`
    fn solve_transpose(&self, v: &[f64], x: &mut [f64]);

    fn solve_batch(&self, vs: &[f64], xs: &mut [f64]) {
        let n = self.dim();
        par::for_each_row(xs, n, |i, x| self.solve(&vs[i * n..(i + 1) * n], x));
    }

    fn solve_transpose_batch(&self, vs: &[f64], xs: &mut [f64]) {
        let n = self.dim();
        par::for_each_row(xs, n, |i, x| {
            self.solve_transpose(&vs[i * n..(i + 1) * n], x)
        });
    }
}

/// A dense matrix as an operator.
#[derive(Clone, Debug)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
}

impl DenseOperator {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn dim_in(&self) -> usize {
        self.matrix.ncols()
    }

    fn dim_out(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        matvec(&self.matrix, x, y);
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        matvec_transpose(&self.matrix, y, x);
    }
}

/// `I − W` for a square operator `W`.
pub struct IdentityMinus<'a>(pub &'a dyn LinearOperator);

impl LinearOperator for IdentityMinus<'_> {
    fn dim_in(&self) -> usize {
        self.0.dim_in()
    }

    fn dim_out(&self) -> usize {
        self.0.dim_out()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.0.apply(x, y);
        y.iter_mut().zip(x).for_each(|(y, x)| *y = x - *y);
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        self.0.apply_transpose(y, x);
        x.iter_mut().zip(y).for_each(|(x, y)| *x = y - *x);
    }
}

pub(crate) fn matvec(m: &DMatrix<f64>, x: &[f64], y: &mut [f64]) {
    let (rows, cols) = m.shape();
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    y.iter_mut().for_each(|v| *v = 0.0);
    // column-major storage: accumulate column by column
    for (j, xj) in x.iter().enumerate() {
        if *xj != 0.0 {
            axpy(*xj, &m.as_slice()[j * rows..(j + 1) * rows], y);
        }
    }
}

pub(crate) fn matvec_transpose(m: &DMatrix<f64>, y: &[f64], x: &mut [f64]) {
    let rows = m.nrows();
    for (j, xj) in x.iter_mut().enumerate() {
        *xj = dot(&m.as_slice()[j * rows..(j + 1) * rows], y);
    }
}

/// Materializes an operator column by column (test-scale only).
pub fn materialize(op: &dyn LinearOperator) -> DMatrix<f64> {
    let (rows, cols) = (op.dim_out(), op.dim_in());
    let mut out = DMatrix::zeros(rows, cols);
    let mut e = vec![0.0; cols];
    let mut col = vec![0.0; rows];
    for j in 0..cols {
        e[j] = 1.0;
        op.apply(&e, &mut col);
        out.column_mut(j).copy_from_slice(&col);
        e[j] = 0.0;
    }
    out
}

/// Which proximal nonlinearity the network uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxKind {
    /// `max(v, 0)`: the prox of the indicator of the nonnegative orthant.
    Relu,
    /// ReLU that additionally forces a `border`-pixel frame of every channel
    /// plane to zero (prox of the indicator of that zero set).
    ReluZeroBorder { border: usize },
}

impl ProxKind {
    /// Border width that removes circular wrap-around for an operator with
    /// effective kernel size `k_eff`.
    pub fn zero_border_for_kernel(k_eff: usize) -> Self {
        ProxKind::ReluZeroBorder {
            border: k_eff.saturating_sub(1) / 2,
        }
    }
}

/// A channel plane group: `channels` planes of `side × side` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Plane {
    pub channels: usize,
    pub side: usize,
}

impl Plane {
    pub fn len(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Memory layout of a hidden vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HiddenLayout {
    Flat(usize),
    /// Concatenated channel-major plane groups (one per tier).
    Planes(Vec<Plane>),
}

impl HiddenLayout {
    pub fn len(&self) -> usize {
        match self {
            HiddenLayout::Flat(n) => *n,
            HiddenLayout::Planes(p) => p.iter().map(Plane::len).sum(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A prox nonlinearity bound to a hidden layout, with its border mask
/// precomputed.
#[derive(Clone, Debug)]
pub struct Prox {
    kind: ProxKind,
    len: usize,
    /// `true` on entries forced to zero.
    zero_mask: Option<Vec<bool>>,
}

impl Prox {
    pub fn new(kind: ProxKind, layout: &HiddenLayout) -> Result<Self> {
        let zero_mask = match (kind, layout) {
            (ProxKind::Relu, _) => None,
            (ProxKind::ReluZeroBorder { .. }, HiddenLayout::Flat(_)) => {
                return Err(MonDeqError::Shape(
                    "zero-border prox needs a planar hidden layout".into(),
                ))
            }
            (ProxKind::ReluZeroBorder { border }, HiddenLayout::Planes(planes)) => {
                let mut mask = Vec::with_capacity(layout.len());
                for plane in planes {
                    if 2 * border >= plane.side {
                        return Err(MonDeqError::Geometry(format!(
                            "border {border} leaves no interior in a {0}x{0} plane",
                            plane.side
                        )));
                    }
                    let s = plane.side;
                    for _ in 0..plane.channels {
                        for i in 0..s {
                            for j in 0..s {
                                let edge = i < border
                                    || j < border
                                    || i >= s - border
                                    || j >= s - border;
                                mask.push(edge);
                            }
                        }
                    }
                }
                Some(mask)
            }
        };
        Ok(Self {
            kind,
            len: layout.len(),
            zero_mask,
        })
    }

    pub fn kind(&self) -> ProxKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// In-place prox of one hidden vector. ReLU-family proxes do not depend
    /// on the step size.
    pub fn apply_in_place(&self, v: &mut [f64]) {
        debug_assert_eq!(v.len(), self.len);
        v.iter_mut().for_each(|x| *x = x.max(0.0));
        if let Some(mask) = &self.zero_mask {
            v.iter_mut()
                .zip(mask)
                .filter(|(_, m)| **m)
                .for_each(|(x, _)| *x = 0.0);
        }
    }

    /// Clarke-Jacobian diagonal at `pre`: 1 on strictly positive free
    /// entries, 0 elsewhere (including exact zeros and border entries).
    pub fn jacobian_diag(&self, pre: &[f64]) -> Vec<f64> {
        let mut j: Vec<f64> = pre
            .iter()
            .map(|p| if *p > 0.0 { 1.0 } else { 0.0 })
            .collect();
        if let Some(mask) = &self.zero_mask {
            j.iter_mut()
                .zip(mask)
                .filter(|(_, m)| **m)
                .for_each(|(x, _)| *x = 0.0);
        }
        j
    }
}

/// `prox_f^α(v)` for the ReLU family.
pub fn prox(kind: ProxKind, v: &[f64], layout: &HiddenLayout, alpha: f64) -> Result<Vec<f64>> {
    if v.len() != layout.len() {
        return Err(MonDeqError::Shape(format!(
            "prox input has {} entries, layout declares {}",
            v.len(),
            layout.len()
        )));
    }
    if !(alpha > 0.0) {
        return Err(MonDeqError::Config(format!("prox step must be positive, got {alpha}")));
    }
    let p = Prox::new(kind, layout)?;
    let mut out = v.to_vec();
    p.apply_in_place(&mut out);
    Ok(out)
}

/// Largest singular value of `op` by power iteration on `opᵀ op`.
///
/// The estimate `‖op x_k‖` with unit `x_k` never exceeds the true norm and is
/// nondecreasing in `k`. Stops when the relative change drops below `tol`.
pub fn estimate_operator_norm(op: &dyn LinearOperator, iters: usize, tol: f64) -> Result<f64> {
    if op.dim_in() != op.dim_out() {
        return Err(MonDeqError::Shape(format!(
            "operator norm estimate needs a square operator, got {}x{}",
            op.dim_out(),
            op.dim_in()
        )));
    }
    if iters == 0 {
        return Err(MonDeqError::Config("power iteration needs iters >= 1".into()));
    }
    let n = op.dim_in();
    if n == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nx = norm(&x);
    x.iter_mut().for_each(|v| *v /= nx);

    let mut y = vec![0.0; n];
    let mut best = 0.0_f64;
    for _ in 0..iters {
        op.apply(&x, &mut y);
        let sigma = norm(&y);
        if sigma == 0.0 {
            return Ok(best);
        }
        let prev = best;
        best = best.max(sigma);
        op.apply_transpose(&y, &mut x);
        let nx = norm(&x);
        if nx == 0.0 {
            return Ok(best);
        }
        x.iter_mut().for_each(|v| *v /= nx);
        if prev > 0.0 && (best - prev) <= tol * best {
            break;
        }
    }
    Ok(best)
}

/// Power-iteration defaults: 200 iterations, relative tolerance 1e-7.
pub fn operator_norm(op: &dyn LinearOperator) -> f64 {
    estimate_operator_norm(op, 200, 1e-7).unwrap_or(f64::NAN)
}

/// Result of [`verify_strong_monotonicity`].
#[derive(Clone, Copy, Debug)]
pub struct MonotonicityReport {
    /// `λ_min` of the symmetric part of `I − W`.
    pub min_eigenvalue: f64,
    pub holds: bool,
}

/// Checks `I − W ⪰ m I` by a dense symmetric eigensolve of
/// `((I − W) + (I − W)ᵀ) / 2`.
pub fn verify_strong_monotonicity(w: &DMatrix<f64>, m: f64) -> Result<MonotonicityReport> {
    verify_with_tolerance(w, m, 1e-8)
}

pub fn verify_with_tolerance(w: &DMatrix<f64>, m: f64, tol: f64) -> Result<MonotonicityReport> {
    if !w.is_square() {
        return Err(MonDeqError::Shape(format!(
            "monotonicity check needs a square matrix, got {}x{}",
            w.nrows(),
            w.ncols()
        )));
    }
    let n = w.nrows();
    if n == 0 {
        return Ok(MonotonicityReport {
            min_eigenvalue: f64::INFINITY,
            holds: true,
        });
    }
    let i_minus_w = DMatrix::<f64>::identity(n, n) - w;
    let sym = (&i_minus_w + i_minus_w.transpose()) * 0.5;
    let min_eigenvalue = SymmetricEigen::new(sym).eigenvalues.min();
    Ok(MonotonicityReport {
        min_eigenvalue,
        holds: min_eigenvalue >= m - tol,
    })
}
