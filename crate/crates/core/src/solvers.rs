//! Operator-splitting solvers for the equilibrium and for the implicit
//! backward pass.
//!
//! All solvers work on a batch laid out row-major (`batch × dim`), start from
//! zero, and share one iteration count across the batch: the batch stops once
//! the largest per-example update residual `‖z⁺ − z‖ / max(‖z⁺‖, 1e-12)` is at
//! most `epsilon`. Running out of iterations is not an error here; the
//! returned stats carry `converged = false` and callers decide.

use crate::error::{MonDeqError, Result};
use crate::operator::{LinearOperator, Prox, StructuredInverse};
use crate::par;
use crate::tensor::norm;

const DENOM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplittingMethod {
    ForwardBackward,
    PeacemanRachford,
}

impl SplittingMethod {
    pub fn name(self) -> &'static str {
        match self {
            SplittingMethod::ForwardBackward => "fb",
            SplittingMethod::PeacemanRachford => "pr",
        }
    }
}

impl std::str::FromStr for SplittingMethod {
    type Err = MonDeqError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fb" | "forward-backward" | "forward_backward" => Ok(SplittingMethod::ForwardBackward),
            "pr" | "peaceman-rachford" | "peaceman_rachford" => Ok(SplittingMethod::PeacemanRachford),
            other => Err(MonDeqError::Config(format!("unknown splitting method {other:?}"))),
        }
    }
}

impl std::fmt::Display for SplittingMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub method: SplittingMethod,
    pub alpha: f64,
    pub epsilon: f64,
    pub max_iter: usize,
    /// Known convergence bound for forward-backward (`2m/L²`); exceeding it
    /// only logs a warning.
    pub step_bound: Option<f64>,
}

impl SolverConfig {
    pub fn new(method: SplittingMethod, alpha: f64) -> Self {
        Self {
            method,
            alpha,
            epsilon: 1e-2,
            max_iter: 500,
            step_bound: None,
        }
    }

    pub fn forward_backward(alpha: f64) -> Self {
        Self::new(SplittingMethod::ForwardBackward, alpha)
    }

    pub fn peaceman_rachford(alpha: f64) -> Self {
        Self::new(SplittingMethod::PeacemanRachford, alpha)
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_step_bound(mut self, bound: f64) -> Self {
        self.step_bound = Some(bound);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(MonDeqError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0) {
            return Err(MonDeqError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_iter == 0 {
            return Err(MonDeqError::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }

    fn warn_step_bound(&self) {
        if let (SplittingMethod::ForwardBackward, Some(bound)) = (self.method, self.step_bound) {
            if self.alpha > bound {
                log::warn!(
                    "forward-backward alpha {} exceeds the convergence bound {bound:.4e}",
                    self.alpha
                );
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub update_residuals: Vec<f64>,
    pub converged: bool,
}

impl SolveStats {
    pub fn last_residual(&self) -> f64 {
        self.update_residuals.last().copied().unwrap_or(f64::NAN)
    }
}

/// A solved (or partially solved) batch of equilibria.
#[derive(Clone, Debug)]
pub struct EquilibriumState {
    /// `batch × dim`, equal to `prox(preactivation)`.
    pub z: Vec<f64>,
    /// `W z + U x + b` at the last iterate.
    pub preactivation: Vec<f64>,
    pub j_diag: Vec<f64>,
    pub dim: usize,
    pub batch: usize,
    pub stats: SolveStats,
}

impl EquilibriumState {
    pub fn example(&self, e: usize) -> &[f64] {
        &self.z[e * self.dim..(e + 1) * self.dim]
    }
}

/// Output of a backward solve.
#[derive(Clone, Debug)]
pub struct BackwardSolution {
    /// Solution of the split problem, zero on inactive units.
    pub u_tilde: Vec<f64>,
    /// `v + Wᵀ ũ`, which solves `(I − J W)ᵀ u = v`.
    pub u_star: Vec<f64>,
    pub stats: SolveStats,
}

fn batch_of(len: usize, dim: usize, what: &str) -> Result<usize> {
    if dim == 0 || !len.is_multiple_of(dim) {
        return Err(MonDeqError::Shape(format!(
            "{what} has {len} values, not a multiple of the hidden size {dim}"
        )));
    }
    Ok(len / dim)
}

/// Largest per-example relative update.
fn update_residual(next: &[f64], prev: &[f64], dim: usize) -> f64 {
    next.chunks(dim)
        .zip(prev.chunks(dim))
        .map(|(a, b)| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            d / norm(a).max(DENOM_FLOOR)
        })
        .fold(0.0, |acc: f64, r| if r.is_nan() { f64::NAN } else { acc.max(r) })
}

fn check_inverse(w: &dyn LinearOperator, inv: &dyn StructuredInverse, alpha: f64) -> Result<()> {
    if inv.dim() != w.dim_in() {
        return Err(MonDeqError::Shape(format!(
            "inverse has dimension {}, operator {}",
            inv.dim(),
            w.dim_in()
        )));
    }
    if inv.fingerprint() != w.fingerprint() {
        return Err(MonDeqError::StaleInverse);
    }
    if (inv.alpha() - alpha).abs() > 1e-12 * alpha.abs().max(1.0) {
        return Err(MonDeqError::AlphaMismatch {
            built: inv.alpha(),
            requested: alpha,
        });
    }
    Ok(())
}

/// One forward splitting run; owns the iterates so that both the solver and
/// the diagnostic trace can drive it step by step.
struct ForwardRun<'a> {
    w: &'a dyn LinearOperator,
    inv: Option<&'a dyn StructuredInverse>,
    prox: &'a Prox,
    injection: &'a [f64],
    alpha: f64,
    dim: usize,
    z: Vec<f64>,
    u: Vec<f64>,
    next: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> ForwardRun<'a> {
    fn new(
        w: &'a dyn LinearOperator,
        inv: Option<&'a dyn StructuredInverse>,
        prox: &'a Prox,
        injection: &'a [f64],
        cfg: &SolverConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let dim = w.dim_in();
        if w.dim_out() != dim || prox.len() != dim {
            return Err(MonDeqError::Shape(format!(
                "operator is {}x{}, prox acts on {}",
                w.dim_out(),
                dim,
                prox.len()
            )));
        }
        batch_of(injection.len(), dim, "injection")?;
        if injection.iter().any(|v| !v.is_finite()) {
            return Err(MonDeqError::NumericInput("forward injection"));
        }
        let inv = match cfg.method {
            SplittingMethod::ForwardBackward => None,
            SplittingMethod::PeacemanRachford => {
                let inv = inv.ok_or_else(|| {
                    MonDeqError::Config("Peaceman-Rachford needs a structured inverse".into())
                })?;
                check_inverse(w, inv, cfg.alpha)?;
                Some(inv)
            }
        };
        cfg.warn_step_bound();
        let len = injection.len();
        Ok(Self {
            w,
            inv,
            prox,
            injection,
            alpha: cfg.alpha,
            dim,
            z: vec![0.0; len],
            u: if inv.is_some() { vec![0.0; len] } else { Vec::new() },
            next: vec![0.0; len],
            scratch: vec![0.0; len],
        })
    }

    /// Advances one iteration and returns the batch update residual.
    fn step(&mut self) -> f64 {
        let (alpha, dim) = (self.alpha, self.dim);
        let c = self.injection;
        match self.inv {
            None => {
                // z⁺ = prox((1−α) z + α (W z + c))
                self.w.apply_batch(&self.z, &mut self.scratch);
                let (z, wz, prox) = (&self.z, &self.scratch, self.prox);
                par::for_each_row(&mut self.next, dim, |e, row| {
                    let base = e * dim;
                    for (i, r) in row.iter_mut().enumerate() {
                        let k = base + i;
                        *r = (1.0 - alpha) * z[k] + alpha * (wz[k] + c[k]);
                    }
                    prox.apply_in_place(row);
                });
            }
            Some(inv) => {
                // u½ = 2z − u;  z½ = V(u½ + α c);  u = 2z½ − u½;  z = prox(u)
                for k in 0..self.z.len() {
                    self.scratch[k] = 2.0 * self.z[k] - self.u[k] + alpha * c[k];
                }
                inv.solve_batch(&self.scratch, &mut self.next);
                for k in 0..self.z.len() {
                    let half = self.scratch[k] - alpha * c[k];
                    self.u[k] = 2.0 * self.next[k] - half;
                }
                self.next.copy_from_slice(&self.u);
                let prox = self.prox;
                par::for_each_row(&mut self.next, dim, |_, row| prox.apply_in_place(row));
            }
        }
        let r = update_residual(&self.next, &self.z, dim);
        std::mem::swap(&mut self.z, &mut self.next);
        r
    }

    fn preactivation(&self) -> Vec<f64> {
        let mut pre = vec![0.0; self.z.len()];
        self.w.apply_batch(&self.z, &mut pre);
        pre.iter_mut().zip(self.injection).for_each(|(p, c)| *p += c);
        pre
    }

    fn finish(self, stats: SolveStats) -> EquilibriumState {
        let preactivation = self.preactivation();
        let mut z = preactivation.clone();
        let mut j_diag = vec![0.0; z.len()];
        let prox = self.prox;
        let dim = self.dim;
        par::for_each_row(&mut z, dim, |_, row| prox.apply_in_place(row));
        par::for_each_row(&mut j_diag, dim, |e, row| {
            row.copy_from_slice(&prox.jacobian_diag(&preactivation[e * dim..(e + 1) * dim]));
        });
        let batch = z.len() / dim;
        EquilibriumState {
            z,
            preactivation,
            j_diag,
            dim,
            batch,
            stats,
        }
    }
}

fn run_forward(mut run: ForwardRun<'_>, cfg: &SolverConfig) -> EquilibriumState {
    let mut stats = SolveStats::default();
    for _ in 0..cfg.max_iter {
        let r = run.step();
        stats.iterations += 1;
        stats.update_residuals.push(r);
        if r <= cfg.epsilon {
            stats.converged = true;
            break;
        }
        if !r.is_finite() {
            break;
        }
    }
    run.finish(stats)
}

/// Forward-backward equilibrium solve. `injection` holds `U x + b` per
/// example.
pub fn solve_forward_fb(
    w: &dyn LinearOperator,
    prox: &Prox,
    injection: &[f64],
    cfg: &SolverConfig,
) -> Result<EquilibriumState> {
    let cfg = SolverConfig {
        method: SplittingMethod::ForwardBackward,
        ..*cfg
    };
    Ok(run_forward(ForwardRun::new(w, None, prox, injection, &cfg)?, &cfg))
}

/// Peaceman-Rachford equilibrium solve using a prebuilt `(I + α(I − W))⁻¹`.
pub fn solve_forward_pr(
    w: &dyn LinearOperator,
    inv: &dyn StructuredInverse,
    prox: &Prox,
    injection: &[f64],
    cfg: &SolverConfig,
) -> Result<EquilibriumState> {
    let cfg = SolverConfig {
        method: SplittingMethod::PeacemanRachford,
        ..*cfg
    };
    Ok(run_forward(ForwardRun::new(w, Some(inv), prox, injection, &cfg)?, &cfg))
}

/// Dispatches on `cfg.method`.
pub fn solve_forward(
    w: &dyn LinearOperator,
    inv: Option<&dyn StructuredInverse>,
    prox: &Prox,
    injection: &[f64],
    cfg: &SolverConfig,
) -> Result<EquilibriumState> {
    Ok(run_forward(ForwardRun::new(w, inv, prox, injection, cfg)?, cfg))
}

/// Fixed-point residual after every iteration, for convergence plots.
///
/// Runs until the residual drops to `cfg.epsilon`, becomes non-finite, or
/// `cfg.max_iter` iterations have been taken.
pub fn trace_forward(
    w: &dyn LinearOperator,
    inv: Option<&dyn StructuredInverse>,
    prox: &Prox,
    injection: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    let mut run = ForwardRun::new(w, inv, prox, injection, cfg)?;
    let mut out = Vec::new();
    for _ in 0..cfg.max_iter {
        run.step();
        let r = fixed_point_residual(w, prox, injection, &run.z)?;
        out.push(r);
        if r <= cfg.epsilon || !r.is_finite() {
            break;
        }
    }
    Ok(out)
}

/// `‖Z − prox(W Z + C)‖_F / ‖Z‖_F` over the batch (0 when both vanish).
pub fn fixed_point_residual(w: &dyn LinearOperator, prox: &Prox, injection: &[f64], z: &[f64]) -> Result<f64> {
    let dim = w.dim_in();
    if z.len() != injection.len() {
        return Err(MonDeqError::Shape(format!(
            "z has {} values, injection {}",
            z.len(),
            injection.len()
        )));
    }
    batch_of(z.len(), dim, "z")?;
    let mut f = vec![0.0; z.len()];
    w.apply_batch(z, &mut f);
    f.iter_mut().zip(injection).for_each(|(a, c)| *a += c);
    par::for_each_row(&mut f, dim, |_, row| prox.apply_in_place(row));
    let diff: f64 = z.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if diff == 0.0 {
        return Ok(0.0);
    }
    Ok(diff / norm(z).max(DENOM_FLOOR))
}

/// Resolvent of `α(D ũ − v)` on one coordinate; `j = 0` means `D = ∞`.
#[inline]
fn diag_resolvent(x: f64, v: f64, j: f64, alpha: f64) -> f64 {
    if j == 0.0 {
        0.0
    } else {
        let d = (1.0 - j) / j;
        (x + alpha * v) / (1.0 + alpha * d)
    }
}

fn check_backward(w: &dyn LinearOperator, j_diag: &[f64], v: &[f64], cfg: &SolverConfig) -> Result<usize> {
    cfg.validate()?;
    let dim = w.dim_in();
    if j_diag.len() != v.len() {
        return Err(MonDeqError::Shape(format!(
            "Jacobian diagonal has {} values, gradient {}",
            j_diag.len(),
            v.len()
        )));
    }
    batch_of(v.len(), dim, "backward gradient")?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(MonDeqError::NumericInput("backward gradient"));
    }
    Ok(dim)
}

fn reconstruct(w: &dyn LinearOperator, v: &[f64], u_tilde: Vec<f64>, stats: SolveStats) -> BackwardSolution {
    let mut u_star = vec![0.0; v.len()];
    w.apply_transpose_batch(&u_tilde, &mut u_star);
    u_star.iter_mut().zip(v).for_each(|(u, v)| *u += v);
    BackwardSolution {
        u_tilde,
        u_star,
        stats,
    }
}

/// Forward-backward solve of `(I − J W)ᵀ u = v`.
pub fn solve_backward_fb(
    w: &dyn LinearOperator,
    j_diag: &[f64],
    v: &[f64],
    cfg: &SolverConfig,
) -> Result<BackwardSolution> {
    let dim = check_backward(w, j_diag, v, cfg)?;
    cfg.warn_step_bound();
    let alpha = cfg.alpha;
    let mut u = vec![0.0; v.len()];
    let mut next = vec![0.0; v.len()];
    let mut wt = vec![0.0; v.len()];
    let mut stats = SolveStats::default();
    for _ in 0..cfg.max_iter {
        w.apply_transpose_batch(&u, &mut wt);
        for k in 0..u.len() {
            let y = (1.0 - alpha) * u[k] + alpha * wt[k];
            next[k] = diag_resolvent(y, v[k], j_diag[k], alpha);
        }
        let r = update_residual(&next, &u, dim);
        std::mem::swap(&mut u, &mut next);
        stats.iterations += 1;
        stats.update_residuals.push(r);
        if r <= cfg.epsilon {
            stats.converged = true;
            break;
        }
        if !r.is_finite() {
            break;
        }
    }
    Ok(reconstruct(w, v, u, stats))
}

/// Peaceman-Rachford solve of `(I − J W)ᵀ u = v` reusing the forward pass's
/// inverse through `Vᵀ`.
pub fn solve_backward_pr(
    w: &dyn LinearOperator,
    inv: &dyn StructuredInverse,
    j_diag: &[f64],
    v: &[f64],
    cfg: &SolverConfig,
) -> Result<BackwardSolution> {
    let dim = check_backward(w, j_diag, v, cfg)?;
    check_inverse(w, inv, cfg.alpha)?;
    let alpha = cfg.alpha;
    let len = v.len();
    let mut z = vec![0.0; len];
    let mut u = vec![0.0; len];
    let mut half = vec![0.0; len];
    let mut zh = vec![0.0; len];
    let mut next = vec![0.0; len];
    let mut stats = SolveStats::default();
    for _ in 0..cfg.max_iter {
        for k in 0..len {
            half[k] = 2.0 * z[k] - u[k];
        }
        inv.solve_transpose_batch(&half, &mut zh);
        for k in 0..len {
            u[k] = 2.0 * zh[k] - half[k];
            next[k] = diag_resolvent(u[k], v[k], j_diag[k], alpha);
        }
        let r = update_residual(&next, &z, dim);
        std::mem::swap(&mut z, &mut next);
        stats.iterations += 1;
        stats.update_residuals.push(r);
        if r <= cfg.epsilon {
            stats.converged = true;
            break;
        }
        if !r.is_finite() {
            break;
        }
    }
    Ok(reconstruct(w, v, z, stats))
}

/// Dispatches on `cfg.method`.
pub fn solve_backward(
    w: &dyn LinearOperator,
    inv: Option<&dyn StructuredInverse>,
    j_diag: &[f64],
    v: &[f64],
    cfg: &SolverConfig,
) -> Result<BackwardSolution> {
    match (cfg.method, inv) {
        (SplittingMethod::ForwardBackward, _) => solve_backward_fb(w, j_diag, v, cfg),
        (SplittingMethod::PeacemanRachford, Some(inv)) => solve_backward_pr(w, inv, j_diag, v, cfg),
        (SplittingMethod::PeacemanRachford, None) => Err(MonDeqError::Config(
            "Peaceman-Rachford needs a structured inverse".into(),
        )),
    }
}

/// Picks the candidate step size with the fewest iterations.
///
/// `measure` runs the solver at one α. Ties go to the larger α. If no
/// candidate converges the smallest one is returned with a warning.
pub fn tune_alpha<F>(candidates: &[f64], mut measure: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<SolveStats>,
{
    if candidates.is_empty() {
        return Err(MonDeqError::Config("no alpha candidates".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for &alpha in candidates {
        let stats = measure(alpha)?;
        if !stats.converged {
            continue;
        }
        best = match best {
            Some((it, a)) if it < stats.iterations || (it == stats.iterations && a >= alpha) => Some((it, a)),
            _ => Some((stats.iterations, alpha)),
        };
    }
    match best {
        Some((_, a)) => Ok(a),
        None => {
            let smallest = candidates.iter().copied().fold(f64::INFINITY, f64::min);
            log::warn!("no alpha candidate converged; falling back to {smallest}");
            Ok(smallest)
        }
    }
}
