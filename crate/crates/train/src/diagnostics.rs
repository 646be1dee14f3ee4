//! Per-iteration convergence traces of the equilibrium solvers.

use std::io::{BufRead, Write};

use mondeq::{MonDEQModel, SolverConfig, SplittingMethod};

use crate::error::{Result, TrainError};

pub const CONVERGENCE_HEADER: &str = "method,alpha,iter,residual";

/// Fixed-point residuals of one solver run; `residuals[k]` is the value after
/// iteration `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceTrace {
    pub method: SplittingMethod,
    pub alpha: f64,
    pub residuals: Vec<f64>,
}

impl ConvergenceTrace {
    /// First iteration (1-based) whose residual is at most `tol`.
    pub fn iterations_to(&self, tol: f64) -> Option<usize> {
        self.residuals.iter().position(|&r| r <= tol).map(|k| k + 1)
    }

    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(f64::NAN)
    }

    pub fn diverged(&self) -> bool {
        is_divergent(&self.residuals)
    }
}

/// A trace diverges when it goes non-finite, or when it has stalled well
/// above zero: the best residual of its second half is no better than the
/// best of its first half and the final residual exceeds 1e-2.
///
/// Under a clipping prox a divergent iteration stays bounded and oscillates,
/// so a literal "non-decreasing" test never fires; stalling is what shows.
pub fn is_divergent(residuals: &[f64]) -> bool {
    if residuals.iter().any(|r| !r.is_finite()) {
        return true;
    }
    if residuals.len() < 4 {
        return false;
    }
    let (head, tail) = residuals.split_at(residuals.len() / 2);
    let min = |s: &[f64]| s.iter().copied().fold(f64::INFINITY, f64::min);
    min(tail) >= min(head) && residuals[residuals.len() - 1] > 1e-2
}

/// Default step-size grids: 2⁻⁶…2³ for Peaceman-Rachford and 2⁻⁸…2⁻³ for
/// forward-backward.
pub fn default_grid(method: SplittingMethod) -> Vec<f64> {
    let range = match method {
        SplittingMethod::PeacemanRachford => -6..=3,
        SplittingMethod::ForwardBackward => -8..=-3,
    };
    range.map(|e| 2f64.powi(e)).collect()
}

/// Runs every `(method, α)` pair on the batch `x`, stopping each run at
/// `epsilon` or `max_iter`. Divergent runs are kept.
pub fn convergence_traces(
    model: &MonDEQModel,
    x: &[f64],
    grids: &[(SplittingMethod, Vec<f64>)],
    epsilon: f64,
    max_iter: usize,
) -> Result<Vec<ConvergenceTrace>> {
    let mut out = Vec::new();
    for (method, alphas) in grids {
        for &alpha in alphas {
            let cfg = SolverConfig::new(*method, alpha)
                .with_epsilon(epsilon)
                .with_max_iter(max_iter);
            let prep = model.prepare_for(&cfg)?;
            out.push(ConvergenceTrace {
                method: *method,
                alpha,
                residuals: model.trace(&prep, x, &cfg)?,
            });
        }
    }
    Ok(out)
}

/// The trace of `method` reaching `tol` in the fewest iterations.
pub fn best_trace(traces: &[ConvergenceTrace], method: SplittingMethod, tol: f64) -> Option<(&ConvergenceTrace, usize)> {
    traces
        .iter()
        .filter(|t| t.method == method)
        .filter_map(|t| t.iterations_to(tol).map(|k| (t, k)))
        .min_by_key(|&(_, k)| k)
}

pub fn write_convergence_csv<W: Write>(w: &mut W, traces: &[ConvergenceTrace]) -> std::io::Result<()> {
    writeln!(w, "{CONVERGENCE_HEADER}")?;
    for t in traces {
        for (k, r) in t.residuals.iter().enumerate() {
            writeln!(w, "{},{},{},{:e}", t.method, t.alpha, k + 1, r)?;
        }
    }
    Ok(())
}

/// Parses a convergence CSV back into traces, in order of first appearance.
pub fn read_convergence_csv<R: BufRead>(r: R) -> Result<Vec<ConvergenceTrace>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| TrainError::Format(e.to_string()))?
        .unwrap_or_default();
    if header.trim() != CONVERGENCE_HEADER {
        return Err(TrainError::Format(format!("unexpected header {header:?}")));
    }
    let mut out: Vec<ConvergenceTrace> = Vec::new();
    for (no, line) in lines.enumerate() {
        let line = line.map_err(|e| TrainError::Format(e.to_string()))?;
        let bad = || TrainError::Format(format!("line {}: {line:?}", no + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let method: SplittingMethod = f[0].parse().map_err(|_| bad())?;
        let alpha: f64 = f[1].parse().map_err(|_| bad())?;
        let iter: usize = f[2].parse().map_err(|_| bad())?;
        let residual: f64 = f[3].parse().map_err(|_| bad())?;
        match out.iter_mut().find(|t| t.method == method && t.alpha == alpha) {
            Some(t) if t.residuals.len() + 1 == iter => t.residuals.push(residual),
            None if iter == 1 => out.push(ConvergenceTrace {
                method,
                alpha,
                residuals: vec![residual],
            }),
            _ => return Err(bad()),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divergence_rules() {
        assert!(is_divergent(&[1.0, f64::NAN]));
        assert!(is_divergent(&[0.5, 0.2, 0.4, 0.3, 0.2, 0.6]));
        assert!(!is_divergent(&[0.5, 0.2, 0.1, 0.05, 0.01, 0.001]));
        assert!(!is_divergent(&[1e-3, 1e-3, 1e-3, 1e-3]));
    }

    #[test]
    fn grids_span_the_stated_powers() {
        let pr = default_grid(SplittingMethod::PeacemanRachford);
        assert_eq!((pr.len(), pr[0], pr[9]), (10, 1.0 / 64.0, 8.0));
        let fb = default_grid(SplittingMethod::ForwardBackward);
        assert_eq!((fb.len(), fb[0], fb[5]), (6, 1.0 / 256.0, 0.125));
    }

    #[test]
    fn csv_round_trip() {
        let traces = vec![
            ConvergenceTrace {
                method: SplittingMethod::PeacemanRachford,
                alpha: 0.5,
                residuals: vec![0.3, 1.5e-7],
            },
            ConvergenceTrace {
                method: SplittingMethod::ForwardBackward,
                alpha: 0.125,
                residuals: vec![0.9],
            },
        ];
        let mut buf = Vec::new();
        write_convergence_csv(&mut buf, &traces).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next(), Some(CONVERGENCE_HEADER));
        assert_eq!(text.lines().count(), 4);
        assert_eq!(read_convergence_csv(buf.as_slice()).unwrap(), traces);
        assert_eq!(traces[0].iterations_to(1e-6), Some(2));
        let (best, k) = best_trace(&traces, SplittingMethod::PeacemanRachford, 1e-6).unwrap();
        assert_eq!((best.alpha, k), (0.5, 2));
    }
}
