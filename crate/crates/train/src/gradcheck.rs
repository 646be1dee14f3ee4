//! Central finite-difference check of every parameter gradient.

use mondeq::model::{loss_softmax_ce, InputShape, ModelSpec};
use mondeq::{MonDEQModel, SolverConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub solver_alpha: f64,
    pub solver_epsilon: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
            solver_alpha: 1.0,
            solver_epsilon: 1e-10,
        }
    }
}

/// Worst entry of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub entries: usize,
    pub failures: usize,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// `|numeric − analytic| / max(rel_tol·max(|numeric|,|analytic|), abs_tol)`;
    /// an entry passes when this is ≤ 1.
    pub worst_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub label: String,
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failures == 0)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.entries).sum()
    }

    pub fn worst_ratio(&self) -> f64 {
        self.params.iter().map(|p| p.worst_ratio).fold(0.0, f64::max)
    }
}

fn solver(cfg: &GradCheckConfig) -> SolverConfig {
    SolverConfig::peaceman_rachford(cfg.solver_alpha)
        .with_epsilon(cfg.solver_epsilon)
        .with_max_iter(100_000)
}

fn loss_at(model: &MonDEQModel, x: &[f64], labels: &[usize], cfg: &SolverConfig) -> Result<f64> {
    let prep = model.prepare_for(cfg)?;
    let out = model.forward(&prep, x, cfg)?;
    Ok(loss_softmax_ce(&out.logits, labels, model.classes())?.0)
}

/// Compares the implicit gradient of the mean cross-entropy at `(x, labels)`
/// against central differences on every parameter entry.
pub fn check_model(
    label: &str,
    model: &mut MonDEQModel,
    x: &[f64],
    labels: &[usize],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let scfg = solver(cfg);
    let prep = model.prepare_for(&scfg)?;
    let (_, grads, _) = model.loss_and_grad(&prep, x, labels, &scfg)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut params = Vec::with_capacity(names.len());
    for name in names {
        let analytic = grads
            .get(&name)
            .ok_or_else(|| crate::error::TrainError::StateMismatch(format!("no gradient for {name}")))?
            .clone();
        let mut rep = ParamReport {
            name: name.clone(),
            entries: analytic.len(),
            failures: 0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            worst_ratio: 0.0,
        };
        for i in 0..analytic.len() {
            let orig = model.param(&name).expect("listed parameter").data()[i];
            let mut perturbed = |v: f64| -> Result<f64> {
                model.param_mut(&name).expect("listed parameter").data_mut()[i] = v;
                loss_at(model, x, labels, &scfg)
            };
            let up = perturbed(orig + cfg.step);
            let down = perturbed(orig - cfg.step);
            model.param_mut(&name).expect("listed parameter").data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * cfg.step);
            let an = analytic.data()[i];
            let bound = (cfg.rel_tol * numeric.abs().max(an.abs())).max(cfg.abs_tol);
            let ratio = (numeric - an).abs() / bound;
            if !(ratio <= 1.0) {
                rep.failures += 1;
            }
            if !(ratio <= rep.worst_ratio) {
                rep.worst_ratio = ratio;
                rep.worst_index = i;
                rep.worst_analytic = an;
                rep.worst_numeric = numeric;
            }
        }
        params.push(rep);
    }
    Ok(GradCheckReport {
        label: label.to_string(),
        params,
    })
}

/// The toy models of the standard suite: dense, single convolution and two
/// tiers, each with and without weight normalization.
pub fn toy_suite() -> Vec<(String, ModelSpec, usize)> {
    let mut out = Vec::new();
    for weight_norm in [false, true] {
        let tag = if weight_norm { "+wn" } else { "" };
        let mut dense = ModelSpec::dense(InputShape { channels: 6, side: 1 }, 10, 3);
        let mut conv = ModelSpec::conv(InputShape { channels: 1, side: 8 }, 2, 3);
        let mut tiers = ModelSpec::multitier(InputShape { channels: 1, side: 8 }, vec![2, 2], 3);
        for (name, spec, batch) in [("dense", &mut dense, 3), ("conv", &mut conv, 2), ("multitier", &mut tiers, 2)] {
            spec.m = 0.5;
            spec.weight_norm = weight_norm;
            out.push((format!("{name}{tag}"), spec.clone(), batch));
        }
    }
    out
}

/// Runs [`check_model`] on every model of [`toy_suite`] with seeded inputs.
pub fn run_suite(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (label, spec, batch) in toy_suite() {
        let mut model = MonDEQModel::new(&spec, &mut rng)?;
        let x = Tensor::randn(&[batch * spec.input.len()], 1.0, &mut rng).data().to_vec();
        let labels: Vec<usize> = (0..batch).map(|i| (i * 2 + 1) % spec.classes).collect();
        reports.push(check_model(&label, &mut model, &x, &labels, cfg)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coarse_step_fails_a_tight_tolerance() {
        let spec = ModelSpec::dense(InputShape { channels: 3, side: 1 }, 4, 2);
        let mut model = MonDEQModel::new(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = [0.5, -1.0, 2.0];
        let ok = check_model("dense", &mut model, &x, &[1], &GradCheckConfig::default()).unwrap();
        assert!(ok.passed(), "{ok:?}");
        let loose = GradCheckConfig {
            step: 0.5,
            rel_tol: 1e-12,
            abs_tol: 1e-14,
            ..GradCheckConfig::default()
        };
        let bad = check_model("dense", &mut model, &x, &[1], &loose).unwrap();
        assert!(!bad.passed());
    }
}
