//! Weight factors with optional weight normalization.
//!
//! `W` is built from factors `A` (entering quadratically through `AᵀA`) and
//! `B` (entering linearly through `B − Bᵀ`). With normalization enabled,
//! `AᵀA` becomes `g·AᵀA/‖A‖²` and `B` becomes `h·B/‖B‖`. Both are realized
//! as an *effective* factor (`√g·A/‖A‖` and `h·B/‖B‖`) so every downstream
//! operator only ever sees effective tensors.

use crate::tensor::Tensor;

/// How a factor enters `W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorRole {
    /// Through `AᵀA`; scalar `g` multiplies the Gram term.
    Quadratic,
    /// Through `B − Bᵀ` (or as a plain linear map); scalar `h` multiplies it.
    Linear,
}

/// Smallest admissible `g`; keeps `√g` real and the Gram term nonnegative.
pub const MIN_GRAM_SCALE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub weight: Tensor,
    /// The learned scalar (`g` or `h`), shape `[1]`, when normalized.
    pub scale: Option<Tensor>,
    role: FactorRole,
}

/// Gradient of a factor split into its raw weight and scalar parts.
#[derive(Clone, Debug)]
pub struct FactorGrad {
    pub weight: Tensor,
    pub scale: Option<Tensor>,
}

impl Factor {
    pub fn new(weight: Tensor, role: FactorRole) -> Self {
        Self {
            weight,
            scale: None,
            role,
        }
    }

    pub fn role(&self) -> FactorRole {
        self.role
    }

    /// Enables normalization with the scalar chosen so the effective factor
    /// equals the current raw weight.
    pub fn normalized(mut self) -> Self {
        let n = self.weight.norm();
        let s = match self.role {
            FactorRole::Quadratic => n * n,
            FactorRole::Linear => n,
        };
        self.scale = Some(Tensor::scalar(s));
        self
    }

    pub fn is_normalized(&self) -> bool {
        self.scale.is_some()
    }

    /// Multiplier `c(s)/‖w‖` turning the raw weight into the effective one.
    fn multiplier(&self) -> f64 {
        match &self.scale {
            None => 1.0,
            Some(s) => {
                let n = self.weight.norm();
                if n == 0.0 {
                    return 0.0;
                }
                let s = s.data()[0];
                match self.role {
                    FactorRole::Quadratic => s.max(0.0).sqrt() / n,
                    FactorRole::Linear => s / n,
                }
            }
        }
    }

    pub fn effective(&self) -> Tensor {
        match self.scale {
            None => self.weight.clone(),
            Some(_) => self.weight.scaled(self.multiplier()),
        }
    }

    /// Chains a gradient with respect to the effective factor back to the
    /// raw weight and the scalar.
    pub fn chain(&self, grad_effective: &Tensor) -> FactorGrad {
        let Some(scale) = &self.scale else {
            return FactorGrad {
                weight: grad_effective.clone(),
                scale: None,
            };
        };
        let n = self.weight.norm();
        if n == 0.0 {
            return FactorGrad {
                weight: Tensor::zeros(self.weight.shape()),
                scale: Some(Tensor::scalar(0.0)),
            };
        }
        let s = scale.data()[0];
        let k = self.multiplier();
        let proj = grad_effective.dot(&self.weight);
        let mut gw = grad_effective.scaled(k);
        let shrink = k * proj / (n * n);
        gw.data_mut()
            .iter_mut()
            .zip(self.weight.data())
            .for_each(|(g, w)| *g -= shrink * w);
        let dscale = match self.role {
            FactorRole::Quadratic if s > 0.0 => proj / (2.0 * s.sqrt() * n),
            FactorRole::Quadratic => 0.0,
            FactorRole::Linear => proj / n,
        };
        FactorGrad {
            weight: gw,
            scale: Some(Tensor::scalar(dscale)),
        }
    }

    /// Keeps `g` admissible after an optimizer step.
    pub fn project(&mut self) {
        if self.role == FactorRole::Quadratic {
            if let Some(s) = &mut self.scale {
                let v = &mut s.data_mut()[0];
                if *v < MIN_GRAM_SCALE {
                    *v = MIN_GRAM_SCALE;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalization_starts_at_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
        for role in [FactorRole::Quadratic, FactorRole::Linear] {
            let f = Factor::new(w.clone(), role).normalized();
            let e = f.effective();
            for (a, b) in e.data().iter().zip(w.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let probe = Tensor::randn(&[2, 3], 1.0, &mut rng);
        for role in [FactorRole::Quadratic, FactorRole::Linear] {
            let mut f = Factor::new(w.clone(), role).normalized();
            f.scale.as_mut().unwrap().data_mut()[0] *= 1.7;
            // loss = <probe, effective>
            let g = f.chain(&probe);
            let h = 1e-6;
            for i in 0..w.len() {
                let mut p = f.clone();
                p.weight.data_mut()[i] += h;
                let mut q = f.clone();
                q.weight.data_mut()[i] -= h;
                let fd = (probe.dot(&p.effective()) - probe.dot(&q.effective())) / (2.0 * h);
                assert!((fd - g.weight.data()[i]).abs() < 1e-7, "{role:?} w[{i}]");
            }
            let mut p = f.clone();
            p.scale.as_mut().unwrap().data_mut()[0] += h;
            let mut q = f.clone();
            q.scale.as_mut().unwrap().data_mut()[0] -= h;
            let fd = (probe.dot(&p.effective()) - probe.dot(&q.effective())) / (2.0 * h);
            assert!((fd - g.scale.unwrap().data()[0]).abs() < 1e-7, "{role:?} scale");
        }
    }

    #[test]
    fn project_clamps_gram_scale() {
        let mut f = Factor::new(Tensor::scalar(1.0), FactorRole::Quadratic).normalized();
        f.scale.as_mut().unwrap().data_mut()[0] = -3.0;
        f.project();
        assert_eq!(f.scale.as_ref().unwrap().data()[0], MIN_GRAM_SCALE);
    }
}
