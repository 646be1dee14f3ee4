//! The full network: input injection, equilibrium layer, classification
//! head, and the implicit backward pass.

use nalgebra::DMatrix;
use rand::Rng;

use crate::conv::{CircConvKernel, ConvMonotoneParam};
use crate::dense::DenseMonotoneParam;
use crate::error::{MonDeqError, Result};
use crate::factor::{Factor, FactorGrad};
use crate::multitier::MultiTierParam;
use crate::operator::{HiddenLayout, LinearOperator, Plane, Prox, ProxKind, StructuredInverse};
use crate::par;
use crate::solvers::{self, EquilibriumState, SolveStats, SolverConfig, SplittingMethod};
use crate::tensor::Tensor;

/// Which parameterization of `W` the model uses.
#[derive(Clone, Debug, PartialEq)]
pub enum Variant {
    Dense { hidden: usize },
    Conv { channels: usize },
    /// Channels per tier; each tier halves the side of the previous one.
    MultiTier { channels: Vec<usize> },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Dense { .. } => "dense",
            Variant::Conv { .. } => "conv",
            Variant::MultiTier { .. } => "multitier",
        }
    }
}

/// Input image geometry. Dense models see the image flattened.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub side: usize,
}

impl InputShape {
    pub fn len(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything needed to rebuild a model's shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub input: InputShape,
    pub classes: usize,
    pub m: f64,
    pub weight_norm: bool,
    /// Convolution kernel size (ignored by dense models).
    pub kernel: usize,
    /// Average-pooling window applied before the head (1 = none).
    pub pool: usize,
    /// Zero padding added around the input before the injection.
    pub pad: usize,
    /// Force a border frame of every hidden plane to zero.
    pub zero_border: bool,
}

impl ModelSpec {
    pub fn dense(input: InputShape, hidden: usize, classes: usize) -> Self {
        Self {
            variant: Variant::Dense { hidden },
            input,
            classes,
            m: 1.0,
            weight_norm: false,
            kernel: 3,
            pool: 1,
            pad: 0,
            zero_border: false,
        }
    }

    pub fn conv(input: InputShape, channels: usize, classes: usize) -> Self {
        Self {
            variant: Variant::Conv { channels },
            pool: 4,
            ..Self::dense(input, 0, classes)
        }
    }

    pub fn multitier(input: InputShape, channels: Vec<usize>, classes: usize) -> Self {
        Self {
            variant: Variant::MultiTier { channels },
            ..Self::dense(input, 0, classes)
        }
    }

    fn hidden_side(&self) -> usize {
        self.input.side + 2 * self.pad
    }

    /// `(channels, side)` of every hidden tier.
    pub fn tier_geometry(&self) -> Result<Vec<(usize, usize)>> {
        let s = self.hidden_side();
        match &self.variant {
            Variant::Dense { .. } => Ok(Vec::new()),
            Variant::Conv { channels } => Ok(vec![(*channels, s)]),
            Variant::MultiTier { channels } => {
                let mut out = Vec::new();
                let mut side = s;
                for (i, &c) in channels.iter().enumerate() {
                    if i > 0 {
                        if !side.is_multiple_of(2) {
                            return Err(MonDeqError::Geometry(format!(
                                "tier {i} cannot halve an odd side {side}"
                            )));
                        }
                        side /= 2;
                    }
                    out.push((c, side));
                }
                Ok(out)
            }
        }
    }
}

/// The parameterization of `W`.
#[derive(Clone, Debug, PartialEq)]
pub enum Core {
    Dense(DenseMonotoneParam),
    Conv(ConvMonotoneParam),
    MultiTier(MultiTierParam),
}

impl Core {
    pub fn fingerprint(&self) -> u64 {
        match self {
            Core::Dense(p) => p.fingerprint(),
            Core::Conv(p) => p.fingerprint(),
            Core::MultiTier(p) => p.fingerprint(),
        }
    }

    pub fn operator(&self) -> Box<dyn LinearOperator> {
        match self {
            Core::Dense(p) => Box::new(p.operator()),
            Core::Conv(p) => Box::new(p.operator()),
            Core::MultiTier(p) => Box::new(p.operator()),
        }
    }

    pub fn build_inverse(&self, alpha: f64) -> Result<Box<dyn StructuredInverse>> {
        Ok(match self {
            Core::Dense(p) => Box::new(p.build_inverse(alpha)?),
            Core::Conv(p) => Box::new(p.build_inverse(alpha)?),
            Core::MultiTier(p) => Box::new(p.build_inverse(alpha)?),
        })
    }

    pub fn materialize_w(&self) -> DMatrix<f64> {
        match self {
            Core::Dense(p) => p.materialize_w(),
            Core::Conv(p) => p.materialize_w(),
            Core::MultiTier(p) => p.materialize_w(),
        }
    }

    pub fn m(&self) -> f64 {
        match self {
            Core::Dense(p) => p.m(),
            Core::Conv(p) => p.m(),
            Core::MultiTier(p) => p.m(),
        }
    }

    fn factors(&self) -> Vec<(String, &Factor)> {
        match self {
            Core::Dense(p) => vec![("core.A".into(), &p.a), ("core.B".into(), &p.b)],
            Core::Conv(p) => vec![("core.A".into(), &p.a), ("core.B".into(), &p.b)],
            Core::MultiTier(p) => {
                let mut out = Vec::new();
                for (i, t) in p.tiers.iter().enumerate() {
                    out.push((format!("tier{i}.A"), &t.a));
                    out.push((format!("tier{i}.B"), &t.b));
                }
                for (i, c) in p.couplings.iter().enumerate() {
                    out.push((format!("coupling{i}.A"), c));
                }
                out
            }
        }
    }

    fn factors_mut(&mut self) -> Vec<(String, &mut Factor)> {
        match self {
            Core::Dense(p) => vec![("core.A".into(), &mut p.a), ("core.B".into(), &mut p.b)],
            Core::Conv(p) => vec![("core.A".into(), &mut p.a), ("core.B".into(), &mut p.b)],
            Core::MultiTier(p) => {
                let mut out = Vec::new();
                for (i, t) in p.tiers.iter_mut().enumerate() {
                    out.push((format!("tier{i}.A"), &mut t.a));
                    out.push((format!("tier{i}.B"), &mut t.b));
                }
                for (i, c) in p.couplings.iter_mut().enumerate() {
                    out.push((format!("coupling{i}.A"), c));
                }
                out
            }
        }
    }
}

fn scale_suffix(name: &str) -> &'static str {
    if name.ends_with(".B") {
        ".h"
    } else {
        ".g"
    }
}

/// Named gradients, in the same order as [`MonDEQModel::named_params`].
#[derive(Clone, Debug, Default)]
pub struct GradientBundle {
    entries: Vec<(String, Tensor)>,
    /// Iterations of the backward linear solve that produced these.
    pub backward_stats: SolveStats,
}

impl GradientBundle {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, t)| t.norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    fn push_factor(&mut self, name: &str, g: FactorGrad) {
        let suffix = scale_suffix(name);
        self.push(name, g.weight);
        if let Some(s) = g.scale {
            self.push(format!("{name}{suffix}"), s);
        }
    }
}

/// The operator (and optionally the inverse) built from the current
/// parameters. Rebuild after every parameter update.
pub struct Prepared {
    op: Box<dyn LinearOperator>,
    inverse: Option<Box<dyn StructuredInverse>>,
    prox: Prox,
    fingerprint: u64,
}

impl Prepared {
    pub fn operator(&self) -> &dyn LinearOperator {
        self.op.as_ref()
    }

    pub fn inverse(&self) -> Option<&dyn StructuredInverse> {
        self.inverse.as_deref()
    }

    pub fn prox(&self) -> &Prox {
        &self.prox
    }

    pub fn alpha(&self) -> Option<f64> {
        self.inverse.as_ref().map(|i| i.alpha())
    }
}

/// Output of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `batch × classes`.
    pub logits: Vec<f64>,
    pub state: EquilibriumState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonDEQModel {
    spec: ModelSpec,
    pub core: Core,
    /// Dense `[n, d]` matrix or `[n_0, c_in, k, k]` convolution into the
    /// first tier.
    pub injection: Tensor,
    /// Per unit (dense) or per channel, tiers concatenated.
    pub bias: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl MonDEQModel {
    pub fn new<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        if spec.classes == 0 || spec.input.is_empty() {
            return Err(MonDeqError::Shape("model needs a nonempty input and at least one class".into()));
        }
        let d = spec.input.len();
        let (core, injection, bias_len) = match &spec.variant {
            Variant::Dense { hidden } => {
                if spec.pool != 1 || spec.pad != 0 || spec.zero_border {
                    return Err(MonDeqError::Geometry(
                        "dense models support neither pooling, padding nor a zero border".into(),
                    ));
                }
                let mut p = DenseMonotoneParam::random(*hidden, spec.m, rng)?;
                if spec.weight_norm {
                    p = p.with_weight_norm();
                }
                let u = Tensor::uniform(&[*hidden, d], 1.0 / (d as f64).sqrt(), rng);
                (Core::Dense(p), u, *hidden)
            }
            Variant::Conv { .. } | Variant::MultiTier { .. } => {
                let geometry = spec.tier_geometry()?;
                if geometry.is_empty() {
                    return Err(MonDeqError::Shape("at least one tier is required".into()));
                }
                let core = match &spec.variant {
                    Variant::Conv { channels } => {
                        let mut p = ConvMonotoneParam::random(*channels, spec.kernel, geometry[0].1, spec.m, rng)?;
                        if spec.weight_norm {
                            p = p.with_weight_norm();
                        }
                        Core::Conv(p)
                    }
                    _ => {
                        let mut p = MultiTierParam::random(&geometry, spec.kernel, spec.m, rng)?;
                        if spec.weight_norm {
                            p = p.with_weight_norm();
                        }
                        Core::MultiTier(p)
                    }
                };
                let fan_in = spec.input.channels * spec.kernel * spec.kernel;
                let u = Tensor::uniform(
                    &[geometry[0].0, spec.input.channels, spec.kernel, spec.kernel],
                    1.0 / (fan_in as f64).sqrt(),
                    rng,
                );
                let bias_len = geometry.iter().map(|g| g.0).sum();
                (core, u, bias_len)
            }
        };
        let bias = Tensor::uniform(&[bias_len], 1.0 / (d as f64).sqrt(), rng);
        let mut model = Self {
            spec: spec.clone(),
            core,
            injection,
            bias,
            head_weight: Tensor::zeros(&[0]),
            head_bias: Tensor::zeros(&[0]),
        };
        let feat = model.feature_dim()?;
        let bound = 1.0 / (feat as f64).sqrt();
        model.head_weight = Tensor::uniform(&[spec.classes, feat], bound, rng);
        model.head_bias = Tensor::uniform(&[spec.classes], bound, rng);
        model.prox()?;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input.len()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn layout(&self) -> HiddenLayout {
        match &self.core {
            Core::Dense(p) => HiddenLayout::Flat(p.dim()),
            Core::Conv(p) => HiddenLayout::Planes(vec![Plane {
                channels: p.channels(),
                side: p.side(),
            }]),
            Core::MultiTier(p) => p.layout(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.layout().len()
    }

    pub fn prox_kind(&self) -> ProxKind {
        if self.spec.zero_border {
            // AᵀA with k×k kernels reaches 2k−1 pixels
            ProxKind::zero_border_for_kernel(2 * self.spec.kernel - 1)
        } else {
            ProxKind::Relu
        }
    }

    pub fn prox(&self) -> Result<Prox> {
        Prox::new(self.prox_kind(), &self.layout())
    }

    /// The last tier (or the whole hidden state) as `(offset, plane)`.
    fn head_plane(&self) -> (usize, Option<Plane>) {
        match self.layout() {
            HiddenLayout::Flat(_) => (0, None),
            HiddenLayout::Planes(planes) => {
                let last = *planes.last().expect("at least one plane");
                (self.hidden_dim() - last.len(), Some(last))
            }
        }
    }

    fn feature_dim(&self) -> Result<usize> {
        let p = self.spec.pool;
        match self.head_plane() {
            (_, None) => Ok(self.hidden_dim()),
            (_, Some(plane)) => {
                if p == 0 || plane.side % p != 0 {
                    return Err(MonDeqError::Geometry(format!(
                        "pool {p} does not divide the head plane side {}",
                        plane.side
                    )));
                }
                Ok(plane.channels * (plane.side / p).pow(2))
            }
        }
    }

    /// Every trainable tensor with its name.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, f) in self.core.factors() {
            let suffix = scale_suffix(&name);
            out.push((name.clone(), &f.weight));
            if let Some(s) = &f.scale {
                out.push((format!("{name}{suffix}"), s));
            }
        }
        out.push(("U".into(), &self.injection));
        out.push(("b".into(), &self.bias));
        out.push(("head.W".into(), &self.head_weight));
        out.push(("head.b".into(), &self.head_bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (name, f) in self.core.factors_mut() {
            let suffix = scale_suffix(&name);
            out.push((name.clone(), &mut f.weight));
            if let Some(s) = &mut f.scale {
                out.push((format!("{name}{suffix}"), s));
            }
        }
        out.push(("U".into(), &mut self.injection));
        out.push(("b".into(), &mut self.bias));
        out.push(("head.W".into(), &mut self.head_weight));
        out.push(("head.b".into(), &mut self.head_bias));
        out
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.named_params().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.named_params_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Restores admissibility after an optimizer step (clamps `g ≥ 1e-12`).
    pub fn project_constraints(&mut self) {
        for (_, f) in self.core.factors_mut() {
            f.project();
        }
    }

    /// Builds `W` and, when `alpha` is given, `(I + α(I − W))⁻¹`.
    pub fn prepare(&self, alpha: Option<f64>) -> Result<Prepared> {
        let inverse = alpha.map(|a| self.core.build_inverse(a)).transpose()?;
        Ok(Prepared {
            op: self.core.operator(),
            inverse,
            prox: self.prox()?,
            fingerprint: self.core.fingerprint(),
        })
    }

    /// Prepares exactly what `cfg` needs (an inverse only for
    /// Peaceman-Rachford).
    pub fn prepare_for(&self, cfg: &SolverConfig) -> Result<Prepared> {
        match cfg.method {
            SplittingMethod::ForwardBackward => self.prepare(None),
            SplittingMethod::PeacemanRachford => self.prepare(Some(cfg.alpha)),
        }
    }

    fn check_prepared(&self, prep: &Prepared) -> Result<()> {
        if prep.fingerprint != self.core.fingerprint() {
            return Err(MonDeqError::StaleInverse);
        }
        Ok(())
    }

    fn batch_of(&self, x: &[f64]) -> Result<usize> {
        let d = self.input_dim();
        if x.is_empty() || !x.len().is_multiple_of(d) {
            return Err(MonDeqError::Shape(format!(
                "input batch of {} values is not a multiple of the input size {d}",
                x.len()
            )));
        }
        Ok(x.len() / d)
    }

    fn padded(&self, x: &[f64]) -> Vec<f64> {
        let (c, s, p) = (self.spec.input.channels, self.spec.input.side, self.spec.pad);
        if p == 0 {
            return x.to_vec();
        }
        let sp = s + 2 * p;
        let mut out = vec![0.0; c * sp * sp];
        for ch in 0..c {
            for i in 0..s {
                let src = &x[(ch * s + i) * s..(ch * s + i + 1) * s];
                let dst = (ch * sp + i + p) * sp + p;
                out[dst..dst + s].copy_from_slice(src);
            }
        }
        out
    }

    fn injection_kernel(&self) -> Option<CircConvKernel> {
        match &self.core {
            Core::Dense(_) => None,
            _ => {
                let side = self.spec.input.side + 2 * self.spec.pad;
                Some(CircConvKernel::new(self.injection.clone(), side).expect("validated geometry"))
            }
        }
    }

    /// `U x + b` for a batch.
    pub fn inject(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = self.batch_of(x)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MonDeqError::NumericInput("model input"));
        }
        let d = self.input_dim();
        let n = self.hidden_dim();
        let mut out = vec![0.0; batch * n];
        let layout = self.layout();
        let kernel = self.injection_kernel();
        let u = self.injection.data();
        let b = self.bias.data();
        par::for_each_row(&mut out, n, |e, row| {
            let xe = &x[e * d..(e + 1) * d];
            match (&layout, &kernel) {
                (HiddenLayout::Flat(_), _) => {
                    for (i, r) in row.iter_mut().enumerate() {
                        let ui = &u[i * d..(i + 1) * d];
                        *r = ui.iter().zip(xe).map(|(a, b)| a * b).sum::<f64>() + b[i];
                    }
                }
                (HiddenLayout::Planes(planes), Some(k)) => {
                    let first = planes[0].len();
                    k.apply(&self.padded(xe), &mut row[..first]);
                    let mut off = 0;
                    let mut boff = 0;
                    for plane in planes {
                        let s2 = plane.side * plane.side;
                        for c in 0..plane.channels {
                            row[off + c * s2..off + (c + 1) * s2]
                                .iter_mut()
                                .for_each(|v| *v += b[boff + c]);
                        }
                        off += plane.len();
                        boff += plane.channels;
                    }
                }
                (HiddenLayout::Planes(_), None) => unreachable!("planar models carry a kernel"),
            }
        });
        Ok(out)
    }

    fn features(&self, z: &[f64]) -> Vec<f64> {
        let (off, plane) = self.head_plane();
        let Some(plane) = plane else {
            return z.to_vec();
        };
        let p = self.spec.pool;
        let region = &z[off..off + plane.len()];
        if p == 1 {
            return region.to_vec();
        }
        let (s, so) = (plane.side, plane.side / p);
        let mut f = vec![0.0; plane.channels * so * so];
        let inv = 1.0 / (p * p) as f64;
        for c in 0..plane.channels {
            for i in 0..s {
                for j in 0..s {
                    f[(c * so + i / p) * so + j / p] += inv * region[(c * s + i) * s + j];
                }
            }
        }
        f
    }

    /// Adjoint of [`Self::features`], accumulated into `v`.
    fn features_adjoint(&self, g: &[f64], v: &mut [f64]) {
        let (off, plane) = self.head_plane();
        let Some(plane) = plane else {
            v.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            return;
        };
        let p = self.spec.pool;
        let (s, so) = (plane.side, plane.side / p);
        let inv = 1.0 / (p * p) as f64;
        let region = &mut v[off..off + plane.len()];
        for c in 0..plane.channels {
            for i in 0..s {
                for j in 0..s {
                    region[(c * s + i) * s + j] += inv * g[(c * so + i / p) * so + j / p];
                }
            }
        }
    }

    /// Logits from equilibrium states (`batch × hidden`).
    pub fn head(&self, z: &[f64]) -> Vec<f64> {
        let n = self.hidden_dim();
        let k = self.spec.classes;
        let feat = self.head_weight.shape()[1];
        let w = self.head_weight.data();
        let bo = self.head_bias.data();
        let batch = z.len() / n;
        let mut out = vec![0.0; batch * k];
        par::for_each_row(&mut out, k, |e, row| {
            let f = self.features(&z[e * n..(e + 1) * n]);
            for (c, r) in row.iter_mut().enumerate() {
                *r = w[c * feat..(c + 1) * feat].iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() + bo[c];
            }
        });
        out
    }

    /// Runs the equilibrium solver without treating non-convergence as an
    /// error.
    pub fn solve_equilibrium(&self, prep: &Prepared, x: &[f64], cfg: &SolverConfig) -> Result<EquilibriumState> {
        self.check_prepared(prep)?;
        let c = self.inject(x)?;
        solvers::solve_forward(prep.operator(), prep.inverse(), prep.prox(), &c, cfg)
    }

    pub fn forward(&self, prep: &Prepared, x: &[f64], cfg: &SolverConfig) -> Result<ForwardOutput> {
        let state = self.solve_equilibrium(prep, x, cfg)?;
        if !state.stats.converged {
            return Err(MonDeqError::NotConverged {
                phase: "forward",
                stats: state.stats,
            });
        }
        Ok(ForwardOutput {
            logits: self.head(&state.z),
            state,
        })
    }

    /// `‖z − prox(W z + U x + b)‖ / ‖z‖` over a batch.
    pub fn fixed_point_residual(&self, prep: &Prepared, x: &[f64], z: &[f64]) -> Result<f64> {
        self.check_prepared(prep)?;
        let c = self.inject(x)?;
        solvers::fixed_point_residual(prep.operator(), prep.prox(), &c, z)
    }

    /// Fixed-point residual after each solver iteration.
    pub fn trace(&self, prep: &Prepared, x: &[f64], cfg: &SolverConfig) -> Result<Vec<f64>> {
        self.check_prepared(prep)?;
        let c = self.inject(x)?;
        solvers::trace_forward(prep.operator(), prep.inverse(), prep.prox(), &c, cfg)
    }

    /// Gradients of the loss whose logit gradient is `grad_logits`, through
    /// the equilibrium in `state` (which must come from `x`).
    pub fn backward(
        &self,
        prep: &Prepared,
        state: &EquilibriumState,
        x: &[f64],
        grad_logits: &[f64],
        cfg: &SolverConfig,
    ) -> Result<GradientBundle> {
        self.check_prepared(prep)?;
        let batch = self.batch_of(x)?;
        let n = self.hidden_dim();
        let k = self.spec.classes;
        if state.batch != batch || state.dim != n || grad_logits.len() != batch * k {
            return Err(MonDeqError::Shape(format!(
                "backward got state {}x{}, input batch {batch}, {} logit gradients",
                state.batch,
                state.dim,
                grad_logits.len()
            )));
        }
        let d = self.input_dim();
        let feat = self.head_weight.shape()[1];

        // head
        let mut g_wo = vec![0.0; k * feat];
        let mut g_bo = vec![0.0; k];
        let mut v = vec![0.0; batch * n];
        let wo = self.head_weight.data();
        for e in 0..batch {
            let f = self.features(&state.z[e * n..(e + 1) * n]);
            let g = &grad_logits[e * k..(e + 1) * k];
            let mut gf = vec![0.0; feat];
            for c in 0..k {
                g_bo[c] += g[c];
                let row = &mut g_wo[c * feat..(c + 1) * feat];
                row.iter_mut().zip(&f).for_each(|(a, b)| *a += g[c] * b);
                gf.iter_mut()
                    .zip(&wo[c * feat..(c + 1) * feat])
                    .for_each(|(a, b)| *a += g[c] * b);
            }
            self.features_adjoint(&gf, &mut v[e * n..(e + 1) * n]);
        }

        // implicit layer
        let sol = solvers::solve_backward(prep.operator(), prep.inverse(), &state.j_diag, &v, cfg)?;
        if !sol.stats.converged {
            return Err(MonDeqError::NotConverged {
                phase: "backward",
                stats: sol.stats,
            });
        }
        let w: Vec<f64> = sol
            .u_star
            .iter()
            .zip(&state.j_diag)
            .map(|(u, j)| u * j)
            .collect();

        let mut bundle = GradientBundle {
            backward_stats: sol.stats.clone(),
            ..GradientBundle::default()
        };
        let layout = self.layout();
        let mut g_b = vec![0.0; self.bias.len()];
        let mut g_u = vec![0.0; self.injection.len()];
        match &self.core {
            Core::Dense(p) => {
                let mut g = DMatrix::<f64>::zeros(n, n);
                for e in 0..batch {
                    let we = &w[e * n..(e + 1) * n];
                    let ze = &state.z[e * n..(e + 1) * n];
                    let xe = &x[e * d..(e + 1) * d];
                    for i in 0..n {
                        if we[i] == 0.0 {
                            continue;
                        }
                        g_b[i] += we[i];
                        for j in 0..n {
                            g[(i, j)] += we[i] * ze[j];
                        }
                        g_u[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(xe)
                            .for_each(|(a, b)| *a += we[i] * b);
                    }
                }
                let pg = p.grad_through_parameterization(&g)?;
                bundle.push_factor("core.A", pg.a);
                bundle.push_factor("core.B", pg.b);
            }
            Core::Conv(p) => {
                let pg = p.grad_of_bilinear(&w, &state.z);
                bundle.push_factor("core.A", pg.a);
                bundle.push_factor("core.B", pg.b);
            }
            Core::MultiTier(p) => {
                let pg = p.grad_of_bilinear(&w, &state.z);
                for (i, (ga, gb)) in pg.tiers.into_iter().enumerate() {
                    bundle.push_factor(&format!("tier{i}.A"), ga);
                    bundle.push_factor(&format!("tier{i}.B"), gb);
                }
                for (i, gc) in pg.couplings.into_iter().enumerate() {
                    bundle.push_factor(&format!("coupling{i}.A"), gc);
                }
            }
        }
        if let (HiddenLayout::Planes(planes), Some(kernel)) = (&layout, self.injection_kernel()) {
            let first = planes[0].len();
            for e in 0..batch {
                let we = &w[e * n..(e + 1) * n];
                kernel.accumulate_weight_grad(&we[..first], &self.padded(&x[e * d..(e + 1) * d]), &mut g_u);
                let mut off = 0;
                let mut boff = 0;
                for plane in planes {
                    let s2 = plane.side * plane.side;
                    for c in 0..plane.channels {
                        g_b[boff + c] += we[off + c * s2..off + (c + 1) * s2].iter().sum::<f64>();
                    }
                    off += plane.len();
                    boff += plane.channels;
                }
            }
        }
        bundle.push("U", Tensor::from_vec(self.injection.shape(), g_u)?);
        bundle.push("b", Tensor::from_vec(self.bias.shape(), g_b)?);
        bundle.push("head.W", Tensor::from_vec(self.head_weight.shape(), g_wo)?);
        bundle.push("head.b", Tensor::from_vec(self.head_bias.shape(), g_bo)?);
        Ok(bundle)
    }

    /// Mean softmax cross-entropy and its gradient in one call.
    pub fn loss_and_grad(
        &self,
        prep: &Prepared,
        x: &[f64],
        labels: &[usize],
        cfg: &SolverConfig,
    ) -> Result<(f64, GradientBundle, ForwardOutput)> {
        let out = self.forward(prep, x, cfg)?;
        let (loss, g) = loss_softmax_ce(&out.logits, labels, self.spec.classes)?;
        let grads = self.backward(prep, &out.state, x, &g, cfg)?;
        Ok((loss, grads, out))
    }
}

/// 0/1 Jacobian diagonal of the prox at `pre`.
pub fn jacobian_diag(pre: &[f64], kind: ProxKind, layout: &HiddenLayout) -> Result<Vec<f64>> {
    if pre.len() != layout.len() {
        return Err(MonDeqError::Shape(format!(
            "preactivation has {} values, layout {}",
            pre.len(),
            layout.len()
        )));
    }
    Ok(Prox::new(kind, layout)?.jacobian_diag(pre))
}

/// Mean softmax cross-entropy over a batch and `(softmax − onehot)/batch`.
pub fn loss_softmax_ce(logits: &[f64], labels: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    if classes == 0 || logits.len() != labels.len() * classes || labels.is_empty() {
        return Err(MonDeqError::Shape(format!(
            "{} logits for {} labels and {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(MonDeqError::InvalidLabel { label, classes });
    }
    let batch = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (e, &y) in labels.iter().enumerate() {
        let row = &logits[e * classes..(e + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // log Σ exp(l − max), split so the true class term stays exact
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != y)
            .map(|(_, l)| (l - max).exp())
            .sum();
        let top = (row[y] - max).exp();
        let lse = if row[y] == max {
            rest.ln_1p()
        } else {
            (top + rest).ln() + max - row[y]
        };
        loss += lse;
        let z = top + rest;
        for c in 0..classes {
            let p = (row[c] - max).exp() / z;
            grad[e * classes + c] = (p - if c == y { 1.0 } else { 0.0 }) / batch;
        }
    }
    Ok((loss / batch, grad))
}
