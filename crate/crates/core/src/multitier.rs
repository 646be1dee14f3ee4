//! Multi-resolution monotone parameterization.
//!
//! The hidden state is a stack of tiers, tier `i` holding `n_i` channels on
//! an `s_i × s_i` grid. `W` is lower block-bidiagonal:
//!
//! ```text
//! W_ii     = (1−m)I − A_iiᵀA_ii − C_iᵀC_i + B_ii − B_iiᵀ     (no C term on the last tier)
//! W_i+1,i  = −2 A_i+1,i+1ᵀ C_i
//! ```
//!
//! where `C_i` is the strided coupling convolution from tier `i` down to tier
//! `i+1`. `I + α(I − W)` is then lower block-bidiagonal too and is solved tier
//! by tier. Its diagonal blocks on all but the last tier contain the strided
//! Gram term `α C_iᵀC_i`, which is not block diagonal in the Fourier basis;
//! [`StridedBlockInverse`] handles it with a Woodbury correction over groups
//! of aliased frequencies.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::conv::{resolvent_blocks, CircConvKernel, Fft2, FourierBlockInverse, FourierBlocks};
use crate::error::{MonDeqError, Result};
use crate::factor::{Factor, FactorGrad, FactorRole};
use crate::operator::{HiddenLayout, LinearOperator, Plane, StructuredInverse};
use crate::par;
use crate::tensor::{fingerprint, Tensor};

/// Permutation `p` of the perfect shuffle `S_{a,b}`: `(S x)[i] = x[p[i]]`,
/// i.e. it reads indices `0, b, 2b, …` then `1, 1+b, …`.
pub fn perfect_shuffle(a: usize, b: usize) -> Vec<usize> {
    let mut p = Vec::with_capacity(a * b);
    for q in 0..b {
        for t in 0..a {
            p.push(q + t * b);
        }
    }
    p
}

/// Groups of frequencies of an `s × s` plane that alias onto each other
/// under stride-`r` subsampling.
///
/// Built from the permutation `I_r ⊗ S_{s/r, s}`, which reorders the
/// row-major frequency vector into `r²` consecutive chunks of length
/// `(s/r)²`; position `g` of every chunk belongs to group `g`.
pub fn alias_groups(side: usize, stride: usize) -> Result<Vec<Vec<usize>>> {
    if stride == 0 || !side.is_multiple_of(stride) {
        return Err(MonDeqError::Geometry(format!(
            "stride {stride} does not divide side {side}"
        )));
    }
    let t = side / stride;
    let inner = perfect_shuffle(t, side);
    let chunk = t * side;
    let perm: Vec<usize> = (0..stride)
        .flat_map(|c| inner.iter().map(move |&i| c * chunk + i))
        .collect();
    let groups = t * t;
    Ok((0..groups)
        .map(|g| (0..stride * stride).map(|j| perm[j * groups + g]).collect())
        .collect())
}

fn gather(planes: &[Complex64], channels: usize, s2: usize, f: usize) -> DVector<Complex64> {
    DVector::from_fn(channels, |c, _| planes[c * s2 + f])
}

fn scatter(planes: &mut [Complex64], s2: usize, f: usize, v: &DVector<Complex64>) {
    for (c, x) in v.iter().enumerate() {
        planes[c * s2 + f] = *x;
    }
}

/// Applicator for `(A + scale · CᵀC)⁻¹` where `A` is given by its Fourier
/// blocks and `C` is a strided circular convolution.
#[derive(Clone, Debug)]
pub struct StridedBlockInverse {
    side: usize,
    channels: usize,
    a_inv: Vec<DMatrix<Complex64>>,
    a_inv_h: Vec<DMatrix<Complex64>>,
    coupling: Vec<DMatrix<Complex64>>,
    corr: Vec<DMatrix<Complex64>>,
    corr_h: Vec<DMatrix<Complex64>>,
    groups: Vec<Vec<usize>>,
    inner: Vec<DMatrix<Complex64>>,
    scale: f64,
    fft: Fft2,
}

/// Builds the strided Woodbury applicator.
///
/// In the unnormalized DFT, stride-`r` subsampling followed by its adjoint
/// averages each alias group with weight `1/r²`, so per group
///
/// ```text
/// (D + scale·Bᴴ B / r²)⁻¹ = D⁻¹ − scale·D⁻¹Bᴴ (r² I + scale·B D⁻¹ Bᴴ)⁻¹ B D⁻¹
/// ```
///
/// with `D` the group's `A` blocks and `B = [B̂_1 … B̂_r²]`.
pub fn strided_block_inverse(
    a_blocks: &FourierBlocks,
    coupling: &CircConvKernel,
    scale: f64,
) -> Result<StridedBlockInverse> {
    let n = a_blocks.rows();
    if a_blocks.cols() != n {
        return Err(MonDeqError::Shape("A blocks must be square".into()));
    }
    if coupling.in_channels() != n || coupling.side() != a_blocks.side() {
        return Err(MonDeqError::Shape(format!(
            "coupling reads {} channels on a {}-grid, A acts on {} channels on a {}-grid",
            coupling.in_channels(),
            coupling.side(),
            n,
            a_blocks.side()
        )));
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(MonDeqError::Config(format!("Woodbury scale must be nonnegative, got {scale}")));
    }
    let side = a_blocks.side();
    let r = coupling.stride();
    let s2 = side * side;
    let a_inv: Vec<DMatrix<Complex64>> = a_blocks.invert()?.to_block_array();
    let a_inv_h: Vec<DMatrix<Complex64>> = a_inv.iter().map(|m| m.adjoint()).collect();
    let cb = coupling.fourier_blocks().to_block_array();
    let corr: Vec<DMatrix<Complex64>> = (0..s2).map(|f| &a_inv[f] * cb[f].adjoint()).collect();
    let corr_h: Vec<DMatrix<Complex64>> = (0..s2).map(|f| &a_inv_h[f] * cb[f].adjoint()).collect();
    let groups = alias_groups(side, r)?;
    let n_out = coupling.out_channels();
    let r2 = (r * r) as f64;
    let inner = par::map_indices(groups.len(), |g| {
        let mut m = DMatrix::<Complex64>::identity(n_out, n_out) * Complex64::new(r2, 0.0);
        for &f in &groups[g] {
            m += &cb[f] * &corr[f] * Complex64::new(scale, 0.0);
        }
        m.try_inverse()
    });
    if inner.iter().any(Option::is_none) {
        return Err(MonDeqError::Singular("strided Woodbury inner system".into()));
    }
    Ok(StridedBlockInverse {
        side,
        channels: n,
        a_inv,
        a_inv_h,
        coupling: cb,
        corr,
        corr_h,
        groups,
        inner: inner.into_iter().map(|m| m.expect("checked above")).collect(),
        scale,
        fft: Fft2::new(side),
    })
}

impl StridedBlockInverse {
    pub fn dim(&self) -> usize {
        self.channels * self.side * self.side
    }

    fn apply_freq(&self, xhat: &[Complex64], adjoint: bool) -> Vec<Complex64> {
        let s2 = self.side * self.side;
        let n = self.channels;
        let (a_inv, corr) = if adjoint {
            (&self.a_inv_h, &self.corr_h)
        } else {
            (&self.a_inv, &self.corr)
        };
        let s = Complex64::new(self.scale, 0.0);
        let mut out = vec![Complex64::new(0.0, 0.0); n * s2];
        for (g, members) in self.groups.iter().enumerate() {
            let ys: Vec<DVector<Complex64>> = members
                .iter()
                .map(|&f| &a_inv[f] * gather(xhat, n, s2, f))
                .collect();
            let mut t = DVector::<Complex64>::zeros(self.inner[g].nrows());
            for (y, &f) in ys.iter().zip(members) {
                t += &self.coupling[f] * y;
            }
            let q = if adjoint {
                self.inner[g].adjoint() * t
            } else {
                &self.inner[g] * t
            };
            for (y, &f) in ys.into_iter().zip(members) {
                let o = y - &corr[f] * &q * s;
                scatter(&mut out, s2, f, &o);
            }
        }
        out
    }

    /// `x = (A + scale·CᵀC)⁻¹ v`
    pub fn solve(&self, v: &[f64], x: &mut [f64]) {
        let out = self.apply_freq(&self.fft.forward_real(v), false);
        self.fft.inverse_real(out, x);
    }

    /// `x = (A + scale·CᵀC)⁻ᵀ v`
    pub fn solve_transpose(&self, v: &[f64], x: &mut [f64]) {
        let out = self.apply_freq(&self.fft.forward_real(v), true);
        self.fft.inverse_real(out, x);
    }
}

/// One tier of the hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct Tier {
    pub channels: usize,
    pub side: usize,
    pub a: Factor,
    pub b: Factor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiTierParam {
    pub tiers: Vec<Tier>,
    /// `couplings[i]` maps tier `i` to tier `i+1` with stride `s_i / s_i+1`.
    pub couplings: Vec<Factor>,
    m: f64,
}

#[derive(Clone, Debug)]
pub struct MultiTierParamGrad {
    pub tiers: Vec<(FactorGrad, FactorGrad)>,
    pub couplings: Vec<FactorGrad>,
}

/// Dense blocks of a multi-tier `W` (test scale).
#[derive(Clone, Debug)]
pub struct TierBlocks {
    pub diagonal: Vec<DMatrix<f64>>,
    pub sub_diagonal: Vec<DMatrix<f64>>,
}

impl MultiTierParam {
    /// `geometry[i] = (channels, side)`; `a`, `b` per tier with shape
    /// `[n_i, n_i, k, k]`; `couplings[i]` with shape `[n_i+1, n_i, k, k]`.
    pub fn new(
        geometry: &[(usize, usize)],
        a: Vec<Tensor>,
        b: Vec<Tensor>,
        couplings: Vec<Tensor>,
        m: f64,
    ) -> Result<Self> {
        crate::dense::check_margin(m)?;
        let l = geometry.len();
        if l == 0 {
            return Err(MonDeqError::Shape("at least one tier is required".into()));
        }
        if a.len() != l || b.len() != l || couplings.len() + 1 != l {
            return Err(MonDeqError::Shape(format!(
                "{l} tiers need {l} A, {l} B and {} coupling kernels, got {}, {}, {}",
                l - 1,
                a.len(),
                b.len(),
                couplings.len()
            )));
        }
        for (i, w) in geometry.windows(2).enumerate() {
            let (hi, lo) = (w[0].1, w[1].1);
            if lo == 0 || hi % lo != 0 {
                return Err(MonDeqError::Geometry(format!(
                    "tier {} side {lo} does not evenly divide tier {i} side {hi}",
                    i + 1
                )));
            }
        }
        for (i, ((&(n, s), a), b)) in geometry.iter().zip(&a).zip(&b).enumerate() {
            for (name, t) in [("A", a), ("B", b)] {
                let k = CircConvKernel::new(t.clone(), s)?;
                if k.in_channels() != n || k.out_channels() != n {
                    return Err(MonDeqError::Shape(format!(
                        "tier {i} {name} kernel is {:?}, tier has {n} channels",
                        t.shape()
                    )));
                }
            }
        }
        for (i, c) in couplings.iter().enumerate() {
            let (n_hi, s_hi) = geometry[i];
            let (n_lo, s_lo) = geometry[i + 1];
            let k = CircConvKernel::strided(c.clone(), s_hi, s_hi / s_lo)?;
            if k.in_channels() != n_hi || k.out_channels() != n_lo {
                return Err(MonDeqError::Shape(format!(
                    "coupling {i} kernel is {:?}, expected [{n_lo}, {n_hi}, k, k]",
                    c.shape()
                )));
            }
        }
        let tiers = geometry
            .iter()
            .zip(a)
            .zip(b)
            .map(|((&(channels, side), a), b)| Tier {
                channels,
                side,
                a: Factor::new(a, FactorRole::Quadratic),
                b: Factor::new(b, FactorRole::Linear),
            })
            .collect();
        Ok(Self {
            tiers,
            couplings: couplings
                .into_iter()
                .map(|c| Factor::new(c, FactorRole::Quadratic))
                .collect(),
            m,
        })
    }

    /// Kernels with entries `N(0, 1/(n_in·k²))`.
    pub fn random<R: Rng + ?Sized>(geometry: &[(usize, usize)], kernel: usize, m: f64, rng: &mut R) -> Result<Self> {
        let std = |n_in: usize| (1.0 / (n_in * kernel * kernel).max(1) as f64).sqrt();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for &(n, _) in geometry {
            a.push(Tensor::randn(&[n, n, kernel, kernel], std(n), rng));
            b.push(Tensor::randn(&[n, n, kernel, kernel], std(n), rng));
        }
        let couplings = geometry
            .windows(2)
            .map(|w| Tensor::randn(&[w[1].0, w[0].0, kernel, kernel], std(w[0].0), rng))
            .collect();
        Self::new(geometry, a, b, couplings, m)
    }

    pub fn with_weight_norm(mut self) -> Self {
        for t in &mut self.tiers {
            t.a = t.a.clone().normalized();
            t.b = t.b.clone().normalized();
        }
        self.couplings = self.couplings.into_iter().map(Factor::normalized).collect();
        self
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn tier_count(&self) -> usize {
        self.tiers.len()
    }

    pub fn layout(&self) -> HiddenLayout {
        HiddenLayout::Planes(
            self.tiers
                .iter()
                .map(|t| Plane {
                    channels: t.channels,
                    side: t.side,
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.layout().len()
    }

    /// Start offset of each tier in a hidden vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.tiers.len() + 1);
        let mut acc = 0;
        off.push(0);
        for t in &self.tiers {
            acc += t.channels * t.side * t.side;
            off.push(acc);
        }
        off
    }

    pub fn kernel_size(&self) -> usize {
        self.tiers[0].a.weight.shape()[2]
    }

    pub fn fingerprint(&self) -> u64 {
        let mut parts: Vec<&Tensor> = Vec::new();
        for t in &self.tiers {
            parts.push(&t.a.weight);
            parts.push(&t.b.weight);
            parts.extend(t.a.scale.iter());
            parts.extend(t.b.scale.iter());
        }
        for c in &self.couplings {
            parts.push(&c.weight);
            parts.extend(c.scale.iter());
        }
        let mut scalars = vec![self.m];
        scalars.extend(self.tiers.iter().map(|t| t.side as f64));
        fingerprint(parts, &scalars)
    }

    pub fn operator(&self) -> MultiTierWOperator {
        let tiers = self
            .tiers
            .iter()
            .map(|t| {
                (
                    CircConvKernel::new(t.a.effective(), t.side).expect("validated geometry"),
                    CircConvKernel::new(t.b.effective(), t.side).expect("validated geometry"),
                )
            })
            .collect();
        let couplings = self
            .couplings
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let (hi, lo) = (self.tiers[i].side, self.tiers[i + 1].side);
                CircConvKernel::strided(c.effective(), hi, hi / lo).expect("validated geometry")
            })
            .collect();
        MultiTierWOperator {
            tiers,
            couplings,
            m: self.m,
            offsets: self.offsets(),
            fingerprint: self.fingerprint(),
        }
    }

    pub fn materialize_w(&self) -> DMatrix<f64> {
        crate::operator::materialize(&self.operator())
    }

    pub fn materialize_tier_blocks(&self) -> TierBlocks {
        let w = self.materialize_w();
        let off = self.offsets();
        let l = self.tiers.len();
        let block = |r: usize, c: usize| {
            w.view((off[r], off[c]), (off[r + 1] - off[r], off[c + 1] - off[c]))
                .into_owned()
        };
        TierBlocks {
            diagonal: (0..l).map(|i| block(i, i)).collect(),
            sub_diagonal: (0..l.saturating_sub(1)).map(|i| block(i + 1, i)).collect(),
        }
    }

    /// Tier-wise factorization of `(I + α(I − W))⁻¹`.
    pub fn build_inverse(&self, alpha: f64) -> Result<TierInversePlan> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(MonDeqError::Config(format!("alpha must be positive, got {alpha}")));
        }
        let op = self.operator();
        let l = self.tiers.len();
        let mut diag = Vec::with_capacity(l);
        for i in 0..l {
            let (a, b) = &op.tiers[i];
            let blocks = resolvent_blocks(&a.fourier_blocks(), &b.fourier_blocks(), self.m, alpha);
            if i + 1 < l {
                diag.push(TierDiagInverse::Strided(strided_block_inverse(&blocks, &op.couplings[i], alpha)?));
            } else {
                diag.push(TierDiagInverse::Plain(FourierBlockInverse::from_inverse_blocks(
                    blocks.invert()?,
                    alpha,
                    self.m,
                    self.fingerprint(),
                )));
            }
        }
        Ok(TierInversePlan {
            diag,
            op,
            alpha,
        })
    }

    /// Gradient of `Σ_batch ⟨w, W z⟩` with respect to every factor.
    pub fn grad_of_bilinear(&self, ws: &[f64], zs: &[f64]) -> MultiTierParamGrad {
        let op = self.operator();
        let off = &op.offsets;
        let dim = *off.last().expect("at least one tier");
        let batch = ws.len() / dim;
        let l = self.tiers.len();
        let tier_len: Vec<usize> = (0..l).map(|i| off[i + 1] - off[i]).collect();
        let zeros = |i: usize| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
            let wl = op.tiers[i].0.weights().len();
            let cl = if i + 1 < l { op.couplings[i].weights().len() } else { 0 };
            (vec![0.0; wl], vec![0.0; wl], vec![0.0; cl])
        };
        let parts = par::map_indices(batch, |e| {
            let w = &ws[e * dim..(e + 1) * dim];
            let z = &zs[e * dim..(e + 1) * dim];
            let wt = |i: usize| &w[off[i]..off[i + 1]];
            let zt = |i: usize| &z[off[i]..off[i + 1]];
            let mut g: Vec<_> = (0..l).map(zeros).collect();
            for i in 0..l {
                let (a, b) = &op.tiers[i];
                let n = tier_len[i];
                let mut aw = vec![0.0; n];
                let mut az = vec![0.0; n];
                a.apply(wt(i), &mut aw);
                a.apply(zt(i), &mut az);
                let mut neg = vec![0.0; g[i].0.len()];
                a.accumulate_weight_grad(&aw, zt(i), &mut neg);
                a.accumulate_weight_grad(&az, wt(i), &mut neg);
                g[i].0.iter_mut().zip(&neg).for_each(|(g, v)| *g -= v);
                b.accumulate_weight_grad(wt(i), zt(i), &mut g[i].1);
                let mut neg = vec![0.0; g[i].1.len()];
                b.accumulate_weight_grad(zt(i), wt(i), &mut neg);
                g[i].1.iter_mut().zip(&neg).for_each(|(g, v)| *g -= v);
                if i + 1 < l {
                    let c = &op.couplings[i];
                    let (a_lo, _) = &op.tiers[i + 1];
                    let nl = tier_len[i + 1];
                    let mut cw = vec![0.0; nl];
                    let mut cz = vec![0.0; nl];
                    c.apply(wt(i), &mut cw);
                    c.apply(zt(i), &mut cz);
                    // −⟨C w_i, C z_i⟩
                    let mut neg = vec![0.0; g[i].2.len()];
                    c.accumulate_weight_grad(&cw, zt(i), &mut neg);
                    c.accumulate_weight_grad(&cz, wt(i), &mut neg);
                    // −2⟨A_lo w_lo, C z_i⟩
                    let mut aw_lo = vec![0.0; nl];
                    a_lo.apply(wt(i + 1), &mut aw_lo);
                    let mut neg2 = vec![0.0; g[i].2.len()];
                    c.accumulate_weight_grad(&aw_lo, zt(i), &mut neg2);
                    g[i].2
                        .iter_mut()
                        .zip(neg.iter().zip(&neg2))
                        .for_each(|(g, (a, b))| *g -= a + 2.0 * b);
                    let mut neg3 = vec![0.0; g[i + 1].0.len()];
                    a_lo.accumulate_weight_grad(&cz, wt(i + 1), &mut neg3);
                    g[i + 1].0.iter_mut().zip(&neg3).for_each(|(g, v)| *g -= 2.0 * v);
                }
            }
            g
        });
        let mut total: Vec<_> = (0..l).map(zeros).collect();
        for p in parts {
            for (t, q) in total.iter_mut().zip(p) {
                t.0.iter_mut().zip(&q.0).for_each(|(a, b)| *a += b);
                t.1.iter_mut().zip(&q.1).for_each(|(a, b)| *a += b);
                t.2.iter_mut().zip(&q.2).for_each(|(a, b)| *a += b);
            }
        }
        let mut tiers = Vec::with_capacity(l);
        let mut couplings = Vec::with_capacity(l.saturating_sub(1));
        for (i, (ga, gb, gc)) in total.into_iter().enumerate() {
            let t = &self.tiers[i];
            let shape = t.a.weight.shape().to_vec();
            tiers.push((
                t.a.chain(&Tensor::from_vec(&shape, ga).expect("shape")),
                t.b.chain(&Tensor::from_vec(&shape, gb).expect("shape")),
            ));
            if i + 1 < l {
                let c = &self.couplings[i];
                couplings.push(c.chain(&Tensor::from_vec(c.weight.shape(), gc).expect("shape")));
            }
        }
        MultiTierParamGrad { tiers, couplings }
    }
}

/// Multi-tier `W`, applied with direct circular convolutions.
#[derive(Clone, Debug)]
pub struct MultiTierWOperator {
    tiers: Vec<(CircConvKernel, CircConvKernel)>,
    couplings: Vec<CircConvKernel>,
    m: f64,
    offsets: Vec<usize>,
    fingerprint: u64,
}

impl MultiTierWOperator {
    fn apply_impl(&self, z: &[f64], out: &mut [f64], transpose: bool) {
        let off = &self.offsets;
        let l = self.tiers.len();
        for i in 0..l {
            let (a, b) = &self.tiers[i];
            let zi = &z[off[i]..off[i + 1]];
            let n = zi.len();
            let mut t = vec![0.0; n];
            let mut gram = vec![0.0; n];
            let mut skew = vec![0.0; n];
            a.apply(zi, &mut t);
            a.apply_transpose(&t, &mut gram);
            // B − Bᵀ, or Bᵀ − B for the transpose
            b.apply(zi, &mut t);
            b.apply_transpose(zi, &mut skew);
            let sign = if transpose { -1.0 } else { 1.0 };
            let oi = &mut out[off[i]..off[i + 1]];
            for k in 0..n {
                oi[k] = (1.0 - self.m) * zi[k] - gram[k] + sign * (t[k] - skew[k]);
            }
            if i + 1 < l {
                let c = &self.couplings[i];
                let mut cz = vec![0.0; off[i + 2] - off[i + 1]];
                c.apply(zi, &mut cz);
                c.apply_transpose(&cz, &mut t);
                oi.iter_mut().zip(&t).for_each(|(o, v)| *o -= v);
            }
        }
        // off-diagonal coupling −2 A_lo ᵀ C
        for i in 0..l.saturating_sub(1) {
            let c = &self.couplings[i];
            let (a_lo, _) = &self.tiers[i + 1];
            let nl = off[i + 2] - off[i + 1];
            let mut t = vec![0.0; nl];
            let mut u = vec![0.0; nl];
            if transpose {
                a_lo.apply(&z[off[i + 1]..off[i + 2]], &mut t);
                let mut back = vec![0.0; off[i + 1] - off[i]];
                c.apply_transpose(&t, &mut back);
                out[off[i]..off[i + 1]]
                    .iter_mut()
                    .zip(&back)
                    .for_each(|(o, v)| *o -= 2.0 * v);
            } else {
                c.apply(&z[off[i]..off[i + 1]], &mut t);
                a_lo.apply_transpose(&t, &mut u);
                out[off[i + 1]..off[i + 2]]
                    .iter_mut()
                    .zip(&u)
                    .for_each(|(o, v)| *o -= 2.0 * v);
            }
        }
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

impl LinearOperator for MultiTierWOperator {
    fn dim_in(&self) -> usize {
        *self.offsets.last().expect("at least one tier")
    }

    fn dim_out(&self) -> usize {
        self.dim_in()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.apply_impl(x, y, false);
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        self.apply_impl(y, x, true);
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

#[derive(Clone, Debug)]
enum TierDiagInverse {
    Plain(FourierBlockInverse),
    Strided(StridedBlockInverse),
}

impl TierDiagInverse {
    fn solve(&self, v: &[f64], x: &mut [f64], transpose: bool) {
        match (self, transpose) {
            (TierDiagInverse::Plain(p), false) => p.solve(v, x),
            (TierDiagInverse::Plain(p), true) => p.solve_transpose(v, x),
            (TierDiagInverse::Strided(s), false) => s.solve(v, x),
            (TierDiagInverse::Strided(s), true) => s.solve_transpose(v, x),
        }
    }
}

/// Block back substitution for `(I + α(I − W))⁻¹` on a multi-tier `W`.
#[derive(Clone, Debug)]
pub struct TierInversePlan {
    diag: Vec<TierDiagInverse>,
    op: MultiTierWOperator,
    alpha: f64,
}

impl TierInversePlan {
    /// Solves a batch, checking the concatenated tier shape.
    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        let dim = self.dim();
        if !z.len().is_multiple_of(dim) || z.is_empty() {
            return Err(MonDeqError::Shape(format!(
                "batch of {} values does not match the tier layout of size {dim}",
                z.len()
            )));
        }
        let mut out = vec![0.0; z.len()];
        self.solve_batch(z, &mut out);
        Ok(out)
    }

    /// `2α A_lo ᵀ C x_hi`, the negated sub-diagonal block of `I + α(I − W)`.
    fn coupling(&self, i: usize, x: &[f64], out: &mut [f64]) {
        let c = &self.op.couplings[i];
        let (a_lo, _) = &self.op.tiers[i + 1];
        let mut t = vec![0.0; out.len()];
        c.apply(x, &mut t);
        a_lo.apply_transpose(&t, out);
        out.iter_mut().for_each(|v| *v *= 2.0 * self.alpha);
    }

    fn coupling_transpose(&self, i: usize, y: &[f64], out: &mut [f64]) {
        let c = &self.op.couplings[i];
        let (a_lo, _) = &self.op.tiers[i + 1];
        let mut t = vec![0.0; y.len()];
        a_lo.apply(y, &mut t);
        c.apply_transpose(&t, out);
        out.iter_mut().for_each(|v| *v *= 2.0 * self.alpha);
    }
}

impl StructuredInverse for TierInversePlan {
    fn dim(&self) -> usize {
        self.op.dim_in()
    }

    fn alpha(&self) -> f64 {
        self.alpha
    }

    fn fingerprint(&self) -> u64 {
        self.op.fingerprint
    }

    fn solve(&self, v: &[f64], x: &mut [f64]) {
        let off = &self.op.offsets;
        let l = self.diag.len();
        let mut rhs = v[off[0]..off[1]].to_vec();
        for i in 0..l {
            self.diag[i].solve(&rhs, &mut x[off[i]..off[i + 1]], false);
            if i + 1 < l {
                let mut m = vec![0.0; off[i + 2] - off[i + 1]];
                self.coupling(i, &x[off[i]..off[i + 1]], &mut m);
                // subtract the (positive-signed) block of I + α(I − W)
                rhs = v[off[i + 1]..off[i + 2]]
                    .iter()
                    .zip(&m)
                    .map(|(a, b)| a - b)
                    .collect();
            }
        }
    }

    fn solve_transpose(&self, v: &[f64], x: &mut [f64]) {
        let off = &self.op.offsets;
        let l = self.diag.len();
        let mut rhs = v[off[l - 1]..off[l]].to_vec();
        for i in (0..l).rev() {
            self.diag[i].solve(&rhs, &mut x[off[i]..off[i + 1]], true);
            if i > 0 {
                let mut m = vec![0.0; off[i] - off[i - 1]];
                self.coupling_transpose(i - 1, &x[off[i]..off[i + 1]], &mut m);
                rhs = v[off[i - 1]..off[i]]
                    .iter()
                    .zip(&m)
                    .map(|(a, b)| a - b)
                    .collect();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_small_cases() {
        assert_eq!(perfect_shuffle(1, 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(perfect_shuffle(4, 1), vec![0, 1, 2, 3]);
        assert_eq!(perfect_shuffle(2, 2), vec![0, 2, 1, 3]);
    }

    #[test]
    fn alias_groups_share_residues() {
        for (s, r) in [(4, 2), (8, 2), (6, 3), (4, 1)] {
            let t = s / r;
            let groups = alias_groups(s, r).unwrap();
            assert_eq!(groups.len(), t * t);
            let mut seen = vec![false; s * s];
            for g in &groups {
                assert_eq!(g.len(), r * r);
                let key = |f: usize| ((f / s) % t, (f % s) % t);
                for &f in g {
                    assert_eq!(key(f), key(g[0]));
                    assert!(!seen[f]);
                    seen[f] = true;
                }
            }
            assert!(seen.iter().all(|x| *x));
        }
        assert!(alias_groups(6, 4).is_err());
    }

    #[test]
    fn zero_kernels_give_zero_blocks_and_half_inverse() {
        let g = [(2, 8), (2, 4)];
        let a = vec![Tensor::zeros(&[2, 2, 3, 3]); 2];
        let c = vec![Tensor::zeros(&[2, 2, 3, 3])];
        let p = MultiTierParam::new(&g, a.clone(), a, c, 1.0).unwrap();
        let blocks = p.materialize_tier_blocks();
        assert!(blocks.diagonal.iter().all(|b| b.iter().all(|v| *v == 0.0)));
        assert!(blocks.sub_diagonal.iter().all(|b| b.iter().all(|v| *v == 0.0)));
        let plan = p.build_inverse(1.0).unwrap();
        let z: Vec<f64> = (0..p.dim()).map(|i| (i as f64).sin()).collect();
        let x = plan.apply(&z).unwrap();
        for (x, z) in x.iter().zip(&z) {
            assert!((x - z / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_dividing_sides_are_rejected() {
        let g = [(1, 6), (1, 4)];
        let a = vec![Tensor::zeros(&[1, 1, 3, 3]); 2];
        let c = vec![Tensor::zeros(&[1, 1, 3, 3])];
        assert!(matches!(
            MultiTierParam::new(&g, a.clone(), a, c, 1.0),
            Err(MonDeqError::Geometry(_))
        ));
    }

    #[test]
    fn tier_shape_mismatch_is_rejected() {
        let g = [(1, 4)];
        let p = MultiTierParam::new(&g, vec![Tensor::zeros(&[1, 1, 3, 3])], vec![Tensor::zeros(&[1, 1, 3, 3])], vec![], 1.0).unwrap();
        let plan = p.build_inverse(1.0).unwrap();
        assert!(matches!(plan.apply(&[0.0; 15]), Err(MonDeqError::Shape(_))));
    }
}
