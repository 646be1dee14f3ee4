//! Circular-convolution monotone parameterization and its FFT inverse.
//!
//! A multi-channel circular convolution is block diagonal in the 2-D DFT
//! basis: at every frequency `k` it acts as a small `n_out × n_in` complex
//! matrix. Those per-frequency blocks are stored "permuted", i.e. as one
//! coefficient plane per channel pair, so that applying them is a handful of
//! elementwise plane products and inverting them is `s²` small LU solves.
//!
//! FFT convention: unnormalized forward transform, `1/s²` on the inverse.
//! Hidden vectors are channel-major: entry `(c, i, j)` lives at
//! `c·s² + i·s + j`.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rustfft::{Fft, FftPlanner};

use crate::error::{MonDeqError, Result};
use crate::factor::{Factor, FactorGrad, FactorRole};
use crate::operator::{LinearOperator, StructuredInverse};
use crate::par;
use crate::tensor::{fingerprint, Tensor};

/// A circular 2-D convolution (cross-correlation, kernel centered at
/// `k/2`) on `side × side` planes, optionally strided.
///
/// With stride `r`, output pixel `(i, j)` reads the unstrided result at
/// `(r·i, r·j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CircConvKernel {
    weights: Tensor,
    side: usize,
    stride: usize,
}

impl CircConvKernel {
    /// `weights` has shape `[out, in, k, k]`.
    pub fn new(weights: Tensor, side: usize) -> Result<Self> {
        Self::strided(weights, side, 1)
    }

    pub fn strided(weights: Tensor, side: usize, stride: usize) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(MonDeqError::Shape(format!(
                "convolution weights must be [out, in, k, k], got {s:?}"
            )));
        }
        let k = s[2];
        if k == 0 || k > side {
            return Err(MonDeqError::Geometry(format!(
                "kernel size {k} does not fit a {side}x{side} circular image"
            )));
        }
        if stride == 0 || !side.is_multiple_of(stride) {
            return Err(MonDeqError::Geometry(format!(
                "stride {stride} does not divide side {side}"
            )));
        }
        Ok(Self {
            weights,
            side,
            stride,
        })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_side(&self) -> usize {
        self.side / self.stride
    }

    /// Source index table: `table[p][i]` is the input row (or column) read by
    /// output row `i` through kernel tap `p`.
    fn index_table(&self) -> Vec<Vec<usize>> {
        let (k, s, r) = (self.kernel_size(), self.side, self.stride);
        let off = k / 2;
        (0..k)
            .map(|p| (0..self.out_side()).map(|i| (r * i + p + s - off) % s).collect())
            .collect()
    }

    fn w(&self, o: usize, c: usize, p: usize, q: usize) -> f64 {
        let k = self.kernel_size();
        self.weights.data()[((o * self.in_channels() + c) * k + p) * k + q]
    }

    /// Gradient of `⟨grad_out, conv(x)⟩` with respect to the weights,
    /// accumulated into `acc` (shape of the weights).
    pub fn accumulate_weight_grad(&self, grad_out: &[f64], x: &[f64], acc: &mut [f64]) {
        let (k, s, so) = (self.kernel_size(), self.side, self.out_side());
        let (ni, no) = (self.in_channels(), self.out_channels());
        let idx = self.index_table();
        for o in 0..no {
            let g = &grad_out[o * so * so..(o + 1) * so * so];
            for c in 0..ni {
                let xc = &x[c * s * s..(c + 1) * s * s];
                for p in 0..k {
                    for q in 0..k {
                        let mut sum = 0.0;
                        for (i, &row) in idx[p].iter().enumerate() {
                            let grow = &g[i * so..(i + 1) * so];
                            let xrow = &xc[row * s..(row + 1) * s];
                            for (gj, &col) in grow.iter().zip(&idx[q]) {
                                sum += gj * xrow[col];
                            }
                        }
                        acc[((o * ni + c) * k + p) * k + q] += sum;
                    }
                }
            }
        }
    }

    /// Per-frequency transfer matrices of the *unstrided* convolution.
    pub fn fourier_blocks(&self) -> FourierBlocks {
        let (k, s) = (self.kernel_size(), self.side);
        let off = k / 2;
        let (no, ni) = (self.out_channels(), self.in_channels());
        let fft = Fft2::new(s);
        let mut coeffs = vec![Complex64::new(0.0, 0.0); no * ni * s * s];
        for o in 0..no {
            for c in 0..ni {
                let plane = &mut coeffs[(o * ni + c) * s * s..(o * ni + c + 1) * s * s];
                // flipped embedding turns correlation into convolution
                for p in 0..k {
                    for q in 0..k {
                        let i = (off + s - p) % s;
                        let j = (off + s - q) % s;
                        plane[i * s + j] += self.w(o, c, p, q);
                    }
                }
                fft.forward(plane);
            }
        }
        FourierBlocks {
            side: s,
            rows: no,
            cols: ni,
            coeffs,
        }
    }
}

impl LinearOperator for CircConvKernel {
    fn dim_in(&self) -> usize {
        self.in_channels() * self.side * self.side
    }

    fn dim_out(&self) -> usize {
        self.out_channels() * self.out_side() * self.out_side()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let (k, s, so) = (self.kernel_size(), self.side, self.out_side());
        let (ni, no) = (self.in_channels(), self.out_channels());
        let idx = self.index_table();
        y.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..no {
            let yo = &mut y[o * so * so..(o + 1) * so * so];
            for c in 0..ni {
                let xc = &x[c * s * s..(c + 1) * s * s];
                for p in 0..k {
                    for q in 0..k {
                        let w = self.w(o, c, p, q);
                        if w == 0.0 {
                            continue;
                        }
                        for (i, &row) in idx[p].iter().enumerate() {
                            let yrow = &mut yo[i * so..(i + 1) * so];
                            let xrow = &xc[row * s..(row + 1) * s];
                            for (yj, &col) in yrow.iter_mut().zip(&idx[q]) {
                                *yj += w * xrow[col];
                            }
                        }
                    }
                }
            }
        }
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        let (k, s, so) = (self.kernel_size(), self.side, self.out_side());
        let (ni, no) = (self.in_channels(), self.out_channels());
        let idx = self.index_table();
        x.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..no {
            let yo = &y[o * so * so..(o + 1) * so * so];
            for c in 0..ni {
                let xc = &mut x[c * s * s..(c + 1) * s * s];
                for p in 0..k {
                    for q in 0..k {
                        let w = self.w(o, c, p, q);
                        if w == 0.0 {
                            continue;
                        }
                        for (i, &row) in idx[p].iter().enumerate() {
                            let yrow = &yo[i * so..(i + 1) * so];
                            let xrow = &mut xc[row * s..(row + 1) * s];
                            for (yj, &col) in yrow.iter().zip(&idx[q]) {
                                xrow[col] += w * yj;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-frequency blocks of an unstrided convolution, as an `s²`-indexed
/// array of complex `n_out × n_in` matrices.
pub fn conv_to_fourier_blocks(kernel: &CircConvKernel) -> Vec<DMatrix<Complex64>> {
    kernel.fourier_blocks().to_block_array()
}

/// Cached 2-D FFT plans for one plane size.
#[derive(Clone)]
pub struct Fft2 {
    side: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("side", &self.side).finish()
    }
}

impl Fft2 {
    pub fn new(side: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            side,
            fwd: planner.plan_fft_forward(side),
            inv: planner.plan_fft_inverse(side),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    fn transform(&self, fft: &dyn Fft<f64>, plane: &mut [Complex64]) {
        let s = self.side;
        debug_assert_eq!(plane.len(), s * s);
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        // rows, then columns via transpose
        fft.process_with_scratch(plane, &mut scratch);
        transpose_square(plane, s);
        fft.process_with_scratch(plane, &mut scratch);
        transpose_square(plane, s);
    }

    /// Unnormalized forward transform in place.
    pub fn forward(&self, plane: &mut [Complex64]) {
        self.transform(self.fwd.as_ref(), plane);
    }

    /// Inverse transform in place, scaled by `1/s²`.
    pub fn inverse(&self, plane: &mut [Complex64]) {
        self.transform(self.inv.as_ref(), plane);
        let scale = 1.0 / (self.side * self.side) as f64;
        plane.iter_mut().for_each(|v| *v *= scale);
    }

    /// Forward transform of `channels` real planes.
    pub fn forward_real(&self, x: &[f64]) -> Vec<Complex64> {
        let mut out: Vec<Complex64> = x.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        for plane in out.chunks_mut(self.side * self.side) {
            self.forward(plane);
        }
        out
    }

    /// Inverse transform into real planes; returns the largest discarded
    /// imaginary magnitude.
    pub fn inverse_real(&self, mut xhat: Vec<Complex64>, out: &mut [f64]) -> f64 {
        let mut residue = 0.0_f64;
        for plane in xhat.chunks_mut(self.side * self.side) {
            self.inverse(plane);
        }
        for (o, v) in out.iter_mut().zip(&xhat) {
            *o = v.re;
            residue = residue.max(v.im.abs());
        }
        residue
    }
}

fn transpose_square(a: &mut [Complex64], s: usize) {
    for i in 0..s {
        for j in i + 1..s {
            a.swap(i * s + j, j * s + i);
        }
    }
}

/// Block-diagonal operator in the Fourier domain, stored as coefficient
/// planes: entry `(o, c)` of block `k` is `coeffs[(o·cols + c)·s² + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierBlocks {
    side: usize,
    rows: usize,
    cols: usize,
    coeffs: Vec<Complex64>,
}

impl FourierBlocks {
    pub fn from_fn<F>(side: usize, rows: usize, cols: usize, f: F) -> Self
    where
        F: Fn(usize) -> DMatrix<Complex64> + Send + Sync,
    {
        let s2 = side * side;
        let blocks = par::map_indices(s2, f);
        let mut coeffs = vec![Complex64::new(0.0, 0.0); rows * cols * s2];
        for (k, b) in blocks.iter().enumerate() {
            debug_assert_eq!(b.shape(), (rows, cols));
            for o in 0..rows {
                for c in 0..cols {
                    coeffs[(o * cols + c) * s2 + k] = b[(o, c)];
                }
            }
        }
        Self {
            side,
            rows,
            cols,
            coeffs,
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn frequencies(&self) -> usize {
        self.side * self.side
    }

    pub fn block(&self, k: usize) -> DMatrix<Complex64> {
        let s2 = self.frequencies();
        DMatrix::from_fn(self.rows, self.cols, |o, c| self.coeffs[(o * self.cols + c) * s2 + k])
    }

    pub fn to_block_array(&self) -> Vec<DMatrix<Complex64>> {
        (0..self.frequencies()).map(|k| self.block(k)).collect()
    }

    /// `ŷ = D x̂` on channel-major frequency planes.
    pub fn apply_freq(&self, xhat: &[Complex64], yhat: &mut [Complex64]) {
        let s2 = self.frequencies();
        yhat.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for o in 0..self.rows {
            let y = &mut yhat[o * s2..(o + 1) * s2];
            for c in 0..self.cols {
                let d = &self.coeffs[(o * self.cols + c) * s2..(o * self.cols + c + 1) * s2];
                let x = &xhat[c * s2..(c + 1) * s2];
                for ((y, d), x) in y.iter_mut().zip(d).zip(x) {
                    *y += d * x;
                }
            }
        }
    }

    /// `x̂ = Dᴴ ŷ`
    pub fn apply_adjoint_freq(&self, yhat: &[Complex64], xhat: &mut [Complex64]) {
        let s2 = self.frequencies();
        xhat.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for o in 0..self.rows {
            let y = &yhat[o * s2..(o + 1) * s2];
            for c in 0..self.cols {
                let d = &self.coeffs[(o * self.cols + c) * s2..(o * self.cols + c + 1) * s2];
                let x = &mut xhat[c * s2..(c + 1) * s2];
                for ((x, d), y) in x.iter_mut().zip(d).zip(y) {
                    *x += d.conj() * y;
                }
            }
        }
    }

    /// Per-block inverse.
    pub fn invert(&self) -> Result<FourierBlocks> {
        if self.rows != self.cols {
            return Err(MonDeqError::Shape("only square blocks can be inverted".into()));
        }
        let s2 = self.frequencies();
        let inverses = par::map_indices(s2, |k| self.block(k).try_inverse());
        if inverses.iter().any(Option::is_none) {
            return Err(MonDeqError::Singular("Fourier block".into()));
        }
        let n = self.rows;
        let mut coeffs = vec![Complex64::new(0.0, 0.0); n * n * s2];
        for (k, b) in inverses.into_iter().enumerate() {
            let b = b.expect("checked above");
            for o in 0..n {
                for c in 0..n {
                    coeffs[(o * n + c) * s2 + k] = b[(o, c)];
                }
            }
        }
        Ok(Self {
            side: self.side,
            rows: n,
            cols: n,
            coeffs,
        })
    }
}

/// A real operator `x ↦ F⁻¹ D F x` given by Fourier blocks.
#[derive(Clone, Debug)]
pub struct FourierBlockOperator {
    blocks: FourierBlocks,
    fft: Fft2,
}

impl FourierBlockOperator {
    pub fn new(blocks: FourierBlocks) -> Self {
        let fft = Fft2::new(blocks.side);
        Self { blocks, fft }
    }

    pub fn blocks(&self) -> &FourierBlocks {
        &self.blocks
    }

    /// Applies the operator and reports the discarded imaginary residue.
    pub fn apply_with_residue(&self, x: &[f64], y: &mut [f64]) -> f64 {
        let xhat = self.fft.forward_real(x);
        let mut yhat = vec![Complex64::new(0.0, 0.0); self.blocks.rows * self.blocks.frequencies()];
        self.blocks.apply_freq(&xhat, &mut yhat);
        self.fft.inverse_real(yhat, y)
    }
}

impl LinearOperator for FourierBlockOperator {
    fn dim_in(&self) -> usize {
        self.blocks.cols * self.blocks.frequencies()
    }

    fn dim_out(&self) -> usize {
        self.blocks.rows * self.blocks.frequencies()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.apply_with_residue(x, y);
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        let yhat = self.fft.forward_real(y);
        let mut xhat = vec![Complex64::new(0.0, 0.0); self.blocks.cols * self.blocks.frequencies()];
        self.blocks.apply_adjoint_freq(&yhat, &mut xhat);
        self.fft.inverse_real(xhat, x);
    }
}

/// `(I + α(I − W))⁻¹` for a single circular-convolution `W`, as inverted
/// Fourier blocks.
#[derive(Clone, Debug)]
pub struct FourierBlockInverse {
    op: FourierBlockOperator,
    alpha: f64,
    m: f64,
    fingerprint: u64,
}

impl FourierBlockInverse {
    pub(crate) fn from_inverse_blocks(blocks: FourierBlocks, alpha: f64, m: f64, fingerprint: u64) -> Self {
        Self {
            op: FourierBlockOperator::new(blocks),
            alpha,
            m,
            fingerprint,
        }
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    /// The inverted blocks.
    pub fn blocks(&self) -> &FourierBlocks {
        self.op.blocks()
    }

    pub fn channels(&self) -> usize {
        self.op.blocks.rows
    }

    pub fn side(&self) -> usize {
        self.op.blocks.side
    }

    /// Solves one example and reports the discarded imaginary residue.
    pub fn solve_with_residue(&self, v: &[f64], x: &mut [f64]) -> f64 {
        self.op.apply_with_residue(v, x)
    }
}

impl StructuredInverse for FourierBlockInverse {
    fn dim(&self) -> usize {
        self.op.dim_in()
    }

    fn alpha(&self) -> f64 {
        self.alpha
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn solve(&self, v: &[f64], x: &mut [f64]) {
        self.op.apply(v, x);
    }

    fn solve_transpose(&self, v: &[f64], x: &mut [f64]) {
        self.op.apply_transpose(v, x);
    }
}

/// Blocks of `(1 + αm)I + α ÂᴴÂ − α B̂ + α B̂ᴴ` for unstrided `A`, `B`.
pub fn resolvent_blocks(a: &FourierBlocks, b: &FourierBlocks, m: f64, alpha: f64) -> FourierBlocks {
    let n = a.cols;
    FourierBlocks::from_fn(a.side, n, n, |k| {
        let ak = a.block(k);
        let bk = b.block(k);
        let mut out = ak.adjoint() * &ak * Complex64::new(alpha, 0.0);
        out += (bk.adjoint() - &bk) * Complex64::new(alpha, 0.0);
        for i in 0..n {
            out[(i, i)] += Complex64::new(1.0 + alpha * m, 0.0);
        }
        out
    })
}

fn check_square_pair(a: &CircConvKernel, b: &CircConvKernel) -> Result<usize> {
    let n = a.in_channels();
    if a.out_channels() != n {
        return Err(MonDeqError::Shape(format!(
            "A must map n to n channels, got {} -> {}",
            a.in_channels(),
            a.out_channels()
        )));
    }
    if b.in_channels() != n || b.out_channels() != n {
        return Err(MonDeqError::Shape(format!(
            "B must be {n} -> {n} channels like A, got {} -> {}",
            b.in_channels(),
            b.out_channels()
        )));
    }
    if a.side() != b.side() {
        return Err(MonDeqError::Shape(format!(
            "A and B act on different image sides ({} vs {})",
            a.side(),
            b.side()
        )));
    }
    if a.stride() != 1 || b.stride() != 1 {
        return Err(MonDeqError::Geometry("single-conv A and B must be unstrided".into()));
    }
    Ok(n)
}

/// Builds `(I + α(I − W))⁻¹` for `W = (1−m)I − AᵀA + B − Bᵀ`, all circular
/// convolutions on the same grid.
pub fn build_conv_inverse(a: &CircConvKernel, b: &CircConvKernel, m: f64, alpha: f64) -> Result<FourierBlockInverse> {
    check_square_pair(a, b)?;
    crate::dense::check_margin(m)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(MonDeqError::Config(format!("alpha must be positive, got {alpha}")));
    }
    let blocks = resolvent_blocks(&a.fourier_blocks(), &b.fourier_blocks(), m, alpha).invert()?;
    let fp = fingerprint([a.weights(), b.weights()], &[m]);
    Ok(FourierBlockInverse::from_inverse_blocks(blocks, alpha, m, fp))
}

/// Applies a Fourier-block inverse to a batch of `n × s × s` examples.
pub fn apply_conv_inverse(inv: &FourierBlockInverse, z: &[f64]) -> Result<Vec<f64>> {
    let dim = inv.dim();
    if dim == 0 || !z.len().is_multiple_of(dim) {
        return Err(MonDeqError::Shape(format!(
            "batch of {} values is not a multiple of the example size {dim}",
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(MonDeqError::NumericInput("convolution inverse input"));
    }
    let mut out = vec![0.0; z.len()];
    inv.solve_batch(z, &mut out);
    Ok(out)
}

/// Convolutional monotone parameterization on an `s × s` hidden grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvMonotoneParam {
    pub a: Factor,
    pub b: Factor,
    m: f64,
    side: usize,
}

/// Gradients with respect to the convolutional factors.
#[derive(Clone, Debug)]
pub struct ConvParamGrad {
    pub a: FactorGrad,
    pub b: FactorGrad,
}

impl ConvMonotoneParam {
    /// `a`, `b`: `[n, n, k, k]` kernels.
    pub fn new(a: Tensor, b: Tensor, m: f64, side: usize) -> Result<Self> {
        crate::dense::check_margin(m)?;
        let ka = CircConvKernel::new(a.clone(), side)?;
        let kb = CircConvKernel::new(b.clone(), side)?;
        check_square_pair(&ka, &kb)?;
        if ka.kernel_size() != kb.kernel_size() {
            return Err(MonDeqError::Shape("A and B must share a kernel size".into()));
        }
        Ok(Self {
            a: Factor::new(a, FactorRole::Quadratic),
            b: Factor::new(b, FactorRole::Linear),
            m,
            side,
        })
    }

    /// Kernels with entries i.i.d. `N(0, 1/(n·k²))`.
    pub fn random<R: Rng + ?Sized>(channels: usize, kernel: usize, side: usize, m: f64, rng: &mut R) -> Result<Self> {
        let std = (1.0 / (channels * kernel * kernel).max(1) as f64).sqrt();
        let shape = [channels, channels, kernel, kernel];
        Self::new(Tensor::randn(&shape, std, rng), Tensor::randn(&shape, std, rng), m, side)
    }

    pub fn with_weight_norm(mut self) -> Self {
        self.a = self.a.normalized();
        self.b = self.b.normalized();
        self
    }

    pub fn channels(&self) -> usize {
        self.a.weight.shape()[0]
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn kernel_size(&self) -> usize {
        self.a.weight.shape()[2]
    }

    pub fn dim(&self) -> usize {
        self.channels() * self.side * self.side
    }

    pub fn fingerprint(&self) -> u64 {
        let mut parts = vec![&self.a.weight, &self.b.weight];
        parts.extend(self.a.scale.iter());
        parts.extend(self.b.scale.iter());
        fingerprint(parts, &[self.m, self.side as f64])
    }

    /// The convolutions actually entering `W` (after normalization).
    pub fn effective_kernels(&self) -> (CircConvKernel, CircConvKernel) {
        let a = CircConvKernel::new(self.a.effective(), self.side).expect("validated geometry");
        let b = CircConvKernel::new(self.b.effective(), self.side).expect("validated geometry");
        (a, b)
    }

    pub fn operator(&self) -> ConvWOperator {
        let (a, b) = self.effective_kernels();
        let (fa, fb) = (a.fourier_blocks(), b.fourier_blocks());
        let n = self.channels();
        let m = self.m;
        let wblocks = FourierBlocks::from_fn(self.side, n, n, |k| {
            let ak = fa.block(k);
            let bk = fb.block(k);
            let mut out = &bk - bk.adjoint() - ak.adjoint() * &ak;
            for i in 0..n {
                out[(i, i)] += Complex64::new(1.0 - m, 0.0);
            }
            out
        });
        ConvWOperator {
            a,
            b,
            m,
            fourier: FourierBlockOperator::new(wblocks),
            fingerprint: self.fingerprint(),
        }
    }

    pub fn build_inverse(&self, alpha: f64) -> Result<FourierBlockInverse> {
        let (a, b) = self.effective_kernels();
        let mut inv = build_conv_inverse(&a, &b, self.m, alpha)?;
        inv.fingerprint = self.fingerprint();
        Ok(inv)
    }

    /// Dense `W` (test scale).
    pub fn materialize_w(&self) -> DMatrix<f64> {
        crate::operator::materialize(&DirectConvW(&self.operator()))
    }

    /// Gradient of `Σ_batch ⟨w, W z⟩` with respect to the factors.
    pub fn grad_of_bilinear(&self, ws: &[f64], zs: &[f64]) -> ConvParamGrad {
        let (a, b) = self.effective_kernels();
        let dim = self.dim();
        let batch = ws.len() / dim;
        let wlen = a.weights().len();
        // per-example partial gradients, summed in order for determinism
        let parts = par::map_indices(batch, |e| {
            let w = &ws[e * dim..(e + 1) * dim];
            let z = &zs[e * dim..(e + 1) * dim];
            let mut ga = vec![0.0; wlen];
            let mut gb = vec![0.0; wlen];
            let mut aw = vec![0.0; dim];
            let mut az = vec![0.0; dim];
            a.apply(w, &mut aw);
            a.apply(z, &mut az);
            // -⟨Aw, Az⟩
            a.accumulate_weight_grad(&aw, z, &mut ga);
            a.accumulate_weight_grad(&az, w, &mut ga);
            // ⟨w, Bz⟩ − ⟨Bw, z⟩
            b.accumulate_weight_grad(w, z, &mut gb);
            let mut neg = vec![0.0; wlen];
            b.accumulate_weight_grad(z, w, &mut neg);
            gb.iter_mut().zip(&neg).for_each(|(g, n)| *g -= n);
            (ga, gb)
        });
        let mut ga = vec![0.0; wlen];
        let mut gb = vec![0.0; wlen];
        for (pa, pb) in parts {
            ga.iter_mut().zip(&pa).for_each(|(g, p)| *g -= p);
            gb.iter_mut().zip(&pb).for_each(|(g, p)| *g += p);
        }
        let shape = a.weights().shape().to_vec();
        ConvParamGrad {
            a: self.a.chain(&Tensor::from_vec(&shape, ga).expect("shape")),
            b: self.b.chain(&Tensor::from_vec(&shape, gb).expect("shape")),
        }
    }
}

/// `W` for a single convolutional layer. Applied through its Fourier blocks;
/// [`ConvWOperator::apply_direct`] gives the FFT-free spatial route.
#[derive(Clone, Debug)]
pub struct ConvWOperator {
    a: CircConvKernel,
    b: CircConvKernel,
    m: f64,
    fourier: FourierBlockOperator,
    fingerprint: u64,
}

impl ConvWOperator {
    pub fn blocks(&self) -> &FourierBlocks {
        self.fourier.blocks()
    }

    /// `W z = (1−m) z − Aᵀ(A z) + B z − Bᵀ z` by spatial convolutions.
    pub fn apply_direct(&self, z: &[f64], out: &mut [f64]) {
        let n = z.len();
        let mut t = vec![0.0; n];
        let mut u = vec![0.0; n];
        self.a.apply(z, &mut t);
        self.a.apply_transpose(&t, &mut u);
        self.b.apply(z, out);
        self.b.apply_transpose(z, &mut t);
        for i in 0..n {
            out[i] += (1.0 - self.m) * z[i] - u[i] - t[i];
        }
    }

    pub fn apply_transpose_direct(&self, z: &[f64], out: &mut [f64]) {
        let n = z.len();
        let mut t = vec![0.0; n];
        let mut u = vec![0.0; n];
        self.a.apply(z, &mut t);
        self.a.apply_transpose(&t, &mut u);
        self.b.apply_transpose(z, out);
        self.b.apply(z, &mut t);
        for i in 0..n {
            out[i] += (1.0 - self.m) * z[i] - u[i] - t[i];
        }
    }
}

impl LinearOperator for ConvWOperator {
    fn dim_in(&self) -> usize {
        self.fourier.dim_in()
    }

    fn dim_out(&self) -> usize {
        self.fourier.dim_out()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.fourier.apply(x, y);
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        self.fourier.apply_transpose(y, x);
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

/// The spatial (FFT-free) route of a [`ConvWOperator`] as its own operator.
pub struct DirectConvW<'a>(pub &'a ConvWOperator);

impl LinearOperator for DirectConvW<'_> {
    fn dim_in(&self) -> usize {
        self.0.dim_in()
    }

    fn dim_out(&self) -> usize {
        self.0.dim_out()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.0.apply_direct(x, y);
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        self.0.apply_transpose_direct(y, x);
    }
}
