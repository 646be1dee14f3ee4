mod common;

use common::*;
use mondeq::conv::ConvMonotoneParam;
use mondeq::dense::DenseMonotoneParam;
use mondeq::operator::{operator_norm, HiddenLayout, IdentityMinus, Plane, Prox, ProxKind};
use mondeq::solvers::{
    fixed_point_residual, solve_backward_fb, solve_backward_pr, solve_forward_fb, solve_forward_pr, trace_forward,
    tune_alpha, SolverConfig,
};
use mondeq::{LinearOperator, StructuredInverse, Tensor};
use nalgebra::DMatrix;
use rand::Rng;

fn relu(n: usize) -> Prox {
    Prox::new(ProxKind::Relu, &HiddenLayout::Flat(n)).unwrap()
}

fn lipschitz(w: &dyn LinearOperator) -> f64 {
    operator_norm(&IdentityMinus(w))
}

/// Solves by forward-backward and by Peaceman-Rachford at each inverse's α
/// and checks that all land on the same fixed point.
fn agree_on(w: &dyn LinearOperator, inverses: &[Box<dyn StructuredInverse + '_>], prox: &Prox, c: &[f64], m: f64) {
    let l = lipschitz(w);
    let fb_cfg = SolverConfig::forward_backward(0.9 * 2.0 * m / (l * l))
        .with_epsilon(1e-8)
        .with_max_iter(200_000);
    let fb = solve_forward_fb(w, prox, c, &fb_cfg).unwrap();
    assert!(fb.stats.converged, "FB did not converge in {} iterations", fb.stats.iterations);
    let r = fixed_point_residual(w, prox, c, &fb.z).unwrap();
    assert!(r <= 1e-6, "FB residual {r:e}");
    for inv in inverses {
        let cfg = SolverConfig::peaceman_rachford(inv.alpha())
            .with_epsilon(1e-8)
            .with_max_iter(100_000);
        let pr = solve_forward_pr(w, inv.as_ref(), prox, c, &cfg).unwrap();
        assert!(pr.stats.converged, "PR alpha {} did not converge", inv.alpha());
        let r = fixed_point_residual(w, prox, c, &pr.z).unwrap();
        assert!(r <= 1e-6, "PR alpha {} residual {r:e}", inv.alpha());
        let d = rel_err(&pr.z, &fb.z);
        assert!(d <= 1e-5, "PR alpha {} vs FB: {d:e}", inv.alpha());
    }
}

#[test]
fn dense_methods_agree_on_twenty_models() {
    for seed in 0..20u64 {
        let mut r = rng(1000 + seed);
        let m = if seed % 2 == 0 { 0.5 } else { 1.0 };
        let p = DenseMonotoneParam::random(16, m, &mut r).unwrap();
        let w = p.operator();
        let invs: Vec<Box<dyn StructuredInverse>> = [0.1, 1.0, 10.0]
            .iter()
            .map(|&a| Box::new(p.build_inverse(a).unwrap()) as Box<dyn StructuredInverse>)
            .collect();
        let c = randn(16 * 3, &mut r);
        agree_on(&w, &invs, &relu(16), &c, m);
    }
}

#[test]
fn conv_methods_agree_on_five_models() {
    for seed in 0..5u64 {
        let mut r = rng(2000 + seed);
        let m = 1.0;
        let p = ConvMonotoneParam::random(2, 3, 8, m, &mut r).unwrap();
        let w = p.operator();
        let invs: Vec<Box<dyn StructuredInverse>> = [0.1, 1.0, 10.0]
            .iter()
            .map(|&a| Box::new(p.build_inverse(a).unwrap()) as Box<dyn StructuredInverse>)
            .collect();
        let prox = Prox::new(ProxKind::Relu, &HiddenLayout::Planes(vec![Plane { channels: 2, side: 8 }])).unwrap();
        let c = randn(p.dim() * 2, &mut r);
        agree_on(&w, &invs, &prox, &c, m);
    }
}

#[test]
fn pr_step_sizes_reach_the_same_point() {
    let mut r = rng(31);
    let p = DenseMonotoneParam::random(20, 0.5, &mut r).unwrap();
    let w = p.operator();
    let prox = relu(20);
    let c = randn(20, &mut r);
    let mut sols = Vec::new();
    for alpha in [0.02, 0.5, 8.0] {
        let inv = p.build_inverse(alpha).unwrap();
        let cfg = SolverConfig::peaceman_rachford(alpha).with_epsilon(1e-10).with_max_iter(100_000);
        let s = solve_forward_pr(&w, &inv, &prox, &c, &cfg).unwrap();
        assert!(s.stats.converged);
        assert!(fixed_point_residual(&w, &prox, &c, &s.z).unwrap() <= 1e-6);
        sols.push(s.z);
    }
    assert!(rel_err(&sols[0], &sols[2]) <= 1e-5);
    assert!(rel_err(&sols[1], &sols[2]) <= 1e-5);
}

fn fit_line(ys: &[f64]) -> (f64, f64) {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

#[test]
fn pr_converges_linearly() {
    for seed in 0..5u64 {
        let mut r = rng(40 + seed);
        let p = DenseMonotoneParam::random(16, 0.5, &mut r).unwrap();
        let w = p.operator();
        let inv = p.build_inverse(1.0).unwrap();
        let c = randn(16, &mut r);
        let cfg = SolverConfig::peaceman_rachford(1.0).with_epsilon(1e-10).with_max_iter(10_000);
        let trace = trace_forward(&w, Some(&inv), &relu(16), &c, &cfg).unwrap();
        assert!(*trace.last().unwrap() <= 1e-10);
        let logs: Vec<f64> = trace.iter().map(|r| r.max(1e-300).log10()).collect();
        let (slope, r2) = fit_line(&logs);
        assert!(slope < 0.0 && r2 > 0.9, "seed {seed}: slope {slope}, R² {r2}");
    }
}

/// A skew-dominant model (small `A`, moderate `B`), for which `4/L²` lies
/// well beyond the forward-backward step bound.
fn skew_model(seed: u64) -> DenseMonotoneParam {
    let n = 16;
    let mut r = rng(seed);
    let a = Tensor::randn(&[n, n], 0.02 / (n as f64).sqrt(), &mut r);
    let b = Tensor::randn(&[n, n], 0.5 / (n as f64).sqrt(), &mut r);
    DenseMonotoneParam::new(a, b, 0.5).unwrap()
}

fn min_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::INFINITY, f64::min)
}

#[test]
fn fb_step_size_threshold() {
    for seed in 0..5u64 {
        let p = skew_model(500 + seed);
        let w = p.operator();
        let l = lipschitz(&w);
        let c = vec![1.0; 16];
        let prox = relu(16);

        let cfg = SolverConfig::forward_backward(4.0 / (l * l)).with_epsilon(1e-300).with_max_iter(500);
        let bad = trace_forward(&w, None, &prox, &c, &cfg).unwrap();
        assert_eq!(bad.len(), 500);
        // no progress: the second half never improves on the first
        assert!(min_of(&bad[250..]) >= min_of(&bad[..250]), "seed {seed}");
        assert!(min_of(&bad) > 1e-2, "seed {seed}");

        let cfg = SolverConfig::forward_backward(p.m() / (l * l)).with_epsilon(1e-6).with_max_iter(500);
        let good = trace_forward(&w, None, &prox, &c, &cfg).unwrap();
        assert!(*good.last().unwrap() <= 1e-6, "seed {seed}: {:e}", good.last().unwrap());
    }
}

/// Dense oracle for `(I − J W)ᵀ u = v`.
fn dense_backward(w: &DMatrix<f64>, j: &[f64], v: &[f64]) -> Vec<f64> {
    let n = w.nrows();
    let jw = DMatrix::from_fn(n, n, |r, c| j[r] * w[(r, c)]);
    let sys = (DMatrix::<f64>::identity(n, n) - jw).transpose();
    gauss_solve(&sys, v)
}

fn mixed_pattern(n: usize, r: &mut impl Rng) -> Vec<f64> {
    let mut j: Vec<f64> = (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    // at least a quarter inactive
    for x in j.iter_mut().take(n.div_ceil(4)) {
        *x = 0.0;
    }
    j
}

#[test]
fn backward_solvers_match_dense_solve() {
    for (k, n) in [8usize, 16, 32].into_iter().enumerate() {
        for draw in 0..4u64 {
            let mut r = rng(600 + 10 * k as u64 + draw);
            let p = DenseMonotoneParam::random(n, 1.0, &mut r).unwrap();
            let w = p.operator();
            let wm = p.materialize_w();
            let j = mixed_pattern(n, &mut r);
            assert!(j.iter().filter(|&&x| x == 0.0).count() * 4 >= n);
            let v = randn(n, &mut r);
            let want = dense_backward(&wm, &j, &v);

            let l = lipschitz(&w);
            let cfg = SolverConfig::forward_backward(0.9 * 2.0 / (l * l))
                .with_epsilon(1e-13)
                .with_max_iter(200_000);
            let fb = solve_backward_fb(&w, &j, &v, &cfg).unwrap();
            assert!(fb.stats.converged);
            let e = rel_err(&fb.u_star, &want);
            assert!(e <= 1e-8, "FB n={n}: {e:e}");

            let inv = p.build_inverse(1.0).unwrap();
            let cfg = SolverConfig::peaceman_rachford(1.0).with_epsilon(1e-13).with_max_iter(100_000);
            let pr = solve_backward_pr(&w, &inv, &j, &v, &cfg).unwrap();
            assert!(pr.stats.converged);
            let e = rel_err(&pr.u_star, &want);
            assert!(e <= 1e-8, "PR n={n}: {e:e}");
            assert!(rel_err(&pr.u_star, &fb.u_star) <= 1e-6);
            // inactive units carry no split variable
            for (u, jj) in pr.u_tilde.iter().zip(&j) {
                if *jj == 0.0 {
                    assert_eq!(*u, 0.0);
                }
            }
        }
    }
}

#[test]
fn backward_degenerate_patterns() {
    let mut r = rng(77);
    let p = DenseMonotoneParam::random(8, 0.5, &mut r).unwrap();
    let w = p.operator();
    let inv = p.build_inverse(1.0).unwrap();
    let cfg = SolverConfig::peaceman_rachford(1.0).with_epsilon(1e-12).with_max_iter(10_000);
    let v = randn(8, &mut r);

    let inactive = solve_backward_pr(&w, &inv, &[0.0; 8], &v, &cfg).unwrap();
    assert_eq!(inactive.u_star, v);

    let zero = solve_backward_pr(&w, &inv, &mixed_pattern(8, &mut r), &[0.0; 8], &cfg).unwrap();
    assert!(zero.u_star.iter().all(|&x| x == 0.0));
}

#[test]
fn backward_never_meets_a_singular_system() {
    let mut failures = 0;
    for seed in 0..1000u64 {
        let mut r = rng(10_000 + seed);
        let n = r.random_range(2..=12);
        let m = [0.01, 0.1, 1.0][(seed % 3) as usize];
        let p = DenseMonotoneParam::random(n, m, &mut r).unwrap();
        let w = p.operator();
        let alpha = [0.25, 1.0, 4.0][(seed / 3 % 3) as usize];
        let inv = match p.build_inverse(alpha) {
            Ok(inv) => inv,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        let j = mixed_pattern(n, &mut r);
        let v = randn(n, &mut r);
        let cfg = SolverConfig::peaceman_rachford(alpha).with_epsilon(1e-10).with_max_iter(200_000);
        let sol = solve_backward_pr(&w, &inv, &j, &v, &cfg).unwrap();
        if !sol.stats.converged || sol.u_star.iter().any(|x| !x.is_finite()) {
            failures += 1;
            continue;
        }
        // residual of the linear system
        let wm = p.materialize_w();
        let u = nalgebra::DVector::from_column_slice(&sol.u_star);
        let jw = DMatrix::from_fn(n, n, |a, b| j[a] * wm[(a, b)]);
        let res = (DMatrix::<f64>::identity(n, n) - jw).transpose() * &u - nalgebra::DVector::from_column_slice(&v);
        if res.norm() > 1e-6 * (1.0 + u.norm()) {
            failures += 1;
        }
    }
    assert_eq!(failures, 0);
}

#[test]
fn tuning_picks_the_measured_argmin() {
    let mut r = rng(88);
    let p = DenseMonotoneParam::random(16, 0.5, &mut r).unwrap();
    let w = p.operator();
    let prox = relu(16);
    let c = randn(16 * 8, &mut r);
    let candidates = [1.0, 0.5, 0.25, 0.125];
    let measure = |alpha: f64| {
        let inv = p.build_inverse(alpha).unwrap();
        let cfg = SolverConfig::peaceman_rachford(alpha).with_epsilon(1e-2);
        solve_forward_pr(&w, &inv, &prox, &c, &cfg).map(|s| s.stats)
    };
    let counts: Vec<usize> = candidates.iter().map(|&a| measure(a).unwrap().iterations).collect();
    let best = counts.iter().min().unwrap();
    let want = candidates
        .iter()
        .zip(&counts)
        .filter(|(_, c)| *c == best)
        .map(|(a, _)| *a)
        .fold(0.0, f64::max);
    assert_eq!(tune_alpha(&candidates, measure).unwrap(), want);
}

#[test]
fn zero_input_gives_zero_fixed_point() {
    let mut r = rng(3);
    let p = DenseMonotoneParam::random(10, 0.3, &mut r).unwrap();
    let w = p.operator();
    let c = vec![0.0; 10];
    let fb = solve_forward_fb(&w, &relu(10), &c, &SolverConfig::forward_backward(0.05)).unwrap();
    assert_eq!(fb.stats.iterations, 1);
    assert!(fb.z.iter().all(|&x| x == 0.0));
    let inv = p.build_inverse(1.0).unwrap();
    let pr = solve_forward_pr(&w, &inv, &relu(10), &c, &SolverConfig::peaceman_rachford(1.0)).unwrap();
    assert!(pr.z.iter().all(|&x| x == 0.0));
    assert_eq!(fixed_point_residual(&w, &relu(10), &c, &pr.z).unwrap(), 0.0);
}
