mod common;

use common::*;
use mondeq::checkpoint::{model_from_checkpoint, model_to_checkpoint, Checkpoint};
use mondeq::conv::{CircConvKernel, ConvMonotoneParam};
use mondeq::dense::DenseMonotoneParam;
use mondeq::model::{loss_softmax_ce, InputShape, ModelSpec};
use mondeq::multitier::{perfect_shuffle, MultiTierParam};
use mondeq::operator::{HiddenLayout, Plane, Prox, ProxKind};
use mondeq::solvers::{solve_forward_pr, SolverConfig};
use mondeq::{LinearOperator, MonDEQModel, StructuredInverse, Tensor};
use proptest::prelude::*;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn adjoint_gap(op: &dyn LinearOperator, seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = randn(op.dim_in(), &mut r);
    let y = randn(op.dim_out(), &mut r);
    let mut ax = vec![0.0; op.dim_out()];
    let mut aty = vec![0.0; op.dim_in()];
    op.apply(&x, &mut ax);
    op.apply_transpose(&y, &mut aty);
    let (l, rr) = (dot(&ax, &y), dot(&x, &aty));
    (l - rr).abs() / l.abs().max(rr.abs()).max(1.0)
}

/// `‖(I + α(I − W)) V b − b‖ / ‖b‖` and the same for the transpose.
fn inverse_gaps(w: &dyn LinearOperator, inv: &dyn StructuredInverse, seed: u64) -> (f64, f64) {
    let n = inv.dim();
    let a = inv.alpha();
    let b = randn(n, &mut rng(seed));
    let system = |x: &[f64], transpose: bool| {
        let mut wx = vec![0.0; n];
        if transpose {
            w.apply_transpose(x, &mut wx);
        } else {
            w.apply(x, &mut wx);
        }
        x.iter().zip(&wx).map(|(xi, wi)| xi + a * (xi - wi)).collect::<Vec<_>>()
    };
    let mut x = vec![0.0; n];
    inv.solve(&b, &mut x);
    let fwd = rel_err(&system(&x, false), &b);
    inv.solve_transpose(&b, &mut x);
    let bwd = rel_err(&system(&x, true), &b);
    (fwd, bwd)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dense_parameterization_is_monotone(n in 1usize..24, mi in 0usize..3, seed in any::<u64>()) {
        let m = [0.01, 0.1, 1.0][mi];
        let p = DenseMonotoneParam::random(n, m, &mut rng(seed)).unwrap();
        prop_assert!(monotone_by_cholesky(&p.materialize_w(), m, 1e-7));
    }

    #[test]
    fn conv_parameterization_is_monotone(c in 1usize..3, k in prop::sample::select(vec![1usize, 3]), seed in any::<u64>()) {
        let p = ConvMonotoneParam::random(c, k, 6, 0.1, &mut rng(seed)).unwrap();
        prop_assert!(monotone_by_cholesky(&p.materialize_w(), 0.1, 1e-7));
    }

    #[test]
    fn operators_are_adjoint(seed in any::<u64>()) {
        let mut r = rng(seed);
        let dense = DenseMonotoneParam::random(7, 0.3, &mut r).unwrap().operator();
        prop_assert!(adjoint_gap(&dense, seed) < 1e-12);
        let conv = ConvMonotoneParam::random(2, 3, 6, 0.3, &mut r).unwrap().operator();
        prop_assert!(adjoint_gap(&conv, seed) < 1e-12);
        let strided = CircConvKernel::strided(Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r), 6, 2).unwrap();
        prop_assert!(adjoint_gap(&strided, seed) < 1e-12);
        let tiers = MultiTierParam::random(&[(2, 8), (2, 4)], 3, 0.3, &mut r).unwrap().operator();
        prop_assert!(adjoint_gap(&tiers, seed) < 1e-12);
    }

    #[test]
    fn structured_inverses_solve_their_systems(seed in any::<u64>(), alpha in 0.05f64..20.0) {
        let mut r = rng(seed);
        let conv = ConvMonotoneParam::random(2, 3, 8, 0.2, &mut r).unwrap();
        let (f, b) = inverse_gaps(&conv.operator(), &conv.build_inverse(alpha).unwrap(), seed);
        prop_assert!(f < 1e-9 && b < 1e-9, "conv {f:e} {b:e}");
        let tiers = MultiTierParam::random(&[(2, 8), (3, 4)], 3, 0.2, &mut r).unwrap();
        let (f, b) = inverse_gaps(&tiers.operator(), &tiers.build_inverse(alpha).unwrap(), seed);
        prop_assert!(f < 1e-9 && b < 1e-9, "multi-tier {f:e} {b:e}");
    }

    #[test]
    fn prox_is_nonexpansive_and_idempotent(
        a in prop::collection::vec(-5.0f64..5.0, 32),
        b in prop::collection::vec(-5.0f64..5.0, 32),
        border in 0usize..2,
    ) {
        let layout = HiddenLayout::Planes(vec![Plane { channels: 2, side: 4 }]);
        let kind = if border == 0 { ProxKind::Relu } else { ProxKind::ReluZeroBorder { border } };
        let prox = Prox::new(kind, &layout).unwrap();
        let (mut pa, mut pb) = (a.clone(), b.clone());
        prox.apply_in_place(&mut pa);
        prox.apply_in_place(&mut pb);
        let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        prop_assert!(d(&pa, &pb) <= d(&a, &b) + 1e-12);
        let mut again = pa.clone();
        prox.apply_in_place(&mut again);
        prop_assert_eq!(again, pa);
    }

    #[test]
    fn shuffle_inverts_its_transpose(a in 1usize..9, b in 1usize..9) {
        let p = perfect_shuffle(a, b);
        let q = perfect_shuffle(b, a);
        let composed: Vec<usize> = p.iter().map(|&i| q[i]).collect();
        prop_assert_eq!(composed, (0..a * b).collect::<Vec<_>>());
    }

    #[test]
    fn equilibrium_state_invariants(seed in any::<u64>(), alpha in 0.1f64..5.0) {
        let mut r = rng(seed);
        let p = DenseMonotoneParam::random(9, 0.5, &mut r).unwrap();
        let w = p.operator();
        let inv = p.build_inverse(alpha).unwrap();
        let prox = Prox::new(ProxKind::Relu, &HiddenLayout::Flat(9)).unwrap();
        let c = randn(18, &mut r);
        let cfg = SolverConfig::peaceman_rachford(alpha).with_epsilon(1e-6).with_max_iter(5000);
        let s = solve_forward_pr(&w, &inv, &prox, &c, &cfg).unwrap();
        if s.stats.converged {
            prop_assert!(s.stats.last_residual() <= cfg.epsilon);
        }
        let mut z = s.preactivation.clone();
        z.chunks_mut(9).for_each(|row| prox.apply_in_place(row));
        prop_assert_eq!(&z, &s.z);
        for (j, pre) in s.j_diag.iter().zip(&s.preactivation) {
            let active = if *pre > 0.0 { 1.0 } else { 0.0 };
            prop_assert_eq!(*j, active);
        }
    }

    #[test]
    fn softmax_gradient_rows_sum_to_zero(
        logits in prop::collection::vec(-30.0f64..30.0, 12),
        labels in prop::collection::vec(0usize..4, 3),
    ) {
        let (loss, g) = loss_softmax_ce(&logits, &labels, 4).unwrap();
        prop_assert!(loss >= 0.0);
        for row in g.chunks(4) {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), variant in 0usize..3, wn in any::<bool>()) {
        let input = InputShape { channels: 1, side: 8 };
        let mut spec = match variant {
            0 => ModelSpec::dense(input, 5, 10),
            1 => ModelSpec::conv(input, 2, 10),
            _ => ModelSpec::multitier(input, vec![2, 3], 10),
        };
        spec.weight_norm = wn;
        spec.m = 0.25;
        let model = MonDEQModel::new(&spec, &mut rng(seed)).unwrap();
        let ckpt = model_to_checkpoint(&model, &[("alpha", "0.5".into())]);
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &ckpt);
        let restored = model_from_checkpoint(&back).unwrap();
        for ((na, ta), (nb, tb)) in model.named_params().iter().zip(restored.named_params().iter()) {
            prop_assert_eq!(na, nb);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(ta), bits(tb));
        }
        prop_assert_eq!(restored, model);
    }
}
