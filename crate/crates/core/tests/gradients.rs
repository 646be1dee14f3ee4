mod common;

use common::*;
use mondeq::model::{loss_softmax_ce, InputShape, ModelSpec};
use mondeq::{MonDEQModel, SolverConfig};

fn tight() -> SolverConfig {
    SolverConfig::peaceman_rachford(1.0)
        .with_epsilon(1e-10)
        .with_max_iter(100_000)
}

fn loss_at(model: &MonDEQModel, x: &[f64], labels: &[usize]) -> f64 {
    let cfg = tight();
    let prep = model.prepare_for(&cfg).unwrap();
    let out = model.forward(&prep, x, &cfg).unwrap();
    loss_softmax_ce(&out.logits, labels, model.classes()).unwrap().0
}

/// Central differences on every entry of every parameter.
fn check_all(mut model: MonDEQModel, x: &[f64], labels: &[usize]) {
    let cfg = tight();
    let prep = model.prepare_for(&cfg).unwrap();
    let (_, grads, _) = model.loss_and_grad(&prep, x, labels, &cfg).unwrap();
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    assert_eq!(grads.len(), names.len());
    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for name in &names {
        let analytic = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}")).clone();
        assert_eq!(analytic.shape(), model.param(name).unwrap().shape(), "{name}");
        for i in 0..analytic.len() {
            let orig = model.param(name).unwrap().data()[i];
            model.param_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = loss_at(&model, x, labels);
            model.param_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = loss_at(&model, x, labels);
            model.param_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic.data()[i];
            let err = (fd - an).abs();
            let bound = (1e-4 * fd.abs().max(an.abs())).max(1e-6);
            assert!(err <= bound, "{name}[{i}]: analytic {an:e}, finite difference {fd:e}");
            if err / bound > worst.0 {
                worst = (err / bound, format!("{name}[{i}]"));
            }
        }
    }
    eprintln!("worst error/bound {:.3} at {}", worst.0, worst.1);
}

fn input(len: usize, seed: u64) -> Vec<f64> {
    randn(len, &mut rng(seed))
}

#[test]
fn dense_gradients_match_finite_differences() {
    for weight_norm in [false, true] {
        let mut spec = ModelSpec::dense(InputShape { channels: 1, side: 0 }, 10, 3);
        spec.input = InputShape { channels: 6, side: 1 };
        spec.m = 0.5;
        spec.weight_norm = weight_norm;
        let model = MonDEQModel::new(&spec, &mut rng(5)).unwrap();
        check_all(model, &input(3 * 6, 6), &[0, 2, 1]);
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    for weight_norm in [false, true] {
        let mut spec = ModelSpec::conv(InputShape { channels: 1, side: 8 }, 2, 3);
        spec.m = 0.5;
        spec.weight_norm = weight_norm;
        let model = MonDEQModel::new(&spec, &mut rng(7)).unwrap();
        check_all(model, &input(2 * 64, 8), &[1, 0]);
    }
}

#[test]
fn multitier_gradients_match_finite_differences() {
    for weight_norm in [false, true] {
        let mut spec = ModelSpec::multitier(InputShape { channels: 1, side: 8 }, vec![2, 2], 3);
        spec.m = 0.5;
        spec.weight_norm = weight_norm;
        let model = MonDEQModel::new(&spec, &mut rng(9)).unwrap();
        check_all(model, &input(2 * 64, 10), &[2, 1]);
    }
}

#[test]
fn zero_logit_gradient_gives_zero_gradients() {
    let spec = ModelSpec::conv(InputShape { channels: 1, side: 8 }, 2, 3);
    let model = MonDEQModel::new(&spec, &mut rng(11)).unwrap();
    let cfg = tight();
    let prep = model.prepare_for(&cfg).unwrap();
    let x = input(64, 12);
    let out = model.forward(&prep, &x, &cfg).unwrap();
    let g = model.backward(&prep, &out.state, &x, &[0.0; 3], &cfg).unwrap();
    for (name, t) in g.iter() {
        assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
    }
}

#[test]
fn zero_input_and_bias_give_head_bias() {
    let spec = ModelSpec::dense(InputShape { channels: 6, side: 1 }, 12, 4);
    let mut model = MonDEQModel::new(&spec, &mut rng(13)).unwrap();
    model.bias.data_mut().iter_mut().for_each(|b| *b = 0.0);
    let cfg = tight();
    let prep = model.prepare_for(&cfg).unwrap();
    let out = model.forward(&prep, &[0.0; 6], &cfg).unwrap();
    assert!(out.state.z.iter().all(|&z| z == 0.0));
    assert_eq!(out.logits, model.head_bias.data());
}

#[test]
fn forward_is_self_consistent() {
    let spec = ModelSpec::dense(InputShape { channels: 6, side: 1 }, 12, 10);
    let model = MonDEQModel::new(&spec, &mut rng(15)).unwrap();
    let cfg = SolverConfig::peaceman_rachford(1.0).with_epsilon(1e-6);
    let prep = model.prepare_for(&cfg).unwrap();
    let x = input(3 * 6, 16);
    let out = model.forward(&prep, &x, &cfg).unwrap();
    assert!(out.logits.iter().all(|l| l.is_finite()));
    assert_eq!(out.logits.len(), 30);
    // one more application of the fixed-point map barely moves z
    let r = model.fixed_point_residual(&prep, &x, &out.state.z).unwrap();
    assert!(r <= 10.0 * cfg.epsilon, "{r:e}");
}
