mod common;

use common::{bits, fd_grad, max_abs_diff, random_net, rel_err, with_params};
use proptest::prelude::*;
use rand::Rng;

use flowdistill::ccd::{
    ccd_loss, ccd_tangent, ccd_train_step, dcd_train_step, discrete_tangent, tangent_normalize, warmup_coefficient, CcdConfig,
    CcdSample,
};
use flowdistill::flow::{make_dataset, DatasetSpec, Example, TimestepSampler};
use flowdistill::numerics::{NetConfig, Tensor, TrainState, VelocityNet};
use flowdistill::rng;

fn cfg() -> NetConfig {
    NetConfig::new(6, 3, 12, 2)
}

fn samples(student_ema: &VelocityNet, teacher: &VelocityNet, seed: u64, r_coef: f64) -> Vec<CcdSample> {
    let mut r = rng::stream(seed, "ccd-samples");
    (0..4)
        .map(|_| {
            let x_t = rng::normal_tensor(&mut r, &[6]);
            let t = r.random_range(0.05..0.95);
            let cond = rng::normal_tensor(&mut r, &[3]);
            let g = tangent_normalize(&ccd_tangent(teacher, student_ema, &x_t, t, &cond, r_coef).unwrap(), 0.1).unwrap();
            CcdSample { x_t, t, cond, g }
        })
        .collect()
}

fn toy_data() -> Vec<Example> {
    let spec = DatasetSpec::default_mixture(3);
    make_dataset(&spec, 128).unwrap().iter().map(|s| s.example()).collect()
}

fn toy_net(seed: u64) -> VelocityNet {
    let spec = DatasetSpec::default_mixture(3);
    let [f, d] = spec.sample_shape();
    random_net(NetConfig::new(f * d, d, 12, 2), seed)
}

proptest! {
    #[test]
    fn warmup_is_bounded_and_nondecreasing(a in 0u64..5000, b in 0u64..5000, h in 1u64..3000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (x, y) = (warmup_coefficient(lo, h), warmup_coefficient(hi, h));
        prop_assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
        prop_assert!(x <= y);
    }

    #[test]
    fn normalization_is_a_bounded_positive_rescaling(g in proptest::collection::vec(-50.0f64..50.0, 1..8), c in 1e-3f64..10.0) {
        let gt = Tensor::vector(g.clone()).unwrap();
        let out = tangent_normalize(&gt, c).unwrap();
        let s = 1.0 / (gt.norm() + c);
        prop_assert!(s > 0.0 && s <= 1.0 / c);
        for (o, x) in out.data().iter().zip(&g) {
            prop_assert!((o - s * x).abs() <= 1e-15 * x.abs().max(1.0));
        }
        prop_assert!(out.norm() < 1.0);
        if gt.norm() + c >= 1.0 {
            prop_assert!(out.norm() <= gt.norm());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ccd_loss_gradient_matches_central_difference(seed in 0u64..500) {
        let (student, ema, teacher) = (random_net(cfg(), seed), random_net(cfg(), seed + 1), random_net(cfg(), seed + 2));
        let batch = samples(&ema, &teacher, seed, 0.7);
        let (_, g) = ccd_loss(&student, &ema, &batch).unwrap();
        let fd = fd_grad(student.params(), 1e-6, |p| ccd_loss(&with_params(&student, p), &ema, &batch).unwrap().0);
        prop_assert!(rel_err(&g.flat(), &fd) < 1e-4);
    }
}

#[test]
fn identical_nets_with_no_warmup_give_exactly_zero_loss() {
    let net = random_net(cfg(), 3);
    let batch = samples(&net, &net, 4, 0.0);
    for s in &batch {
        assert!(s.g.data().iter().all(|&v| v == 0.0));
    }
    let (loss, grads) = ccd_loss(&net, &net, &batch).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.flat().iter().all(|&v| v == 0.0));
}

/// With θ⁻ = θ the tied objective `‖F_θ − F_θ − g‖²` is flat in θ, so a nonzero
/// gradient equal to `−2·mean Jᵀg` shows the target was held constant.
#[test]
fn target_network_receives_no_gradient() {
    let (student, teacher) = (random_net(cfg(), 5), random_net(cfg(), 6));
    let batch = samples(&student, &teacher, 7, 1.0);
    let (_, grads) = ccd_loss(&student, &student, &batch).unwrap();
    let tied = fd_grad(student.params(), 1e-6, |p| {
        let n = with_params(&student, p);
        ccd_loss(&n, &n, &batch).unwrap().0
    });
    assert!(tied.iter().all(|v| v.abs() < 1e-8));
    let mut expect = student.params().zeros_like();
    for s in &batch {
        let up = s.g.scaled(-2.0 / batch.len() as f64).unwrap();
        let (g, _) = student.backward(&s.x_t, s.t, &s.cond, &up).unwrap();
        expect.add_scaled(1.0, &g);
    }
    assert!(expect.sq_norm() > 0.0);
    assert!(rel_err(&grads.flat(), &expect.flat()) < 1e-12);

    // moving θ⁻ moves the loss but the reported gradient is still only ∂/∂θ
    let ema2 = random_net(cfg(), 8);
    let (_, g2) = ccd_loss(&student, &ema2, &batch).unwrap();
    let fd = fd_grad(student.params(), 1e-6, |p| ccd_loss(&with_params(&student, p), &ema2, &batch).unwrap().0);
    assert!(rel_err(&g2.flat(), &fd) < 1e-4);
}

#[test]
fn train_step_updates_the_shadow_by_the_ema_rule_only() {
    let teacher = toy_net(1);
    let mut state = TrainState::new(teacher.clone());
    let mut c = CcdConfig::new(1e-3, 10);
    c.sampler = TimestepSampler::uniform();
    let data = toy_data();
    let mut r = rng::stream(2, "ccd");
    for _ in 0..3 {
        let before = state.theta_ema.params().clone();
        ccd_train_step(&teacher, &mut state, &c, &data, &mut r).unwrap();
        let mut expect = before.clone();
        expect.scale(c.ema_mu);
        expect.add_scaled(1.0 - c.ema_mu, state.theta.params());
        for (a, b) in state.theta_ema.params().flat().iter().zip(expect.flat()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }
    assert_eq!(state.iters, 3);
}

#[test]
fn distillation_steps_are_bit_reproducible() {
    let teacher = toy_net(1);
    let data = toy_data();
    let c = CcdConfig::new(1e-3, 10);
    let run = |discrete: bool| {
        let mut state = TrainState::new(teacher.clone());
        let mut r = rng::stream(9, "run");
        for _ in 0..5 {
            if discrete {
                dcd_train_step(&teacher, &mut state, &c, &data, &mut r, 0.05).unwrap();
            } else {
                ccd_train_step(&teacher, &mut state, &c, &data, &mut r).unwrap();
            }
        }
        (bits(state.theta.params()), bits(state.theta_ema.params()))
    };
    assert_eq!(run(false), run(false));
    assert_eq!(run(true), run(true));
    assert_ne!(run(false), run(true));
}

#[test]
fn discrete_target_converges_to_the_tangent_at_first_order() {
    let (teacher, ema) = (random_net(cfg(), 11), random_net(cfg(), 12));
    let mut r = rng::stream(13, "dt");
    let probes: Vec<(Tensor, f64, Tensor)> =
        (0..20).map(|_| (rng::normal_tensor(&mut r, &[6]), r.random_range(0.3..0.9), rng::normal_tensor(&mut r, &[3]))).collect();
    let err = |dt: f64| {
        probes
            .iter()
            .map(|(x, t, c)| {
                let g = ccd_tangent(&teacher, &ema, x, *t, c, 1.0).unwrap();
                max_abs_diff(&discrete_tangent(&teacher, &ema, x, *t, c, dt).unwrap(), &g.scaled(-1.0).unwrap())
            })
            .sum::<f64>()
    };
    let e: Vec<f64> = [8e-3, 4e-3, 2e-3, 1e-3].iter().map(|&d| err(d)).collect();
    for w in e.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!((0.8..1.2).contains(&order), "errors {e:?}");
    }
}

#[test]
fn discrete_step_rejects_steps_past_the_origin() {
    let net = random_net(cfg(), 1);
    let x = Tensor::zeros(&[6]);
    let c = Tensor::zeros(&[3]);
    assert!(discrete_tangent(&net, &net, &x, 0.01, &c, 0.02).is_err());
    assert!(discrete_tangent(&net, &net, &x, 0.01, &c, 0.0).is_err());
}
