mod common;

use common::random_net;
use nalgebra::DMatrix;
use proptest::prelude::*;

use flowdistill::dist_align::FeatureNet;
use flowdistill::flow::{make_dataset, DatasetSpec, Example, FnField, GaussianOracle};
use flowdistill::metrics::{
    consistency_defect, consistency_defect_on, frechet_distance, step_sweep, FrechetEvaluator, FrechetStats,
};
use flowdistill::numerics::{NetConfig, Tensor};
use flowdistill::rng;

fn spd(seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, "spd");
    let a = DMatrix::from_vec(n, n, rng::normal_vec(&mut r, n * n));
    let m = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
    (0..n).map(|i| (0..n).map(|j| m[(i, j)]).collect()).collect()
}

fn stats(seed: u64, n: usize) -> FrechetStats {
    let mean = rng::normal_vec(&mut rng::stream(seed, "mean"), n);
    FrechetStats::from_moments(mean, spd(seed, n)).unwrap()
}

proptest! {
    #[test]
    fn frechet_is_zero_on_the_diagonal_symmetric_and_nonnegative(a in 0u64..10_000, b in 0u64..10_000, n in 1usize..6) {
        let (x, y) = (stats(a, n), stats(b, n));
        prop_assert!(frechet_distance(&x, &x).unwrap().abs() < 1e-8);
        let (d1, d2) = (frechet_distance(&x, &y).unwrap(), frechet_distance(&y, &x).unwrap());
        prop_assert!(d1 >= 0.0);
        prop_assert!((d1 - d2).abs() < 1e-8 * d1.max(1.0));
    }

    /// For 2×2 covariances `Tr √(ΣaΣb) = √(tr(ΣaΣb) + 2√det(ΣaΣb))`.
    #[test]
    fn two_dimensional_closed_form(a in 0u64..10_000, b in 0u64..10_000) {
        let (x, y) = (stats(a, 2), stats(b, 2));
        let m = &x.cov * &y.cov;
        let cross = (m.trace() + 2.0 * m.determinant().sqrt()).sqrt();
        let want = (&x.mean - &y.mean).norm_squared() + x.cov.trace() + y.cov.trace() - 2.0 * cross;
        let got = frechet_distance(&x, &y).unwrap();
        prop_assert!((got - want).abs() < 1e-9 * want.max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn diagonal_closed_form(va in proptest::collection::vec(0.01f64..5.0, 3), vb in proptest::collection::vec(0.01f64..5.0, 3)) {
        let diag = |v: &[f64]| (0..3).map(|i| (0..3).map(|j| if i == j { v[i] } else { 0.0 }).collect()).collect();
        let x = FrechetStats::from_moments(vec![0.0; 3], diag(&va)).unwrap();
        let y = FrechetStats::from_moments(vec![1.0, 0.0, -1.0], diag(&vb)).unwrap();
        let want: f64 = 2.0 + va.iter().zip(&vb).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum::<f64>();
        prop_assert!((frechet_distance(&x, &y).unwrap() - want).abs() < 1e-10);
    }
}

#[test]
fn fitted_statistics_match_a_direct_computation() {
    let mut r = rng::stream(4, "rows");
    let rows: Vec<Vec<f64>> = (0..50).map(|_| rng::normal_vec(&mut r, 3)).collect();
    let s = FrechetStats::fit(&rows).unwrap();
    for i in 0..3 {
        let m: f64 = rows.iter().map(|x| x[i]).sum::<f64>() / 50.0;
        assert!((s.mean[i] - m).abs() < 1e-14);
        for j in 0..3 {
            let mj: f64 = rows.iter().map(|x| x[j]).sum::<f64>() / 50.0;
            let c = rows.iter().map(|x| (x[i] - m) * (x[j] - mj)).sum::<f64>() / 49.0;
            assert!((s.cov[(i, j)] - c).abs() < 1e-13);
        }
    }
}

/// `F = (x − f*(x, t))/t` has the exact Gaussian consistency map as its
/// one-step origin prediction.
#[test]
fn exact_consistency_function_has_zero_defect() {
    let oracle = GaussianOracle::new(vec![0.5, -1.0, 2.0], vec![1.0, 0.3, 2.5]).unwrap();
    let o2 = oracle.clone();
    let exact = FnField(move |x: &Tensor, t: f64, _c: &Tensor| x.sub(&o2.consistency_map(x, t)?)?.scaled(1.0 / t));
    let cond = Tensor::zeros(&[1]);
    let mut r = rng::stream(5, "z");
    let (t1, t2) = (0.3, 0.9);
    let traj: Vec<(Tensor, Tensor, Tensor)> = (0..64)
        .map(|_| {
            let z = rng::normal_tensor(&mut r, &[3]);
            (oracle.trajectory_point(&z, t1).unwrap(), oracle.trajectory_point(&z, t2).unwrap(), cond.clone())
        })
        .collect();
    assert!(consistency_defect_on(&exact, &traj, t1, t2).unwrap() < 1e-12);

    // along Euler reference paths the defect is at the level of the integration error
    let data = vec![Example { x0: Tensor::zeros(&[3]), cond }];
    let d = consistency_defect(&exact, &oracle, &data, (t1, t2), 64, 1).unwrap();
    assert!(d < 1e-2, "defect {d}");
    // the teacher itself is not a consistency function
    assert!(consistency_defect(&oracle, &oracle, &data, (t1, t2), 64, 1).unwrap() > 10.0 * d);
}

#[test]
fn evaluation_is_deterministic_and_scores_real_data_at_zero() {
    let spec = DatasetSpec::default_mixture(2);
    let [f, d] = spec.sample_shape();
    let real: Vec<Tensor> = make_dataset(&spec, 300).unwrap().iter().map(|s| s.frames.clone()).collect();
    let conds: Vec<Tensor> = make_dataset(&spec, 300).unwrap().iter().map(|s| s.cond.clone()).collect();
    let ev = FrechetEvaluator::new(FeatureNet::new(d, 8, &mut rng::stream(1, "eval-features")).unwrap(), &real).unwrap();
    assert!(ev.score(&real).unwrap().abs() < 1e-8);
    let net = random_net(NetConfig::new(f * d, d, 8, 2), 3);
    let a = step_sweep(&net, &ev, &conds, &[f, d], &[1, 2, 4], 9).unwrap();
    let b = step_sweep(&net, &ev, &conds, &[f, d], &[1, 2, 4], 9).unwrap();
    assert_eq!(a, b);
    assert!(step_sweep(&net, &ev, &conds, &[f, d], &[2, 1], 9).is_err());
}
