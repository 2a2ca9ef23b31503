mod common;

use common::*;
use diffcal_core::kernels::{kernel_matrix, KernelSpec};
use diffcal_core::shapes::{match_cost, MatchKind, Momentum, Shape};
use diffcal_core::shooting::{
    deformation_energy, endpoint_match, hamiltonian, integrate_geodesic, register, shooting_loss, Scheme,
};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn hamiltonian_simple_cases() {
    let k = KernelSpec::gaussian(0.5);
    let q = landmarks(vec![0.0, 0.0]);
    assert_eq!(hamiltonian(&q, &Momentum(vec![0.0, 0.0]), &k).unwrap(), 0.0);
    assert!((hamiltonian(&q, &Momentum(vec![3.0, 0.0]), &k).unwrap() - 4.5).abs() < 1e-15);
    assert!(hamiltonian(&q, &Momentum(vec![1.0]), &k).is_err());
}

#[test]
fn hamiltonian_matches_dense_quadratic_form() {
    let mut r = rng(11);
    let k = KernelSpec::gaussian(0.4).with_amplitude(1.7);
    for _ in 0..5 {
        let q = random_landmarks(&mut r, 3);
        let p = random_momentum(&mut r, &q, 1.0);
        let km = kernel_matrix(q.points().unwrap(), q.points().unwrap(), &k).unwrap();
        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                for c in 0..2 {
                    expected += 0.5 * km[(i, j)] * p.0[2 * i + c] * p.0[2 * j + c];
                }
            }
        }
        let h = hamiltonian(&q, &p, &k).unwrap();
        assert!((h - expected).abs() <= 1e-12 * expected.abs());
    }
}

#[test]
fn image_hamiltonian_is_nonnegative_and_quadratic() {
    let mut r = rng(12);
    let q = blob(10, 0.4, 0.5, 0.2);
    let k = KernelSpec::gaussian(0.15);
    let p = random_momentum(&mut r, &q, 1.0);
    let h = hamiltonian(&q, &p, &k).unwrap();
    assert!(h > 0.0);
    let p2 = Momentum(p.0.iter().map(|v| -2.0 * v).collect());
    assert!((hamiltonian(&q, &p2, &k).unwrap() - 4.0 * h).abs() < 1e-12 * h);
}

#[test]
fn zero_momentum_gives_constant_trajectory() {
    let mut r = rng(13);
    for q in [random_landmarks(&mut r, 4), blob(8, 0.5, 0.5, 0.2), random_curve(&mut r, 6)] {
        for scheme in [Scheme::Leapfrog, Scheme::Rk2] {
            let cfg = config(0.3, MatchKind::L2Landmarks, 1.0, scheme, 10);
            let traj = integrate_geodesic(&q, &Momentum::zeros_like(&q), &cfg).unwrap();
            assert_eq!(traj.len(), 11);
            assert!(traj.iter().all(|s| s.q == q));
        }
    }
}

#[test]
fn single_landmark_moves_in_a_straight_line() {
    for scheme in [Scheme::Leapfrog, Scheme::Rk2] {
        let q = landmarks(vec![0.0, 0.0]);
        let cfg = config(0.5, MatchKind::L2Landmarks, 1.0, scheme, 8);
        let traj = integrate_geodesic(&q, &Momentum(vec![1.0, 0.0]), &cfg).unwrap();
        for (t, s) in traj.iter().enumerate() {
            let x = s.q.dofs();
            assert!((x[0] - t as f64 / 8.0).abs() < 1e-12 && x[1].abs() < 1e-15);
            assert_eq!(s.pi.0, vec![1.0, 0.0]);
        }
    }
}

#[test]
fn exchange_symmetry_is_preserved() {
    let q = landmarks(vec![-0.3, 0.1, 0.3, -0.1]);
    let pi = Momentum(vec![0.4, 0.2, -0.4, -0.2]);
    for scheme in [Scheme::Leapfrog, Scheme::Rk2] {
        let cfg = config(0.4, MatchKind::L2Landmarks, 1.0, scheme, 20);
        for s in integrate_geodesic(&q, &pi, &cfg).unwrap() {
            let (x, p) = (s.q.dofs(), &s.pi.0);
            for c in 0..2 {
                assert!((x[c] + x[2 + c]).abs() < 1e-12);
                assert!((p[c] + p[2 + c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn hamiltonian_is_conserved_by_leapfrog() {
    let mut r = rng(14);
    let k = KernelSpec::gaussian(0.3);
    for _ in 0..5 {
        let q = random_landmarks(&mut r, 6);
        let p = random_momentum(&mut r, &q, 0.5);
        let cfg = config(0.3, MatchKind::L2Landmarks, 1.0, Scheme::Leapfrog, 20);
        let h0 = hamiltonian(&q, &p, &k).unwrap();
        for s in integrate_geodesic(&q, &p, &cfg).unwrap() {
            let h = hamiltonian(&s.q, &s.pi, &k).unwrap();
            assert!((h - h0).abs() <= 1e-3 * h0.max(1e-12), "{h} vs {h0}");
        }
    }
}

#[test]
fn total_momentum_is_conserved() {
    let mut r = rng(15);
    for scheme in [Scheme::Leapfrog, Scheme::Rk2] {
        let q = random_landmarks(&mut r, 8);
        let p = random_momentum(&mut r, &q, 1.0);
        let cfg = config(0.3, MatchKind::L2Landmarks, 1.0, scheme, 20);
        let total = |pi: &Momentum| -> [f64; 2] {
            let mut t = [0.0; 2];
            for (i, v) in pi.0.iter().enumerate() {
                t[i % 2] += v;
            }
            t
        };
        let t0 = total(&p);
        for s in integrate_geodesic(&q, &p, &cfg).unwrap() {
            let t = total(&s.pi);
            assert!((t[0] - t0[0]).abs() < 1e-8 && (t[1] - t0[1]).abs() < 1e-8);
        }
    }
}

#[test]
fn rk2_time_reversal_error_is_second_order() {
    let mut r = rng(16);
    let q = random_landmarks(&mut r, 5);
    let p = random_momentum(&mut r, &q, 0.8);
    let err = |steps: usize| {
        let cfg = config(0.3, MatchKind::L2Landmarks, 1.0, Scheme::Rk2, steps);
        let end = integrate_geodesic(&q, &p, &cfg).unwrap().pop().unwrap();
        let back = Momentum(end.pi.0.iter().map(|v| -v).collect());
        let ret = integrate_geodesic(&end.q, &back, &cfg).unwrap().pop().unwrap();
        ret.q.dofs().iter().zip(q.dofs()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let (e1, e2) = (err(10), err(20));
    assert!(e1 < 1e-2);
    // Halving the step should divide the error by about 4 (or better).
    assert!(e2 < e1 / 3.0, "{e1} -> {e2}");
}

#[test]
fn image_transport_moves_a_blob() {
    let q = blob(16, 0.4, 0.5, 0.12);
    // π = -∂q/∂x gives m = (∂q/∂x)² x̂ + ..., pushing mass towards +x.
    let img = match &q {
        Shape::Image(i) => i.clone(),
        _ => unreachable!(),
    };
    let [gx, _] = img.gradient();
    let pi = Momentum(gx.iter().map(|v| -v).collect());
    let cfg = config(0.15, MatchKind::L2Image, 1.0, Scheme::Leapfrog, 10);
    let end = integrate_geodesic(&q, &pi, &cfg).unwrap().pop().unwrap().q;
    let centroid = |s: &Shape| {
        let v = s.dofs();
        let total: f64 = v.iter().sum();
        (0..256).map(|i| v[i] * ((i % 16) as f64 + 0.5) / 16.0).sum::<f64>() / total
    };
    assert!(centroid(&end) > centroid(&q) + 0.01);
}

#[test]
fn loss_vanishes_at_identity() {
    let mut r = rng(17);
    for (q, kind) in [
        (random_landmarks(&mut r, 4), MatchKind::L2Landmarks),
        (blob(8, 0.5, 0.5, 0.2), MatchKind::L2Image),
        (random_curve(&mut r, 6), MatchKind::CurrentMmd),
    ] {
        let cfg = config(0.3, kind, 5.0, Scheme::Leapfrog, 10);
        let l = shooting_loss(&q, &Momentum::zeros_like(&q), &q, &cfg).unwrap();
        assert!(l.loss.abs() < 1e-14);
        assert!(l.gradient.0.iter().all(|g| g.abs() < 1e-12));
    }
}

#[test]
fn landmark_loss_gradient_matches_finite_differences() {
    let mut r = rng(18);
    for scheme in [Scheme::Leapfrog, Scheme::Rk2] {
        for _ in 0..3 {
            let q = random_landmarks(&mut r, 5);
            let target = perturbed(&mut r, &q, 0.2);
            let p = random_momentum(&mut r, &q, 0.5);
            let cfg = config(0.35, MatchKind::L2Landmarks, 20.0, scheme, 12);
            let l = shooting_loss(&q, &p, &target, &cfg).unwrap();
            let f = |x: &[f64]| shooting_loss(&q, &Momentum(x.to_vec()), &target, &cfg).unwrap().loss;
            let fd: Vec<f64> = (0..p.0.len()).map(|k| fd2(&f, &p.0, k, 1e-6)).collect();
            let err = max_rel_err(&l.gradient.0, &fd);
            assert!(err < 1e-5, "{scheme:?}: {err}");
        }
    }
}

#[test]
fn curve_loss_gradient_matches_finite_differences() {
    let mut r = rng(19);
    let q = random_curve(&mut r, 8);
    let target = perturbed(&mut r, &q, 0.1);
    let p = random_momentum(&mut r, &q, 0.3);
    let cfg = config(0.3, MatchKind::CurrentMmd, 10.0, Scheme::Leapfrog, 10);
    let l = shooting_loss(&q, &p, &target, &cfg).unwrap();
    let f = |x: &[f64]| shooting_loss(&q, &Momentum(x.to_vec()), &target, &cfg).unwrap().loss;
    let fd: Vec<f64> = (0..p.0.len()).map(|k| fd4(&f, &p.0, k, 1e-4)).collect();
    assert!(max_rel_err(&l.gradient.0, &fd) < 1e-5);
}

#[test]
fn endpoint_match_gradient_matches_finite_differences() {
    let mut r = rng(21);
    let q = random_landmarks(&mut r, 4);
    let p = random_momentum(&mut r, &q, 0.4);
    let cfg = config(0.3, MatchKind::L2Landmarks, 7.0, Scheme::Leapfrog, 10);
    let (cost, grad) = endpoint_match(&q, &p, &q, &cfg).unwrap();
    let f = |x: &[f64]| endpoint_match(&q, &Momentum(x.to_vec()), &q, &cfg).unwrap().0;
    assert_eq!(cost, f(&p.0));
    let fd: Vec<f64> = (0..p.0.len()).map(|k| fd4(&f, &p.0, k, 1e-4)).collect();
    assert!(max_rel_err(&grad.0, &fd) < 1e-6);
}

#[test]
fn image_loss_gradient_matches_finite_differences() {
    let mut r = rng(20);
    let q = blob(8, 0.45, 0.5, 0.2);
    let target = blob(8, 0.55, 0.45, 0.2);
    for scheme in [Scheme::Leapfrog, Scheme::Rk2] {
        let p = random_momentum(&mut r, &q, 1.0);
        let cfg = config(0.2, MatchKind::L2Image, 50.0, scheme, 10);
        let l = shooting_loss(&q, &p, &target, &cfg).unwrap();
        let f = |x: &[f64]| shooting_loss(&q, &Momentum(x.to_vec()), &target, &cfg).unwrap().loss;
        let ks: Vec<usize> = (0..10).map(|_| r.random_range(0..64)).collect();
        let fd: Vec<f64> = ks.iter().map(|&k| fd4(&f, &p.0, k, 1e-4)).collect();
        let an: Vec<f64> = ks.iter().map(|&k| l.gradient.0[k]).collect();
        assert!(max_rel_err(&an, &fd) < 1e-4);
    }
}

#[test]
fn registering_identical_shapes_is_trivial() {
    let mut r = rng(21);
    let q = random_landmarks(&mut r, 4);
    let cfg = config(0.3, MatchKind::L2Landmarks, 10.0, Scheme::Leapfrog, 10);
    let sol = register(&q, &q, &cfg).unwrap();
    assert!(sol.hamiltonian < 1e-8);
    assert!(sol.pi0.norm() < 1e-6);
    assert!(sol.converged);
    assert_eq!(deformation_energy(&sol), 2.0 * sol.hamiltonian);
}

#[test]
fn single_landmark_energy_matches_squared_displacement() {
    let src = landmarks(vec![0.0, 0.0]);
    let dst = landmarks(vec![0.5, 0.0]);
    let cfg = config(0.5, MatchKind::L2Landmarks, 1000.0, Scheme::Leapfrog, 20);
    let sol = register(&src, &dst, &cfg).unwrap();
    assert_eq!(sol.trajectory.len(), 21);
    assert_eq!(sol.trajectory[0].q, src);
    let e = deformation_energy(&sol);
    assert!((e - 0.25).abs() < 0.0025, "energy {e}");
}

#[test]
fn registered_geodesic_conserves_energy() {
    let mut r = rng(22);
    let src = random_landmarks(&mut r, 6);
    let dst = perturbed(&mut r, &src, 0.1);
    let cfg = config(0.3, MatchKind::L2Landmarks, 100.0, Scheme::Leapfrog, 20);
    let sol = register(&src, &dst, &cfg).unwrap();
    let before = match_cost(&src, &dst, &cfg.match_spec).unwrap().cost;
    assert!(sol.match_residual < 0.2 * before);
    for s in &sol.trajectory {
        let h = hamiltonian(&s.q, &s.pi, &cfg.kernel).unwrap();
        assert!((h - sol.hamiltonian).abs() < 1e-3 * sol.hamiltonian);
    }
}

#[test]
fn image_registration_reduces_residual() {
    let src = blob(16, 0.42, 0.5, 0.15);
    let dst = blob(16, 0.55, 0.45, 0.15);
    let cfg = config(0.12, MatchKind::L2Image, 1000.0, Scheme::Rk2, 10);
    let sol = register(&src, &dst, &cfg).unwrap();
    let before = match_cost(&src, &dst, &cfg.match_spec).unwrap().cost;
    assert!(sol.match_residual < 0.1 * before, "{} vs {before}", sol.match_residual);
}

#[test]
fn registration_is_deterministic() {
    let mut r = rng(23);
    let src = random_landmarks(&mut r, 5);
    let dst = perturbed(&mut r, &src, 0.1);
    let cfg = config(0.3, MatchKind::L2Landmarks, 50.0, Scheme::Leapfrog, 10);
    let a = register(&src, &dst, &cfg).unwrap();
    let b = register(&src, &dst, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let q = landmarks(vec![0.0, 0.0]);
    let img = blob(8, 0.5, 0.5, 0.2);
    let cfg = config(0.3, MatchKind::L2Landmarks, 1.0, Scheme::Leapfrog, 10);
    assert!(register(&q, &img, &cfg).is_err());
    assert!(shooting_loss(&q, &Momentum(vec![1.0]), &q, &cfg).is_err());
    let mut bad = cfg;
    bad.num_steps = 3;
    assert!(integrate_geodesic(&q, &Momentum(vec![0.0, 0.0]), &bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn leapfrog_drift_is_small(seed in 0u64..10_000, n in 1usize..=10, speed in 0.01f64..0.15) {
        let mut r = rng(seed);
        let q = random_landmarks(&mut r, n);
        let cfg = config(0.3, MatchKind::L2Landmarks, 1.0, Scheme::Leapfrog, 20);
        let p = momentum_with_speed(&mut r, &q, &cfg.kernel, speed);
        let h0 = hamiltonian(&q, &p, &cfg.kernel).unwrap();
        for s in integrate_geodesic(&q, &p, &cfg).unwrap() {
            let h = hamiltonian(&s.q, &s.pi, &cfg.kernel).unwrap();
            prop_assert!((h - h0).abs() <= 1e-3 * h0.max(1e-12));
        }
    }
}
