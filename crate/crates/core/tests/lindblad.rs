use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vdp_sync::fock::{annihilation, coherent_state, moments, DensityMatrix, MomentOperators, QuantumParams};
use vdp_sync::lindblad::{
    crossing_time, master_rhs_dense, mean_equation_rhs, propagate, recommended_dt, steady_state, trace_distance,
    trace_distance_curve, ControlSample, ControlSchedule, Liouvillian, PropagationOptions, SteadyStateOptions,
};

type CMatrix = DMatrix<Complex64>;

/// Mixture of two pure states supported on the lowest `support` levels.
fn low_level_state(rng: &mut impl Rng, support: usize, dim: usize) -> DensityMatrix {
    let mut m = CMatrix::zeros(dim, dim);
    for _ in 0..2 {
        let v: Vec<Complex64> = (0..dim)
            .map(|n| {
                if n < support {
                    Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        let w = rng.random_range(0.1..1.0);
        m += DensityMatrix::pure(&v).unwrap().matrix() * Complex64::new(w, 0.0);
    }
    let tr = m.trace();
    DensityMatrix::from_matrix_unchecked(m / tr)
}

/// Full-rank random state ρ = GG†/Tr.
fn ginibre_state(entries: &[(f64, f64)], dim: usize) -> DensityMatrix {
    let g = CMatrix::from_iterator(dim, dim, entries.iter().map(|&(re, im)| Complex64::new(re, im)));
    let m = &g * g.adjoint();
    let tr = m.trace();
    DensityMatrix::from_matrix_unchecked(m / tr)
}

fn hermiticity_error(m: &CMatrix) -> f64 {
    (m - m.adjoint()).norm()
}

fn params_strategy() -> impl Strategy<Value = QuantumParams> {
    (-1.0..1.0f64, 0.0..1.5f64, 0.0..1.5f64).prop_map(|(delta, kappa1, kappa2)| QuantumParams {
        delta,
        kappa1,
        kappa2,
        dim: 14,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rhs_is_traceless_hermitian_and_obeys_the_mean_equation(
        p in params_strategy(),
        eps in (-2.0..2.0f64, -2.0..2.0f64),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = low_level_state(&mut rng, 5, p.dim);
        let rhs = master_rhs_dense(&rho, eps, &p).unwrap();
        prop_assert!(rhs.trace().norm() < 1e-12);
        prop_assert!(hermiticity_error(&rhs) < 1e-12);
        let a = annihilation(p.dim).unwrap();
        let d_mean = (&rhs * a.matrix()).trace();
        let expected = mean_equation_rhs(&moments(&rho).unwrap(), eps, &p);
        prop_assert!((d_mean - expected).norm() < 1e-8, "{d_mean} vs {expected}");
    }

    #[test]
    fn trace_distance_is_a_metric(
        a in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 36),
        b in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 36),
        c in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 36),
    ) {
        let (ra, rb, rc) = (ginibre_state(&a, 6), ginibre_state(&b, 6), ginibre_state(&c, 6));
        let ab = trace_distance(&ra, &rb).unwrap();
        let ba = trace_distance(&rb, &ra).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!(trace_distance(&ra, &ra).unwrap() < 1e-12);
        let ac = trace_distance(&ra, &rc).unwrap();
        let cb = trace_distance(&rc, &rb).unwrap();
        prop_assert!(ab <= ac + cb + 1e-10);
    }

    #[test]
    fn short_propagations_keep_the_state_physical(
        p in params_strategy(),
        ramp in (-1.5..1.5f64, -1.5..1.5f64, -1.5..1.5f64, -1.5..1.5f64),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Gain broadens the populations quickly; keep it modest and let
        // pair loss confine the tail so the truncation guard stays quiet.
        let p = QuantumParams { dim: 32, kappa1: 0.3 * p.kappa1, kappa2: 0.2 + p.kappa2, ..p };
        let rho0 = low_level_state(&mut rng, 3, p.dim);
        let schedule = linear_ramp(ramp, 0.5);
        let opts = PropagationOptions {
            dt: recommended_dt(&p, schedule.max_amplitude()).unwrap(),
            sample_dt: 0.1,
            snapshot_times: vec![0.25, 0.5],
            ..PropagationOptions::default()
        };
        let traj = propagate(&rho0, &schedule, &p, 0.5, &opts, None).unwrap();
        for (_, s) in traj.snapshots.iter().chain([(0.5, traj.final_state.clone())].iter()) {
            prop_assert!((s.trace() - 1.0).norm() < 1e-10);
            prop_assert!(hermiticity_error(s.matrix()) < 1e-12);
            prop_assert!(s.min_eigenvalue() > -1e-6);
        }
        prop_assert!(traj.corrections.total() < 1e-6, "{:?}", traj.corrections);
    }
}

/// Controls ramping linearly from (a, b) to (c, d) over `tau`, then held.
fn linear_ramp((a, b, c, d): (f64, f64, f64, f64), tau: f64) -> ControlSchedule {
    ControlSchedule::from_samples(
        vec![
            ControlSample { t: 0.0, eps1: a, eps2: b },
            ControlSample { t: tau, eps1: c, eps2: d },
        ],
        (c, d),
    )
    .unwrap()
}

/// Finite-difference d⟨α⟩/dt along propagated trajectories against the mean
/// equation evaluated from the Weyl moments at the same instant.
#[test]
fn ehrenfest_consistency_along_propagated_trajectories() {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_611);
    let h = 1e-3;
    let t_mid = 0.5;
    for (regime, base) in [("weak", QuantumParams::weak()), ("strong", QuantumParams::strong())] {
        for k in 0..5 {
            let p = QuantumParams { dim: 40, ..base };
            let rho0 = low_level_state(&mut rng, 3, p.dim);
            let ramp = (
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
            );
            let schedule = linear_ramp(ramp, 2.0 * t_mid);
            let opts = PropagationOptions {
                dt: 2.5e-4,
                sample_dt: h,
                ..PropagationOptions::default()
            };
            let traj = propagate(&rho0, &schedule, &p, t_mid + h, &opts, None).unwrap();
            let n = traj.times.len();
            assert!((traj.times[n - 2] - t_mid).abs() < 1e-12);
            let fd = (traj.observables[n - 1].mean - traj.observables[n - 3].mean) / (2.0 * h);
            let rhs = mean_equation_rhs(&traj.observables[n - 2], schedule.eval(t_mid), &p);
            let err = (fd - rhs).norm();
            assert!(err < 1e-4, "{regime} state {k}: |{fd} - {rhs}| = {err:e}");
        }
    }
}

#[test]
fn rk4_order_on_the_mean_amplitude() {
    let p = QuantumParams {
        dim: 40,
        ..QuantumParams::weak()
    };
    let rho0 = coherent_state(Complex64::new(0.3, -0.2), p.dim).unwrap();
    let schedule = linear_ramp((0.8, -0.4, -0.2, 0.6), 0.5);
    let mean_at = |dt: f64| {
        let opts = PropagationOptions {
            dt,
            sample_dt: 0.0,
            ..PropagationOptions::default()
        };
        propagate(&rho0, &schedule, &p, 0.5, &opts, None).unwrap().last().mean
    };
    let (m1, m2, m3) = (mean_at(0.004), mean_at(0.002), mean_at(0.001));
    let ratio = (m1 - m2).norm() / (m2 - m3).norm();
    assert!((13.0..19.0).contains(&ratio), "ratio {ratio:.2}");
}

#[test]
fn trace_is_preserved_over_long_weak_run() {
    let p = QuantumParams::weak();
    let rho0 = coherent_state(Complex64::new(-1.0, 1.0), p.dim).unwrap();
    let opts = PropagationOptions {
        dt: 1e-3,
        sample_dt: 1.0,
        snapshot_times: (1..=5).map(|k| 10.0 * k as f64).collect(),
        ..PropagationOptions::default()
    };
    let traj = propagate(&rho0, &ControlSchedule::constant(1.0, 0.0), &p, 50.0, &opts, None).unwrap();
    assert_eq!(traj.snapshots.len(), 5);
    for (t, s) in &traj.snapshots {
        assert!((s.trace() - 1.0).norm() < 1e-8, "t = {t}");
        assert!(s.min_eigenvalue() > -1e-6, "t = {t}");
    }
    assert!(traj.corrections.total() < 1e-6, "{:?}", traj.corrections);
}

fn strong_small() -> QuantumParams {
    QuantumParams {
        dim: 20,
        ..QuantumParams::strong()
    }
}

#[test]
fn steady_state_is_seed_independent_and_a_fixed_point() {
    let p = strong_small();
    let opts = SteadyStateOptions::default();
    let from_vacuum = steady_state((1.0, 0.0), &p, None, &opts).unwrap();
    let seed = coherent_state(Complex64::new(-1.0, 1.0), p.dim).unwrap();
    let from_coherent = steady_state((1.0, 0.0), &p, Some(&seed), &opts).unwrap();
    let gap = trace_distance(&from_vacuum, &from_coherent).unwrap();
    assert!(gap < 10.0 * opts.tol, "seed dependence {gap:e}");

    let later = propagate(
        &from_vacuum,
        &ControlSchedule::constant(1.0, 0.0),
        &p,
        1.0,
        &PropagationOptions::with_dt(1e-3),
        None,
    )
    .unwrap()
    .final_state;
    let moved = trace_distance(&from_vacuum, &later).unwrap();
    assert!(moved < 10.0 * opts.tol, "moved {moved:e}");
}

#[test]
fn undriven_steady_state_is_diagonal() {
    let p = strong_small();
    let rho = steady_state((0.0, 0.0), &p, Some(&coherent_state(Complex64::new(0.7, 0.2), p.dim).unwrap()), &SteadyStateOptions::default()).unwrap();
    let m = rho.matrix();
    let off = (0..p.dim)
        .flat_map(|i| (0..p.dim).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)].norm())
        .fold(0.0, f64::max);
    assert!(off < 1e-6, "largest coherence {off:e}");
}

/// Stationary phonon numbers of the undriven oscillator at N = 40, frozen
/// from the converged propagation and confirmed by the diagonal rate
/// equation at N = 40, 60 and 80.
#[test]
fn undriven_stationary_phonon_numbers() {
    let ops = MomentOperators::new(40).unwrap();
    for (p, expected) in [(QuantumParams::weak(), 10.500912), (QuantumParams::strong(), 0.376566)] {
        let rho = steady_state((0.0, 0.0), &p, None, &SteadyStateOptions::default()).unwrap();
        let n = ops.evaluate(&rho).phonon;
        assert!((n - expected).abs() < 1e-4, "{n} vs {expected}");
    }
}

#[test]
fn reference_state_crosses_at_time_zero() {
    let p = strong_small();
    let rho = steady_state((1.0, 0.0), &p, None, &SteadyStateOptions::default()).unwrap();
    let series = trace_distance_curve(&ControlSchedule::constant(1.0, 0.0), &p, &rho, &rho, 2.0, 0.1, 1e-3).unwrap();
    assert_eq!(crossing_time(&series, 0.01).unwrap(), 0.0);
}

/// Every step the stability check accepts stays stable, even for the
/// fastest-decaying levels of large truncations; a step that used to slip
/// through at N = 60 is now rejected.
#[test]
fn accepted_steps_are_stable_at_large_truncations() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for dim in [40, 50, 60] {
        let p = QuantumParams { dim, ..QuantumParams::strong() };
        let rho0 = low_level_state(&mut rng, 3, dim);
        let schedule = linear_ramp((1.2, -0.8, 0.5, 1.4), 0.05);
        let limit = Liouvillian::new(&p).unwrap().stability_limit(schedule.max_amplitude());
        let opts = PropagationOptions {
            dt: limit,
            sample_dt: 0.0,
            ..PropagationOptions::default()
        };
        let traj = propagate(&rho0, &schedule, &p, 0.05, &opts, None).unwrap();
        assert!(traj.last().phonon.is_finite(), "dim {dim}");
    }
    let p = QuantumParams { dim: 60, ..QuantumParams::strong() };
    let rho0 = low_level_state(&mut rng, 3, 60);
    let opts = PropagationOptions {
        dt: 2.5e-4,
        ..PropagationOptions::default()
    };
    let err = propagate(&rho0, &ControlSchedule::constant(1.0, 0.0), &p, 0.01, &opts, None).unwrap_err();
    assert!(matches!(err, vdp_sync::Error::UnstableStep { .. }), "{err}");
}
