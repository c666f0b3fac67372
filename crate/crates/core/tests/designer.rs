use num_complex::Complex64;
use proptest::prelude::*;

use vdp_sync::designer::{
    delta3, design_loop, iterate_design, reference_path, scan_delta3, semiclassical_inversion, semiclassical_rhs,
    stationary_target, DesignOptions, IterationMode, PathSpec, ScanTemplate,
};
use vdp_sync::fock::{coherent_state, MomentSet, QuantumParams};
use vdp_sync::lindblad::{propagate, ControlSchedule, PropagationOptions, SteadyStateOptions};
use vdp_sync::ErrorKind;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn complex() -> impl Strategy<Value = Complex64> {
    (-1.5..1.5f64, -1.5..1.5f64).prop_map(|(re, im)| c(re, im))
}

fn spec_strategy() -> impl Strategy<Value = PathSpec> {
    (complex(), complex(), -1.0..1.0f64, 0.1..4.0f64).prop_map(|(alpha0, alpha_inf, delta_y, tau)| PathSpec {
        alpha0,
        alpha_inf,
        delta_y,
        tau,
    })
}

fn params_strategy() -> impl Strategy<Value = QuantumParams> {
    (-1.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(delta, kappa1, kappa2)| QuantumParams {
        delta,
        kappa1,
        kappa2,
        dim: 10,
    })
}

fn moments_with_third(third: Complex64) -> MomentSet {
    MomentSet {
        mean: c(0.0, 0.0),
        third,
        phonon: 0.0,
    }
}

/// Classical fourth-order Runge–Kutta on the semiclassical mean equation,
/// reading the controls from the schedule.
fn integrate_semiclassical(z0: Complex64, schedule: &ControlSchedule, p: &QuantumParams, t_end: f64, steps: usize) -> Complex64 {
    let h = t_end / steps as f64;
    let f = |t: f64, z: Complex64| semiclassical_rhs(z, schedule.eval(t), p);
    let mut z = z0;
    for n in 0..steps {
        let t = n as f64 * h;
        // Stay inside each leg so the control jump at the junction is not
        // smeared across a step. The nudge must exceed the rounding error
        // in n·h.
        let (ta, tb) = (t + 1e-9 * h, t + h - 1e-9 * h);
        let k1 = f(ta, z);
        let k2 = f(t + 0.5 * h, z + k1 * (0.5 * h));
        let k3 = f(t + 0.5 * h, z + k2 * (0.5 * h));
        let k4 = f(tb, z + k3 * h);
        z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    z
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn path_hits_every_waypoint(spec in spec_strategy()) {
        let path = reference_path(&spec).unwrap();
        let [a0, ai, af] = spec.waypoints();
        prop_assert!((path.value(0.0) - a0).norm() < 1e-15);
        prop_assert!((path.value(0.5 * spec.tau) - ai).norm() < 1e-14);
        prop_assert!((path.value(spec.tau) - af).norm() < 1e-14);
        prop_assert!((ai - (a0 + af) * 0.5 - c(0.0, spec.delta_y)).norm() < 1e-15);
    }

    /// Driving the semiclassical equation with the inverted controls
    /// retraces the reference path. Linear interpolation of the sampled
    /// controls leaves an error of second order in the spacing, which the
    /// gain can amplify near the origin, so the check is small error plus
    /// fourfold shrinkage when the spacing halves.
    #[test]
    fn inversion_is_consistent_with_semiclassical_dynamics(
        spec in spec_strategy(),
        p in params_strategy(),
    ) {
        let spec = PathSpec { tau: spec.tau.clamp(0.5, 2.0), ..spec };
        let path = reference_path(&spec).unwrap();
        let errors = |steps: usize| {
            let schedule = semiclassical_inversion(&path, &p, spec.tau / steps as f64, (0.0, 0.0)).unwrap();
            let mid = integrate_semiclassical(spec.alpha0, &schedule, &p, 0.5 * spec.tau, steps / 2);
            let end = integrate_semiclassical(spec.alpha0, &schedule, &p, spec.tau, steps);
            [(mid - spec.waypoint()).norm(), (end - spec.alpha_inf).norm()]
        };
        let (coarse, fine) = (errors(4000), errors(8000));
        for (c, f) in coarse.into_iter().zip(fine) {
            prop_assert!(f < 1e-5, "error {f:e}");
            prop_assert!(f < 1e-9 || (3.5..4.5).contains(&(c / f)), "errors {c:e} -> {f:e}");
        }
    }

    #[test]
    fn delta3_is_a_metric_on_third_moments(a in complex(), b in complex(), m in complex()) {
        let (ma, mb, mm) = (moments_with_third(a), moments_with_third(b), moments_with_third(m));
        let ab = delta3(&ma, &mb);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, delta3(&mb, &ma));
        prop_assert_eq!(delta3(&ma, &ma), 0.0);
        prop_assert!(ab <= delta3(&ma, &mm) + delta3(&mm, &mb) + 1e-12);
    }
}

#[test]
fn midpoint_of_the_weak_target() {
    let spec = PathSpec {
        alpha0: c(-1.0, 1.0),
        alpha_inf: c(-0.86, -0.38),
        delta_y: 0.0,
        tau: 2.0,
    };
    assert!((spec.midpoint() - c(-0.93, 0.31)).norm() < 1e-12);
}

fn small_strong() -> QuantumParams {
    QuantumParams {
        dim: 16,
        ..QuantumParams::strong()
    }
}

fn strong_spec(tau: f64) -> PathSpec {
    PathSpec {
        alpha0: c(-0.5, 0.5),
        alpha_inf: c(-0.27, -0.38),
        delta_y: 0.0,
        tau,
    }
}

/// The loop's own bookkeeping and an independent re-propagation of the
/// returned schedule agree on where the mean lands.
#[test]
fn converged_design_lands_on_the_target_when_re_propagated() {
    let p = small_strong();
    let spec = strong_spec(0.5);
    let rho0 = coherent_state(spec.alpha0, p.dim).unwrap();
    for mode in [IterationMode::PerSegment, IterationMode::WholePath] {
        let opts = DesignOptions {
            mode,
            n_max: 10,
            ..DesignOptions::default()
        };
        let design = iterate_design(&spec, &rho0, &p, &opts).unwrap();
        let last = design.records.last().unwrap();
        assert!(last.offset.norm() < opts.tol, "{mode:?}: {last:?}");
        let traj = propagate(
            &rho0,
            &design.schedule,
            &p,
            spec.tau,
            &PropagationOptions {
                dt: design.dt,
                sample_dt: 0.0,
                ..PropagationOptions::default()
            },
            None,
        )
        .unwrap();
        let landed = traj.last().mean;
        assert!((landed - spec.alpha_inf).norm() < opts.tol, "{mode:?}: {landed}");
        assert!((landed - design.moments_at_tau.mean).norm() < 1e-12);
    }
}

#[test]
fn damped_correction_reaches_the_same_design() {
    let p = small_strong();
    let spec = strong_spec(0.5);
    let rho0 = coherent_state(spec.alpha0, p.dim).unwrap();
    let plain = iterate_design(&spec, &rho0, &p, &DesignOptions { n_max: 10, ..DesignOptions::default() }).unwrap();
    let damped = iterate_design(
        &spec,
        &rho0,
        &p,
        &DesignOptions {
            n_max: 40,
            relaxation: 0.5,
            ..DesignOptions::default()
        },
    )
    .unwrap();
    assert!(damped.records.len() > plain.records.len());
    let gap = (plain.moments_at_tau.third - damped.moments_at_tau.third).norm();
    assert!(gap < 1e-2, "third-moment gap {gap}");
}

#[test]
fn relaxation_outside_unit_interval_is_rejected() {
    let p = small_strong();
    let spec = strong_spec(0.5);
    let rho0 = coherent_state(spec.alpha0, p.dim).unwrap();
    for relaxation in [0.0, -0.5, 1.5, f64::NAN] {
        let err = design_loop(&spec, &rho0, &p, &DesignOptions { relaxation, ..DesignOptions::default() }).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::Config, "{relaxation}");
    }
}

#[test]
fn single_iteration_budget_reports_non_convergence() {
    let p = small_strong();
    let spec = strong_spec(0.5);
    let rho0 = coherent_state(spec.alpha0, p.dim).unwrap();
    let opts = DesignOptions { n_max: 1, ..DesignOptions::default() };
    let err = iterate_design(&spec, &rho0, &p, &opts).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::NonConvergence);
    let loose = design_loop(&spec, &rho0, &p, &opts).unwrap();
    assert!(!loose.converged);
    assert_eq!(loose.records.len(), 2);
}

#[test]
fn scan_rows_are_ordered_and_non_negative() {
    let p = small_strong();
    let target = stationary_target(&p, (1.0, 0.0), &SteadyStateOptions::default()).unwrap();
    let template = ScanTemplate {
        alpha0: c(-0.5, 0.5),
        alpha_inf: target.moments.mean,
        design: DesignOptions { n_max: 8, ..DesignOptions::default() },
    };
    let delta_ys = [-0.2, 0.0, 0.2];
    let taus = [0.25, 0.5];
    let scan = scan_delta3(&delta_ys, &taus, &template, &p, &target).unwrap();
    let cells: Vec<(f64, f64)> = scan.rows.iter().map(|r| (r.delta_y, r.tau)).collect();
    let expected: Vec<(f64, f64)> = delta_ys.iter().flat_map(|&d| taus.iter().map(move |&t| (d, t))).collect();
    assert_eq!(cells, expected);
    for row in &scan.rows {
        assert!(row.error.is_none(), "{row:?}");
        assert!(row.delta3 >= 0.0);
    }
    assert!(scan_delta3(&delta_ys, &[], &template, &p, &target).unwrap().rows.is_empty());
}
