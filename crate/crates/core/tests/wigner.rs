use num_complex::Complex64;
use vdp_sync::fock::QuantumParams;
use vdp_sync::wigner::{DiffusionForm, PdeConfig, WignerGrid, WignerOperator, WignerStepper};

const HALF_WIDTH: f64 = 5.0;
const WIDTH: f64 = 2.0;
const CENTER: (f64, f64) = (0.6, -0.4);

/// k-th derivative of exp(−a u²) divided by exp(−a u²).
fn gauss_deriv(k: usize, u: f64) -> f64 {
    let s = WIDTH.sqrt();
    let z = s * u;
    let hermite = match k {
        0 => 1.0,
        1 => 2.0 * z,
        2 => 4.0 * z * z - 2.0,
        3 => 8.0 * z.powi(3) - 12.0 * z,
        _ => unreachable!(),
    };
    (-s).powi(k as i32) * hermite
}

fn test_fn(x: f64, y: f64) -> f64 {
    let (u, v) = (x - CENTER.0, y - CENTER.1);
    (-WIDTH * (u * u + v * v)).exp()
}

/// Right side of the Wigner equation applied to the Gaussian, written with
/// the expanded coefficients and analytic derivatives.
fn analytic_rhs(p: &QuantumParams, eps: (f64, f64), form: DiffusionForm, x: f64, y: f64) -> f64 {
    let (u, v) = (x - CENTER.0, y - CENTER.1);
    let g = test_fn(x, y);
    let d = |kx: usize, ky: usize| gauss_deriv(kx, u) * gauss_deriv(ky, v) * g;
    let (k1, k2, delta) = (p.kappa1, p.kappa2, p.delta);
    let r2 = x * x + y * y;
    let c0 = 2.0 * (-k1 + 4.0 * k2 * r2);
    let cx = -delta * y + eps.1 / 2.0 - k1 * x + 2.0 * k2 * x * (r2 + 1.0);
    let cy = delta * x + eps.0 / 2.0 - k1 * y + 2.0 * k2 * y * (r2 + 1.0);
    let cd = (k1 + 4.0 * k2 * r2) / 4.0;
    let lap = d(2, 0) + d(0, 2);
    let exact = c0 * g
        + cx * d(1, 0)
        + cy * d(0, 1)
        + cd * lap
        + k2 / 8.0 * (x * (d(3, 0) + d(1, 2)) + y * (d(2, 1) + d(0, 3)));
    match form {
        DiffusionForm::Exact => exact,
        // The simplified diffusion drops (κ2/2)∇²(r² W).
        DiffusionForm::Simplified => {
            let lap_r2w = 4.0 * g + 4.0 * (x * d(1, 0) + y * d(0, 1)) + r2 * lap;
            exact - k2 / 2.0 * lap_r2w
        }
    }
}

fn operator_error(p: &QuantumParams, eps: (f64, f64), form: DiffusionForm, points: usize) -> f64 {
    let grid = WignerGrid::from_fn(HALF_WIDTH, points, test_fn);
    let mut op = WignerOperator::new(p, HALF_WIDTH, points, form);
    let mut out = vec![0.0; op.len()];
    op.apply(grid.values(), eps, &mut out);
    let mut err: f64 = 0.0;
    for j in 1..points - 1 {
        for i in 1..points - 1 {
            let (x, y) = (grid.coordinate(i), grid.coordinate(j));
            err = err.max((out[j * points + i] - analytic_rhs(p, eps, form, x, y)).abs());
        }
    }
    err
}

fn assert_second_order(p: &QuantumParams, eps: (f64, f64), form: DiffusionForm, label: &str) {
    let coarse = operator_error(p, eps, form, 101);
    let fine = operator_error(p, eps, form, 201);
    let ratio = coarse / fine;
    assert!(
        (3.5..4.5).contains(&ratio),
        "{label}: errors {coarse:.3e} -> {fine:.3e}, ratio {ratio:.2}"
    );
    assert!(fine < 5e-2, "{label}: fine error {fine:.3e}");
}

#[test]
fn hamiltonian_terms_are_second_order() {
    let p = QuantumParams {
        delta: 0.9,
        kappa1: 0.0,
        kappa2: 0.0,
        dim: 10,
    };
    assert_second_order(&p, (0.8, -0.5), DiffusionForm::Exact, "hamiltonian");
}

#[test]
fn gain_terms_are_second_order() {
    let p = QuantumParams {
        delta: 0.0,
        kappa1: 1.0,
        kappa2: 0.0,
        dim: 10,
    };
    assert_second_order(&p, (0.0, 0.0), DiffusionForm::Exact, "gain");
}

#[test]
fn loss_terms_are_second_order() {
    let p = QuantumParams {
        delta: 0.0,
        kappa1: 0.0,
        kappa2: 0.5,
        dim: 10,
    };
    assert_second_order(&p, (0.0, 0.0), DiffusionForm::Exact, "loss");
}

#[test]
fn simplified_diffusion_variant_is_second_order() {
    let p = QuantumParams {
        delta: 0.3,
        kappa1: 0.7,
        kappa2: 0.4,
        dim: 10,
    };
    assert_second_order(&p, (0.2, 0.1), DiffusionForm::Simplified, "simplified");
    // The two forms genuinely differ when κ2 > 0.
    let a = operator_error(&p, (0.2, 0.1), DiffusionForm::Exact, 101);
    let grid = WignerGrid::from_fn(HALF_WIDTH, 101, test_fn);
    let mut op = WignerOperator::new(&p, HALF_WIDTH, 101, DiffusionForm::Simplified);
    let mut out = vec![0.0; op.len()];
    op.apply(grid.values(), (0.2, 0.1), &mut out);
    let mut gap: f64 = 0.0;
    for j in 1..100 {
        for i in 1..100 {
            let (x, y) = (grid.coordinate(i), grid.coordinate(j));
            let exact = analytic_rhs(&p, (0.2, 0.1), DiffusionForm::Exact, x, y);
            gap = gap.max((out[j * 101 + i] - exact).abs());
        }
    }
    assert!(gap > 10.0 * a, "gap {gap:.3e} vs discretization {a:.3e}");
}

fn run_steps(theta: f64, steps: usize) -> Vec<f64> {
    let p = QuantumParams {
        delta: 0.5,
        kappa1: 0.6,
        kappa2: 0.3,
        dim: 10,
    };
    let cfg = PdeConfig {
        points: 49,
        half_width: HALF_WIDTH,
        theta,
        solver_tol: 1e-14,
        ..PdeConfig::default()
    };
    let mut stepper = WignerStepper::new(&p, &cfg).unwrap();
    let mut grid = WignerGrid::from_fn(HALF_WIDTH, 49, test_fn);
    let t_end = 0.4;
    let h = t_end / steps as f64;
    // Time-dependent control so the endpoint handling is exercised.
    let eps = |t: f64| (0.6 * (2.0 * t).sin(), 0.3 * t);
    for n in 0..steps {
        let t = n as f64 * h;
        stepper.step(&mut grid, h, eps(t), eps(t + h)).unwrap();
    }
    grid.values().to_vec()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn crank_nicolson_is_second_order_in_time() {
    let (w1, w2, w3) = (run_steps(0.5, 10), run_steps(0.5, 20), run_steps(0.5, 40));
    let ratio = max_diff(&w1, &w2) / max_diff(&w2, &w3);
    assert!((3.6..4.4).contains(&ratio), "ratio {ratio:.3}");
}

#[test]
fn backward_euler_is_first_order_in_time() {
    let (w1, w2, w3) = (run_steps(1.0, 10), run_steps(1.0, 20), run_steps(1.0, 40));
    let ratio = max_diff(&w1, &w2) / max_diff(&w2, &w3);
    assert!((1.8..2.2).contains(&ratio), "ratio {ratio:.3}");
}

#[test]
fn coherent_third_moment_identity() {
    let cfg = PdeConfig {
        points: 201,
        half_width: 6.0,
        ..PdeConfig::default()
    };
    for a0 in [Complex64::new(-1.0, 1.0), Complex64::new(1.5, 0.3), Complex64::new(0.0, -2.0)] {
        let g = vdp_sync::wigner::initialize_coherent(a0, &cfg).unwrap();
        let m = vdp_sync::wigner::moments_from_wigner(&g);
        let expected = a0 * (a0.norm_sqr() + 1.0);
        assert!((m.third - expected).norm() < 1e-4, "{a0}: {} vs {expected}", m.third);
    }
}
