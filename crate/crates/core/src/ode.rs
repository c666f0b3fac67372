//! Fixed-step classical Runge-Kutta stepping shared by the classical and
//! quantum integrators.

use nalgebra::DMatrix;
use num_complex::Complex64;

/// A state vector that supports `self += a * x`.
pub trait OdeState: Clone {
    fn axpy(&mut self, a: f64, x: &Self);
}

impl OdeState for f64 {
    fn axpy(&mut self, a: f64, x: &Self) {
        *self += a * x;
    }
}

impl OdeState for Complex64 {
    fn axpy(&mut self, a: f64, x: &Self) {
        *self += x * a;
    }
}

impl OdeState for DMatrix<Complex64> {
    fn axpy(&mut self, a: f64, x: &Self) {
        for (s, v) in self.iter_mut().zip(x.iter()) {
            *s += v * a;
        }
    }
}

/// One classical RK4 step of size `h` from `(t, y)`.
pub fn rk4_step<S, F>(mut f: F, t: f64, y: &S, h: f64) -> S
where
    S: OdeState,
    F: FnMut(f64, &S) -> S,
{
    let k1 = f(t, y);
    let mut tmp = y.clone();
    tmp.axpy(0.5 * h, &k1);
    let k2 = f(t + 0.5 * h, &tmp);
    let mut tmp = y.clone();
    tmp.axpy(0.5 * h, &k2);
    let k3 = f(t + 0.5 * h, &tmp);
    let mut tmp = y.clone();
    tmp.axpy(h, &k3);
    let k4 = f(t + h, &tmp);

    let mut out = y.clone();
    out.axpy(h / 6.0, &k1);
    out.axpy(h / 3.0, &k2);
    out.axpy(h / 3.0, &k3);
    out.axpy(h / 6.0, &k4);
    out
}

/// Number of equal steps covering `span` with a step no larger than `dt`.
///
/// Spans that are an integer multiple of `dt` up to rounding noise map to
/// exactly that multiple.
pub fn step_count(span: f64, dt: f64) -> usize {
    let ratio = span / dt;
    let rounded = ratio.round();
    if (ratio - rounded).abs() < 1e-9 * ratio.max(1.0) {
        rounded.max(1.0) as usize
    } else {
        ratio.ceil().max(1.0) as usize
    }
}
