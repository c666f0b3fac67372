//! Driven classical Van der Pol oscillator in its weakly nonlinear
//! (complex-amplitude) form, and the finite-time shortcut design that
//! steers it onto the synchronized limit cycle.
//!
//! The amplitude obeys
//!
//! ```text
//! dα/dt = -i ω0 α + α (κ1 - 2 κ2 |α|²) - i ε(t) / 2
//! ```
//!
//! The driving only enters the imaginary part, so `y = Im α` is the
//! *pilot* coordinate that the design prescribes directly, while
//! `x = Re α` is the *slave* coordinate obtained by integrating
//!
//! ```text
//! dx/dt = ω0 y + κ1 x - 2 κ2 (x² + y²) x
//! ```
//!
//! along the prescribed pilot path.

use std::f64::consts::{PI, TAU};

use log::warn;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{rk4_step, step_count};

/// |α| above which an integration is declared divergent.
pub const DEFAULT_DIVERGENCE_CAP: f64 = 1e3;

/// Default integration step, in units of the free period T0.
pub const DEFAULT_DT_PERIODS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicalParams {
    /// Free-oscillator angular frequency.
    pub omega0: f64,
    /// Linear gain rate.
    pub kappa1: f64,
    /// Nonlinear loss rate.
    pub kappa2: f64,
    /// Driving angular frequency.
    pub omega: f64,
    /// Sinusoidal driving amplitude.
    pub eps0: f64,
}

/// Rates expressed in units of the free period T0 = 2π/ω0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionlessClassical {
    pub kappa1: f64,
    pub kappa2: f64,
    pub eps0: f64,
    /// ω / ω0.
    pub omega_ratio: f64,
}

impl ClassicalParams {
    /// Time unit T0 = 2π/ω0.
    pub fn period(&self) -> f64 {
        TAU / self.omega0
    }

    pub fn from_dimensionless(d: DimensionlessClassical, omega0: f64) -> Self {
        let t0 = TAU / omega0;
        Self {
            omega0,
            kappa1: d.kappa1 / t0,
            kappa2: d.kappa2 / t0,
            omega: d.omega_ratio * omega0,
            eps0: d.eps0 / t0,
        }
    }

    pub fn to_dimensionless(&self) -> DimensionlessClassical {
        let t0 = self.period();
        DimensionlessClassical {
            kappa1: self.kappa1 * t0,
            kappa2: self.kappa2 * t0,
            eps0: self.eps0 * t0,
            omega_ratio: self.omega / self.omega0,
        }
    }

    /// The phase-locking example: κ̃1 = 1, κ̃2 = 0.5, ε̃0 = 1.5,
    /// ω = 1.05 ω0, with T0 = 1.
    pub fn locking_example() -> Self {
        Self::from_dimensionless(
            DimensionlessClassical {
                kappa1: 1.0,
                kappa2: 0.5,
                eps0: 1.5,
                omega_ratio: 1.05,
            },
            TAU,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.omega0, self.kappa1, self.kappa2, self.omega, self.eps0]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("params", "all values must be finite"));
        }
        if self.omega0 <= 0.0 {
            return Err(Error::invalid("omega0", "must be > 0"));
        }
        if self.kappa1 <= 0.0 {
            return Err(Error::invalid("kappa1", "must be > 0"));
        }
        if self.kappa2 <= 0.0 {
            return Err(Error::invalid("kappa2", "must be > 0"));
        }
        if self.eps0 < 0.0 {
            return Err(Error::invalid("eps0", "must be >= 0"));
        }
        Ok(())
    }

    /// Radius √(κ1/2κ2) of the undriven limit cycle.
    pub fn free_cycle_radius(&self) -> f64 {
        (self.kappa1 / (2.0 * self.kappa2)).sqrt()
    }
}

/// A point α = x + iy of the oscillator phase plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePoint {
    pub x: f64,
    pub y: f64,
}

impl PhasePoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn to_complex(self) -> Complex64 {
        Complex64::new(self.x, self.y)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: PhasePoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<Complex64> for PhasePoint {
    fn from(z: Complex64) -> Self {
        Self { x: z.re, y: z.im }
    }
}

/// Right-hand side of the amplitude equation.
pub fn vdp_derivative(alpha: PhasePoint, eps: f64, p: &ClassicalParams) -> PhasePoint {
    let a = alpha.to_complex();
    let i = Complex64::i();
    let rate = -i * p.omega0 * a + a * (p.kappa1 - 2.0 * p.kappa2 * a.norm_sqr()) - i * (eps / 2.0);
    rate.into()
}

/// A scalar driving ε(t).
pub trait Driving {
    fn eps(&self, t: f64) -> f64;
}

impl<F: Fn(f64) -> f64> Driving for F {
    fn eps(&self, t: f64) -> f64 {
        self(t)
    }
}

/// ε0 cos(ωt + φ), switched on at t = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub eps0: f64,
    pub omega: f64,
    pub phi: f64,
}

impl Sinusoid {
    /// The sudden drive ε0 Θ(t) cos(ωt) of the reference problem.
    pub fn sudden(p: &ClassicalParams) -> Self {
        Self {
            eps0: p.eps0,
            omega: p.omega,
            phi: 0.0,
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        self.eps0 * (self.omega * t + self.phi).cos()
    }
}

impl Driving for Sinusoid {
    fn eps(&self, t: f64) -> f64 {
        if t < 0.0 {
            0.0
        } else {
            self.value(t)
        }
    }
}

/// Sampled shortcut on [0, τ] followed by a sinusoidal tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingSignal {
    shortcut: Vec<(f64, f64)>,
    tail: Sinusoid,
    tau: f64,
}

impl DrivingSignal {
    /// Checks sample ordering and junction continuity.
    pub fn new(shortcut: Vec<(f64, f64)>, tail: Sinusoid, continuity_tol: f64) -> Result<Self> {
        if shortcut.len() < 2 {
            return Err(Error::invalid("shortcut", "needs at least two samples"));
        }
        if shortcut[0].0 != 0.0 {
            return Err(Error::invalid("shortcut", "first sample must be at t = 0"));
        }
        if shortcut.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid("shortcut", "sample times must be strictly increasing"));
        }
        let (tau, eps_end) = *shortcut.last().unwrap();
        let mismatch = (eps_end - tail.value(tau)).abs();
        if !(mismatch <= continuity_tol) {
            return Err(Error::ContinuityViolation {
                mismatch,
                tol: continuity_tol,
            });
        }
        Ok(Self { shortcut, tail, tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn tail(&self) -> Sinusoid {
        self.tail
    }

    pub fn shortcut(&self) -> &[(f64, f64)] {
        &self.shortcut
    }

    /// Peak |ε| over the shortcut part.
    pub fn shortcut_peak(&self) -> f64 {
        self.shortcut.iter().map(|s| s.1.abs()).fold(0.0, f64::max)
    }
}

impl Driving for DrivingSignal {
    fn eps(&self, t: f64) -> f64 {
        if t > self.tau {
            return self.tail.value(t);
        }
        interpolate(&self.shortcut, t)
    }
}

/// Linear interpolation in a time-ordered sample list, clamped at the ends.
pub(crate) fn interpolate(samples: &[(f64, f64)], t: f64) -> f64 {
    let first = samples[0];
    let last = samples[samples.len() - 1];
    if t <= first.0 {
        return first.1;
    }
    if t >= last.0 {
        return last.1;
    }
    let idx = samples.partition_point(|s| s.0 <= t);
    let (t0, v0) = samples[idx - 1];
    let (t1, v1) = samples[idx];
    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub point: PhasePoint,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassicalTrajectory {
    pub dt: f64,
    pub samples: Vec<TrajectorySample>,
}

impl ClassicalTrajectory {
    pub fn last(&self) -> PhasePoint {
        self.samples.last().expect("non-empty trajectory").point
    }

    /// Position at time `t` by linear interpolation between samples.
    pub fn point_at(&self, t: f64) -> Option<PhasePoint> {
        let first = self.samples.first()?;
        let idx_f = (t - first.t) / self.dt;
        if idx_f < -1e-9 || idx_f > (self.samples.len() - 1) as f64 + 1e-9 {
            return None;
        }
        let lo = (idx_f.floor().max(0.0) as usize).min(self.samples.len() - 1);
        let hi = (lo + 1).min(self.samples.len() - 1);
        let w = (idx_f - lo as f64).clamp(0.0, 1.0);
        let a = self.samples[lo].point;
        let b = self.samples[hi].point;
        Some(PhasePoint::new(a.x + w * (b.x - a.x), a.y + w * (b.y - a.y)))
    }

    /// CSV with header `t,x,y,eps`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,y,eps\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{}\n",
                crate::fmt17(s.t),
                crate::fmt17(s.point.x),
                crate::fmt17(s.point.y),
                crate::fmt17(s.eps)
            ));
        }
        out
    }
}

fn check_state(alpha: PhasePoint, t: f64, cap: f64) -> Result<()> {
    if !alpha.is_finite() || alpha.norm() > cap {
        return Err(Error::Divergence {
            t,
            magnitude: alpha.norm(),
        });
    }
    Ok(())
}

fn rk4_amplitude(
    alpha: PhasePoint,
    t: f64,
    h: f64,
    drive: &(impl Driving + ?Sized),
    p: &ClassicalParams,
) -> PhasePoint {
    let z = rk4_step(
        |s, a: &Complex64| vdp_derivative((*a).into(), drive.eps(s), p).to_complex(),
        t,
        &alpha.to_complex(),
        h,
    );
    z.into()
}

/// Fixed-step RK4 trajectory on [0, t_end].
pub fn integrate(
    alpha0: PhasePoint,
    drive: &(impl Driving + ?Sized),
    t_end: f64,
    dt: f64,
    p: &ClassicalParams,
) -> Result<ClassicalTrajectory> {
    integrate_with_cap(alpha0, drive, t_end, dt, p, DEFAULT_DIVERGENCE_CAP)
}

pub fn integrate_with_cap(
    alpha0: PhasePoint,
    drive: &(impl Driving + ?Sized),
    t_end: f64,
    dt: f64,
    p: &ClassicalParams,
    cap: f64,
) -> Result<ClassicalTrajectory> {
    check_step(dt, t_end)?;
    let n = step_count(t_end, dt);
    let h = t_end / n as f64;
    let mut samples = Vec::with_capacity(n + 1);
    let mut alpha = alpha0;
    check_state(alpha, 0.0, cap)?;
    samples.push(TrajectorySample {
        t: 0.0,
        point: alpha,
        eps: drive.eps(0.0),
    });
    for i in 0..n {
        let t = i as f64 * h;
        alpha = rk4_amplitude(alpha, t, h, drive, p);
        let t_next = (i + 1) as f64 * h;
        check_state(alpha, t_next, cap)?;
        samples.push(TrajectorySample {
            t: t_next,
            point: alpha,
            eps: drive.eps(t_next),
        });
    }
    Ok(ClassicalTrajectory { dt: h, samples })
}

/// Endpoint of [`integrate`] without storing the trajectory.
pub fn propagate_final(
    alpha0: PhasePoint,
    drive: &(impl Driving + ?Sized),
    t_end: f64,
    dt: f64,
    p: &ClassicalParams,
) -> Result<PhasePoint> {
    check_step(dt, t_end)?;
    let n = step_count(t_end, dt);
    let h = t_end / n as f64;
    let mut alpha = alpha0;
    for i in 0..n {
        alpha = rk4_amplitude(alpha, i as f64 * h, h, drive, p);
        check_state(alpha, (i + 1) as f64 * h, DEFAULT_DIVERGENCE_CAP)?;
    }
    Ok(alpha)
}

fn check_step(dt: f64, t_end: f64) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", "must be > 0"));
    }
    if !(t_end > 0.0) {
        return Err(Error::invalid("t_end", "must be > 0"));
    }
    Ok(())
}

/// Point of the sinusoidally driven trajectory used as the shortcut target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BranchPoint {
    pub point: PhasePoint,
    /// dy/dt of the reference trajectory at `t_inf`.
    pub y_slope: f64,
    pub t_inf: f64,
}

/// Position at `t_inf` under the sudden drive ε0 Θ(t) cos(ωt) from the
/// origin, together with the pilot slope there.
pub fn find_branch_point(p: &ClassicalParams, t_inf: f64, dt: f64) -> Result<BranchPoint> {
    find_branch_point_from(PhasePoint::default(), p, t_inf, dt)
}

pub fn find_branch_point_from(
    alpha0: PhasePoint,
    p: &ClassicalParams,
    t_inf: f64,
    dt: f64,
) -> Result<BranchPoint> {
    let min_span = 20.0 * TAU / p.omega;
    if t_inf < min_span {
        warn!("t_inf = {t_inf} covers fewer than 20 driving periods; branch point may be off the cycle");
    }
    let drive = Sinusoid::sudden(p);
    let point = propagate_final(alpha0, &drive, t_inf, dt, p)?;
    let y_slope = vdp_derivative(point, drive.value(t_inf), p).y;
    Ok(BranchPoint {
        point,
        y_slope,
        t_inf,
    })
}

/// A prescribed pilot trajectory y(t) on [0, τ].
pub trait PilotPath {
    fn value(&self, t: f64) -> f64;
    fn derivative(&self, t: f64) -> f64;
    fn duration(&self) -> f64;
}

/// Boundary data shared by every member of the polynomial family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathBoundary {
    pub y0: f64,
    pub y_inf: f64,
    pub y_slope_inf: f64,
    pub tau: f64,
}

/// P_γ(u) = y∞ + s τ (u-1) + (y0 - y∞ + s τ)(u-1)² + γ u (u-1)², u = t/τ.
///
/// Every member starts at y0, ends at y∞ and ends with slope s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolynomialPath {
    pub gamma: f64,
    pub boundary: PathBoundary,
}

pub fn polynomial_path(gamma: f64, boundary: PathBoundary) -> Result<PolynomialPath> {
    if !(boundary.tau > 0.0) {
        return Err(Error::invalid("tau", "must be > 0"));
    }
    Ok(PolynomialPath { gamma, boundary })
}

impl PilotPath for PolynomialPath {
    fn value(&self, t: f64) -> f64 {
        let b = &self.boundary;
        let u = t / b.tau;
        let v = u - 1.0;
        let s_tau = b.y_slope_inf * b.tau;
        b.y_inf + s_tau * v + (b.y0 - b.y_inf + s_tau) * v * v + self.gamma * u * v * v
    }

    fn derivative(&self, t: f64) -> f64 {
        let b = &self.boundary;
        let u = t / b.tau;
        let v = u - 1.0;
        let s_tau = b.y_slope_inf * b.tau;
        let dp_du = s_tau + 2.0 * (b.y0 - b.y_inf + s_tau) * v + self.gamma * (v * v + 2.0 * u * v);
        dp_du / b.tau
    }

    fn duration(&self) -> f64 {
        self.boundary.tau
    }
}

/// Slave coordinate x(t) sampled on the integration grid over [0, τ].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlaveSolution {
    pub dt: f64,
    pub t: Vec<f64>,
    pub x: Vec<f64>,
}

impl SlaveSolution {
    pub fn final_x(&self) -> f64 {
        *self.x.last().expect("non-empty slave solution")
    }
}

/// RK4 integration of the slave equation with the pilot evaluated exactly
/// at stage times.
pub fn solve_slave(
    path: &impl PilotPath,
    x0: f64,
    dt: f64,
    p: &ClassicalParams,
) -> Result<SlaveSolution> {
    let tau = path.duration();
    check_step(dt, tau)?;
    let n = step_count(tau, dt);
    let h = tau / n as f64;
    let rate = |t: f64, x: &f64| {
        let y = path.value(t);
        p.omega0 * y + p.kappa1 * x - 2.0 * p.kappa2 * (x * x + y * y) * x
    };
    let mut t_grid = Vec::with_capacity(n + 1);
    let mut xs = Vec::with_capacity(n + 1);
    let mut x = x0;
    t_grid.push(0.0);
    xs.push(x);
    for i in 0..n {
        let t = i as f64 * h;
        x = rk4_step(rate, t, &x, h);
        let t_next = (i + 1) as f64 * h;
        let mag = x.hypot(path.value(t_next));
        if !x.is_finite() || mag > DEFAULT_DIVERGENCE_CAP {
            return Err(Error::Divergence { t: t_next, magnitude: mag });
        }
        t_grid.push(t_next);
        xs.push(x);
    }
    Ok(SlaveSolution { dt: h, t: t_grid, x: xs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShootingOptions {
    /// Required |x_short,γ(τ) - x∞|.
    pub tol: f64,
    /// Largest |γ| tried while bracketing.
    pub max_gamma: f64,
    pub max_iterations: usize,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_gamma: 1e6,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShootingResult {
    pub gamma: f64,
    /// x_short,γ(τ) - x∞ at the returned γ.
    pub residual: f64,
    pub iterations: usize,
}

/// Finds γ0 with x_short,γ0(τ) = x∞ by geometric bracketing around γ = 0
/// followed by bisection.
pub fn shoot_gamma(
    x0: f64,
    x_inf: f64,
    boundary: PathBoundary,
    dt: f64,
    p: &ClassicalParams,
    opts: &ShootingOptions,
) -> Result<ShootingResult> {
    let residual = |gamma: f64| -> Result<f64> {
        let path = polynomial_path(gamma, boundary)?;
        Ok(solve_slave(&path, x0, dt, p)?.final_x() - x_inf)
    };

    let g0 = residual(0.0)?;
    if g0.abs() < opts.tol {
        return Ok(ShootingResult {
            gamma: 0.0,
            residual: g0,
            iterations: 0,
        });
    }

    // (inner, g(inner), outer, g(outer)) per side; a side is retired once it diverges.
    let mut sides: [Option<(f64, f64)>; 2] = [Some((0.0, g0)), Some((0.0, g0))];
    let mut bracket = None;
    let mut b = 1.0;
    while b <= opts.max_gamma && bracket.is_none() {
        let mut found: Vec<(f64, f64, f64, f64)> = Vec::new();
        for (k, sign) in [(0usize, 1.0), (1usize, -1.0)] {
            let Some((inner, g_inner)) = sides[k] else { continue };
            let outer = sign * b;
            match residual(outer) {
                Ok(g_outer) => {
                    if g_outer.abs() < opts.tol {
                        return Ok(ShootingResult {
                            gamma: outer,
                            residual: g_outer,
                            iterations: 0,
                        });
                    }
                    if g_outer.signum() != g_inner.signum() {
                        found.push((inner, g_inner, outer, g_outer));
                    }
                    sides[k] = Some((outer, g_outer));
                }
                Err(Error::Divergence { .. }) => sides[k] = None,
                Err(e) => return Err(e),
            }
        }
        // Prefer the bracket whose secant root lies closest to γ = 0.
        bracket = found.into_iter().min_by(|l, r| {
            let root = |(a, ga, c, gc): &(f64, f64, f64, f64)| (a - ga * (c - a) / (gc - ga)).abs();
            root(l).total_cmp(&root(r))
        });
        if sides.iter().all(Option::is_none) {
            break;
        }
        b *= 2.0;
    }
    let Some((mut lo, mut g_lo, mut hi, _)) = bracket else {
        return Err(Error::NoBracket {
            bound: opts.max_gamma,
        });
    };

    let mut last = (lo, g_lo);
    for it in 1..=opts.max_iterations {
        let mid = 0.5 * (lo + hi);
        let g_mid = residual(mid)?;
        last = (mid, g_mid);
        if g_mid.abs() < opts.tol {
            return Ok(ShootingResult {
                gamma: mid,
                residual: g_mid,
                iterations: it,
            });
        }
        if g_mid.signum() == g_lo.signum() {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
        }
        if mid == lo && mid == hi {
            break;
        }
    }
    Err(Error::SlowConvergence {
        iterations: opts.max_iterations,
        residual: last.1.abs(),
        tol: opts.tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionOptions {
    /// Adds an extra `+ y` term inside the inversion bracket. Comparison
    /// only; breaks the round-trip identity.
    pub add_extra_y_term: bool,
}

/// ε(t) = -2 [dy/dt + ω0 x - κ1 y + 2 κ2 (x² + y²) y], the exact inversion
/// of the imaginary part of the amplitude equation.
pub fn invert_driving(
    slave: &SlaveSolution,
    path: &impl PilotPath,
    p: &ClassicalParams,
    opts: &InversionOptions,
) -> Vec<(f64, f64)> {
    slave
        .t
        .iter()
        .zip(&slave.x)
        .map(|(&t, &x)| {
            let y = path.value(t);
            let dy = path.derivative(t);
            (t, invert_point(x, y, dy, p, opts))
        })
        .collect()
}

/// Driving recovered from a sampled trajectory, with dy/dt supplied.
pub fn invert_point(x: f64, y: f64, dy: f64, p: &ClassicalParams, opts: &InversionOptions) -> f64 {
    let mut bracket = dy + p.omega0 * x - p.kappa1 * y + 2.0 * p.kappa2 * (x * x + y * y) * y;
    if opts.add_extra_y_term {
        bracket += y;
    }
    -2.0 * bracket
}

/// Default |ε(τ⁻) - ε(τ⁺)| allowed at the shortcut/tail junction.
pub const DEFAULT_CONTINUITY_TOL: f64 = 1e-3;

/// Joins the shortcut with the tail ε0 cos(ωt + φ), φ = ω(t∞ - τ), so the
/// tail continues the reference drive from t∞ onward.
pub fn assemble_full_driving(
    shortcut: Vec<(f64, f64)>,
    p: &ClassicalParams,
    t_inf: f64,
    tau: f64,
    continuity_tol: f64,
) -> Result<DrivingSignal> {
    let end = shortcut.last().map(|s| s.0).unwrap_or(f64::NAN);
    if (end - tau).abs() > 1e-9 * tau.max(1.0) {
        return Err(Error::invalid("shortcut", format!("must end at tau = {tau}, ends at {end}")));
    }
    let tail = Sinusoid {
        eps0: p.eps0,
        omega: p.omega,
        phi: p.omega * (t_inf - tau),
    };
    DrivingSignal::new(shortcut, tail, continuity_tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShortcutOptions {
    pub dt: f64,
    pub shooting: ShootingOptions,
    pub inversion: InversionOptions,
    pub continuity_tol: f64,
}

impl Default for ShortcutOptions {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT_PERIODS,
            shooting: ShootingOptions::default(),
            inversion: InversionOptions::default(),
            continuity_tol: DEFAULT_CONTINUITY_TOL,
        }
    }
}

/// Everything produced by the classical design pipeline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassicalShortcut {
    pub alpha0: PhasePoint,
    pub branch: BranchPoint,
    pub shooting: ShootingResult,
    pub path: PolynomialPath,
    pub slave: SlaveSolution,
    pub driving: DrivingSignal,
}

/// Branch point, shooting, inversion and tail assembly in one call.
///
/// `dt` in `opts` is in absolute time units; the defaults assume T0 = 1.
pub fn design_shortcut(
    p: &ClassicalParams,
    alpha0: PhasePoint,
    tau: f64,
    t_inf: f64,
    opts: &ShortcutOptions,
) -> Result<ClassicalShortcut> {
    p.validate()?;
    let branch = find_branch_point(p, t_inf, opts.dt)?;
    let boundary = PathBoundary {
        y0: alpha0.y,
        y_inf: branch.point.y,
        y_slope_inf: branch.y_slope,
        tau,
    };
    let shooting = shoot_gamma(alpha0.x, branch.point.x, boundary, opts.dt, p, &opts.shooting)?;
    let path = polynomial_path(shooting.gamma, boundary)?;
    let slave = solve_slave(&path, alpha0.x, opts.dt, p)?;
    let samples = invert_driving(&slave, &path, p, &opts.inversion);
    let driving = assemble_full_driving(samples, p, t_inf, tau, opts.continuity_tol)?;
    Ok(ClassicalShortcut {
        alpha0,
        branch,
        shooting,
        path,
        slave,
        driving,
    })
}

/// Largest phase-plane distance between `traj` on `[t_from, t_to]` and
/// `reference` evaluated at `t + shift`.
pub fn reference_deviation(
    traj: &ClassicalTrajectory,
    reference: &ClassicalTrajectory,
    shift: f64,
    t_from: f64,
    t_to: f64,
) -> Option<f64> {
    let mut worst: f64 = 0.0;
    for s in traj.samples.iter().filter(|s| s.t >= t_from - 1e-12 && s.t <= t_to + 1e-12) {
        let r = reference.point_at(s.t + shift)?;
        worst = worst.max(s.point.distance(r));
    }
    Some(worst)
}

/// Phase offset between the oscillator and the drive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseDifference {
    pub t: Vec<f64>,
    /// atan2(y, x) - ωt - φ, continuously unwrapped.
    pub unwrapped: Vec<f64>,
    /// The unwrapped series folded into [-π/2, π/2).
    pub modulo_pi: Vec<f64>,
    /// -atan2(y, x) - ωt - φ, unwrapped. The free oscillator turns clockwise,
    /// so this is the series that stays bounded once the phase locks.
    pub conjugate: Vec<f64>,
    /// First time |α| fell below the origin threshold, if any.
    pub origin_crossing: Option<f64>,
}

impl PhaseDifference {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,dphi_unwrapped,dphi_mod_pi,dphi_conjugate,dphi_conjugate_mod_pi\n");
        for i in 0..self.t.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                crate::fmt17(self.t[i]),
                crate::fmt17(self.unwrapped[i]),
                crate::fmt17(self.modulo_pi[i]),
                crate::fmt17(self.conjugate[i]),
                crate::fmt17(fold_pi(self.conjugate[i]))
            ));
        }
        out
    }
}

pub const ORIGIN_THRESHOLD: f64 = 1e-6;

pub fn phase_difference(traj: &ClassicalTrajectory, omega: f64, phi: f64) -> PhaseDifference {
    let mut t = Vec::with_capacity(traj.samples.len());
    let mut unwrapped = Vec::with_capacity(traj.samples.len());
    let mut conjugate = Vec::with_capacity(traj.samples.len());
    let mut origin_crossing = None;
    let mut prev_raw: Option<f64> = None;
    let mut offset = 0.0;
    for s in &traj.samples {
        if origin_crossing.is_none() && s.point.norm() < ORIGIN_THRESHOLD {
            origin_crossing = Some(s.t);
        }
        let raw = s.point.y.atan2(s.point.x);
        if let Some(prev) = prev_raw {
            let jump = raw - prev;
            if jump > PI {
                offset -= TAU;
            } else if jump < -PI {
                offset += TAU;
            }
        }
        prev_raw = Some(raw);
        t.push(s.t);
        unwrapped.push(raw + offset - omega * s.t - phi);
        conjugate.push(-(raw + offset) - omega * s.t - phi);
    }
    let modulo_pi = unwrapped.iter().copied().map(fold_pi).collect();
    PhaseDifference {
        t,
        unwrapped,
        modulo_pi,
        conjugate,
        origin_crossing,
    }
}

/// Folds an angle into [-π/2, π/2).
pub fn fold_pi(v: f64) -> f64 {
    (v + PI / 2.0).rem_euclid(PI) - PI / 2.0
}

/// Angular frequency carrying the most power in a uniformly sampled series
/// after removing its least-squares linear trend.
///
/// The periodogram is scanned from `omega_min` to `omega_max` on a grid
/// eight times finer than the natural resolution 2π/T.
pub fn dominant_angular_frequency(t: &[f64], values: &[f64], omega_min: f64, omega_max: f64) -> f64 {
    let n = t.len() as f64;
    let t_mean = t.iter().sum::<f64>() / n;
    let v_mean = values.iter().sum::<f64>() / n;
    let sxx: f64 = t.iter().map(|ti| (ti - t_mean).powi(2)).sum();
    let sxy: f64 = t.iter().zip(values).map(|(ti, vi)| (ti - t_mean) * (vi - v_mean)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let detrended: Vec<f64> = t
        .iter()
        .zip(values)
        .map(|(ti, vi)| vi - v_mean - slope * (ti - t_mean))
        .collect();

    let span = t[t.len() - 1] - t[0];
    let d_omega = TAU / span / 8.0;
    let mut best = (omega_min, -1.0);
    let mut omega = omega_min;
    while omega <= omega_max {
        let (mut re, mut im) = (0.0, 0.0);
        for (ti, vi) in t.iter().zip(&detrended) {
            let (s, c) = (omega * ti).sin_cos();
            re += vi * c;
            im += vi * s;
        }
        let power = re * re + im * im;
        if power > best.1 {
            best = (omega, power);
        }
        omega += d_omega;
    }
    best.0
}
