//! Phase-space evolution of the Wigner distribution W(x, y, t), α = x + iy.
//!
//! In real coordinates the master equation maps onto
//!
//! ```text
//! ∂t W = ∂x[(−Δy + ε2/2 + x g) W] + ∂y[(Δx + ε1/2 + y g) W]
//!      + ¼ ∇²(h W) + (κ2/8) [∂x ∇²(x W) + ∂y ∇²(y W)]
//! g = −κ1 + 2κ2 (r² − 1),   h = κ1 + 2κ2 (2r² − 1)
//! ```
//!
//! obtained from the correspondences aρ ↔ (α + ½∂α*)W, ρa ↔ (α − ½∂α*)W
//! and their adjoints with ∂α = ½(∂x − i∂y). Expanded, the coefficients are
//!
//! ```text
//! W      : 2(−κ1 + 4κ2 r²)
//! Wx     : −Δy + ε2/2 − κ1 x + 2κ2 x (r² + 1)
//! Wy     :  Δx + ε1/2 − κ1 y + 2κ2 y (r² + 1)
//! Wxx,Wyy: (κ1 + 4κ2 r²)/4
//! third  : (κ2/8) [x (Wxxx + Wxyy) + y (Wxxy + Wyyy)]
//! ```
//!
//! [`DiffusionForm::Simplified`] replaces h by κ1 + 2κ2(r² − 1), which drops
//! the 2κ2 ∂α∂α*(|α|²W) contribution; it is kept for comparison runs.
//!
//! Every term is discretized in flux form with central differences so the
//! scheme conserves ∫W and reproduces the exact discrete mean equation.
//! Time stepping is θ-weighted (Crank-Nicolson at θ = ½) with the linear
//! system solved by Jacobi-preconditioned BiCGSTAB. The outer ring is held
//! at zero.

use std::fmt::Write as _;

use log::{debug, warn};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt17;
use crate::fock::{MomentSet, QuantumParams};
use crate::lindblad::ControlSchedule;
use crate::ode::step_count;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DiffusionForm {
    #[default]
    Exact,
    Simplified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdeConfig {
    pub dt: f64,
    pub half_width: f64,
    pub theta: f64,
    pub points: usize,
    pub diffusion: DiffusionForm,
    /// Relative residual target for each implicit solve.
    pub solver_tol: f64,
    pub max_solver_iterations: usize,
    /// Boundary band (outer 3 cells) limit relative to the peak.
    pub boundary_tol: f64,
    /// Allowed drift of ∫W from 1.
    pub norm_tol: f64,
}

impl Default for PdeConfig {
    fn default() -> Self {
        Self {
            dt: 5e-4,
            half_width: 4.0,
            theta: 0.5,
            points: 256,
            diffusion: DiffusionForm::Exact,
            solver_tol: 1e-10,
            max_solver_iterations: 2000,
            boundary_tol: 1e-6,
            norm_tol: 1e-3,
        }
    }
}

impl PdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid("dt", "must be positive"));
        }
        if !(self.half_width > 0.0) || !self.half_width.is_finite() {
            return Err(Error::invalid("half_width", "must be positive"));
        }
        if !(0.5..=1.0).contains(&self.theta) {
            return Err(Error::invalid("theta", "must lie in [0.5, 1]"));
        }
        if self.points < 9 {
            return Err(Error::invalid("points", "must be >= 9"));
        }
        if !(self.solver_tol > 0.0) || self.max_solver_iterations == 0 {
            return Err(Error::invalid("solver_tol", "tolerance and iteration cap must be positive"));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.points - 1) as f64
    }
}

/// W sampled on an m × m grid over [−L, L]², stored with x varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct WignerGrid {
    half_width: f64,
    points: usize,
    values: Vec<f64>,
    t: f64,
}

/// Width of the boundary band checked for leakage.
const BAND: usize = 3;

impl WignerGrid {
    pub fn zeros(half_width: f64, points: usize) -> Self {
        Self {
            half_width,
            points,
            values: vec![0.0; points * points],
            t: 0.0,
        }
    }

    pub fn from_fn(half_width: f64, points: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut g = Self::zeros(half_width, points);
        for j in 0..points {
            for i in 0..points {
                g.values[j * points + i] = f(g.coordinate(i), g.coordinate(j));
            }
        }
        g
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.points - 1) as f64
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.spacing()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.points + i]
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    /// Trapezoid-rule integral of f(x, y) W.
    fn weighted_integral(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        let m = self.points;
        let dx = self.spacing();
        let mut acc = 0.0;
        for j in 0..m {
            let wy = if j == 0 || j == m - 1 { 0.5 } else { 1.0 };
            let y = self.coordinate(j);
            for i in 0..m {
                let wx = if i == 0 || i == m - 1 { 0.5 } else { 1.0 };
                acc += wx * wy * f(self.coordinate(i), y) * self.values[j * m + i];
            }
        }
        acc * dx * dx
    }

    /// ∫∫ W dx dy.
    pub fn integral(&self) -> f64 {
        self.weighted_integral(|_, _| 1.0)
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Largest |W| in the outer band of cells.
    pub fn band_max(&self) -> f64 {
        let m = self.points;
        let mut worst: f64 = 0.0;
        for j in 0..m {
            for i in 0..m {
                let edge = i.min(j).min(m - 1 - i).min(m - 1 - j);
                if edge < BAND {
                    worst = worst.max(self.values[j * m + i].abs());
                }
            }
        }
        worst
    }

    /// `DomainTooSmall` when the band exceeds `tol` times the peak.
    pub fn check_boundary(&self, tol: f64) -> Result<()> {
        let (band, peak) = (self.band_max(), self.peak());
        if band > tol * peak {
            return Err(Error::DomainTooSmall { band, peak });
        }
        Ok(())
    }

    /// CSV of |W| with one grid row (fixed y, increasing x) per line.
    pub fn abs_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.points) {
            let line: Vec<String> = row.iter().map(|v| fmt17(v.abs())).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn header(&self) -> SnapshotHeader {
        SnapshotHeader {
            t: self.t,
            half_width: self.half_width,
            points: self.points,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub t: f64,
    pub half_width: f64,
    pub points: usize,
}

/// W = (2/π) exp(−2|α − α0|²), renormalized on the grid.
pub fn initialize_coherent(alpha0: Complex64, cfg: &PdeConfig) -> Result<WignerGrid> {
    cfg.validate()?;
    if alpha0.norm() + 3.0 >= cfg.half_width {
        return Err(Error::DomainTooSmall {
            band: alpha0.norm() + 3.0,
            peak: cfg.half_width,
        });
    }
    let mut g = WignerGrid::from_fn(cfg.half_width, cfg.points, |x, y| {
        let d2 = (x - alpha0.re).powi(2) + (y - alpha0.im).powi(2);
        2.0 / std::f64::consts::PI * (-2.0 * d2).exp()
    });
    let m = cfg.points;
    for j in 0..m {
        for i in 0..m {
            if i == 0 || j == 0 || i == m - 1 || j == m - 1 {
                g.values[j * m + i] = 0.0;
            }
        }
    }
    let norm = g.integral();
    g.values.iter_mut().for_each(|v| *v /= norm);
    Ok(g)
}

/// Mean, Weyl third moment and phonon number ⟨|α|²⟩ − ½, each divided by
/// the grid integral of W.
pub fn moments_from_wigner(grid: &WignerGrid) -> MomentSet {
    let norm = grid.integral();
    let mx = grid.weighted_integral(|x, _| x) / norm;
    let my = grid.weighted_integral(|_, y| y) / norm;
    let tx = grid.weighted_integral(|x, y| (x * x + y * y) * x) / norm;
    let ty = grid.weighted_integral(|x, y| (x * x + y * y) * y) / norm;
    let r2 = grid.weighted_integral(|x, y| x * x + y * y) / norm;
    MomentSet {
        mean: Complex64::new(mx, my),
        third: Complex64::new(tx, ty),
        phonon: r2 - 0.5,
    }
}

/// Spatial operator A(ε) of dW/dt = A W on the grid interior.
#[derive(Debug, Clone)]
pub struct WignerOperator {
    m: usize,
    dx: f64,
    kappa2: f64,
    /// Control-free parts of the x and y fluxes.
    flux_x: Vec<f64>,
    flux_y: Vec<f64>,
    diffusion: Vec<f64>,
    xs: Vec<f64>,
    scratch_p: Vec<f64>,
    scratch_q: Vec<f64>,
    scratch_r: Vec<f64>,
    scratch_lq: Vec<f64>,
    scratch_lr: Vec<f64>,
}

impl WignerOperator {
    pub fn new(p: &QuantumParams, half_width: f64, points: usize, form: DiffusionForm) -> Self {
        let m = points;
        let dx = 2.0 * half_width / (m - 1) as f64;
        let xs: Vec<f64> = (0..m).map(|i| -half_width + i as f64 * dx).collect();
        let mut flux_x = vec![0.0; m * m];
        let mut flux_y = vec![0.0; m * m];
        let mut diffusion = vec![0.0; m * m];
        for j in 0..m {
            for i in 0..m {
                let (x, y) = (xs[i], xs[j]);
                let r2 = x * x + y * y;
                let g = -p.kappa1 + 2.0 * p.kappa2 * (r2 - 1.0);
                let k = j * m + i;
                flux_x[k] = -p.delta * y + x * g;
                flux_y[k] = p.delta * x + y * g;
                diffusion[k] = match form {
                    DiffusionForm::Exact => p.kappa1 + 2.0 * p.kappa2 * (2.0 * r2 - 1.0),
                    DiffusionForm::Simplified => p.kappa1 + 2.0 * p.kappa2 * (r2 - 1.0),
                };
            }
        }
        let zeros = vec![0.0; m * m];
        Self {
            m,
            dx,
            kappa2: p.kappa2,
            flux_x,
            flux_y,
            diffusion,
            xs,
            scratch_p: zeros.clone(),
            scratch_q: zeros.clone(),
            scratch_r: zeros.clone(),
            scratch_lq: zeros.clone(),
            scratch_lr: zeros,
        }
    }

    pub fn len(&self) -> usize {
        self.m * self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    /// Diagonal entries of A on the interior.
    fn diagonal(&self, k: usize) -> f64 {
        -self.diffusion[k] / (self.dx * self.dx)
    }

    fn is_boundary(&self, k: usize) -> bool {
        let (i, j) = (k % self.m, k / self.m);
        i == 0 || j == 0 || i == self.m - 1 || j == self.m - 1
    }

    /// out = A(ε) w; boundary entries of `out` are zero.
    pub fn apply(&mut self, w: &[f64], eps: (f64, f64), out: &mut [f64]) {
        let m = self.m;
        let dx = self.dx;
        let inv2dx = 0.5 / dx;
        let invdx2 = 1.0 / (dx * dx);
        for j in 0..m {
            for i in 0..m {
                let k = j * m + i;
                self.scratch_p[k] = self.diffusion[k] * w[k];
                self.scratch_q[k] = self.xs[i] * w[k];
                self.scratch_r[k] = self.xs[j] * w[k];
            }
        }
        laplacian(&self.scratch_q, m, invdx2, &mut self.scratch_lq);
        laplacian(&self.scratch_r, m, invdx2, &mut self.scratch_lr);
        let (hx, hy) = (0.5 * eps.1, 0.5 * eps.0);
        let third = self.kappa2 / 8.0;
        let (fx, fy, pp, lq, lr) = (
            &self.flux_x,
            &self.flux_y,
            &self.scratch_p,
            &self.scratch_lq,
            &self.scratch_lr,
        );
        out[..m].iter_mut().for_each(|v| *v = 0.0);
        out[m * (m - 1)..].iter_mut().for_each(|v| *v = 0.0);
        for j in 1..m - 1 {
            out[j * m] = 0.0;
            out[j * m + m - 1] = 0.0;
            for i in 1..m - 1 {
                let k = j * m + i;
                let (e, wst, n, s) = (k + 1, k - 1, k + m, k - m);
                let adv = ((fx[e] + hx) * w[e] - (fx[wst] + hx) * w[wst]
                    + (fy[n] + hy) * w[n]
                    - (fy[s] + hy) * w[s])
                    * inv2dx;
                let diff = 0.25 * (pp[e] + pp[wst] + pp[n] + pp[s] - 4.0 * pp[k]) * invdx2;
                let disp = third * (lq[e] - lq[wst] + lr[n] - lr[s]) * inv2dx;
                out[k] = adv + diff + disp;
            }
        }
    }
}

/// Five-point Laplacian with zero values outside the grid.
fn laplacian(f: &[f64], m: usize, invdx2: f64, out: &mut [f64]) {
    for j in 0..m {
        for i in 0..m {
            let k = j * m + i;
            let e = if i + 1 < m { f[k + 1] } else { 0.0 };
            let w = if i > 0 { f[k - 1] } else { 0.0 };
            let n = if j + 1 < m { f[k + m] } else { 0.0 };
            let s = if j > 0 { f[k - m] } else { 0.0 };
            out[k] = (e + w + n + s - 4.0 * f[k]) * invdx2;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// θ-scheme stepper with BiCGSTAB work buffers.
#[derive(Debug, Clone)]
pub struct WignerStepper {
    op: WignerOperator,
    cfg: PdeConfig,
    buf: [Vec<f64>; 8],
    /// Solver iterations used by the most recent step.
    pub last_iterations: usize,
}

impl WignerStepper {
    pub fn new(p: &QuantumParams, cfg: &PdeConfig) -> Result<Self> {
        cfg.validate()?;
        p.validate()?;
        let op = WignerOperator::new(p, cfg.half_width, cfg.points, cfg.diffusion);
        let n = op.len();
        Ok(Self {
            op,
            cfg: cfg.clone(),
            buf: std::array::from_fn(|_| vec![0.0; n]),
            last_iterations: 0,
        })
    }

    pub fn config(&self) -> &PdeConfig {
        &self.cfg
    }

    /// (I − θh A) v into `out`.
    fn system_apply(op: &mut WignerOperator, theta_h: f64, eps: (f64, f64), v: &[f64], out: &mut [f64]) {
        op.apply(v, eps, out);
        for k in 0..v.len() {
            out[k] = if op.is_boundary(k) { v[k] } else { v[k] - theta_h * out[k] };
        }
    }

    /// One step of size `h` from controls `eps0` at t to `eps1` at t + h.
    pub fn step(&mut self, grid: &mut WignerGrid, h: f64, eps0: (f64, f64), eps1: (f64, f64)) -> Result<()> {
        let theta = self.cfg.theta;
        let n = self.op.len();
        let [b, x, r, r0, pv, v, s, tv] = &mut self.buf;
        // b = (I + (1 − θ)h A(t)) W
        self.op.apply(&grid.values, eps0, b);
        for k in 0..n {
            b[k] = if self.op.is_boundary(k) {
                0.0
            } else {
                grid.values[k] + (1.0 - theta) * h * b[k]
            };
        }
        x.copy_from_slice(&grid.values);
        let theta_h = theta * h;
        let precond: Vec<f64> = (0..n)
            .map(|k| {
                if self.op.is_boundary(k) {
                    1.0
                } else {
                    1.0 / (1.0 - theta_h * self.op.diagonal(k))
                }
            })
            .collect();

        let b_norm = norm2(b).max(f64::MIN_POSITIVE);
        Self::system_apply(&mut self.op, theta_h, eps1, x, tv);
        for k in 0..n {
            r[k] = b[k] - tv[k];
        }
        r0.copy_from_slice(r);
        let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
        pv.iter_mut().for_each(|z| *z = 0.0);
        v.iter_mut().for_each(|z| *z = 0.0);
        let mut residual = norm2(r) / b_norm;
        let mut iterations = 0;
        let mut y = vec![0.0; n];
        let mut z = vec![0.0; n];
        while residual > self.cfg.solver_tol {
            if iterations >= self.cfg.max_solver_iterations {
                return Err(Error::SolverStall { iterations, residual });
            }
            iterations += 1;
            let rho_new = dot(r0, r);
            if rho_new == 0.0 || omega == 0.0 {
                return Err(Error::SolverStall { iterations, residual });
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for k in 0..n {
                pv[k] = r[k] + beta * (pv[k] - omega * v[k]);
                y[k] = precond[k] * pv[k];
            }
            Self::system_apply(&mut self.op, theta_h, eps1, &y, v);
            alpha = rho / dot(r0, v);
            for k in 0..n {
                s[k] = r[k] - alpha * v[k];
            }
            if norm2(s) / b_norm <= self.cfg.solver_tol {
                for k in 0..n {
                    x[k] += alpha * y[k];
                }
                break;
            }
            for k in 0..n {
                z[k] = precond[k] * s[k];
            }
            Self::system_apply(&mut self.op, theta_h, eps1, &z, tv);
            let tt = dot(tv, tv);
            omega = if tt > 0.0 { dot(tv, s) / tt } else { 0.0 };
            for k in 0..n {
                x[k] += alpha * y[k] + omega * z[k];
                r[k] = s[k] - omega * tv[k];
            }
            residual = norm2(r) / b_norm;
            if !residual.is_finite() {
                return Err(Error::SolverStall { iterations, residual });
            }
        }
        self.last_iterations = iterations;
        grid.values.copy_from_slice(x);
        grid.t += h;
        Ok(())
    }

    /// Steps from the grid's current time to `t_end` under `schedule`,
    /// aligning steps with the control breakpoints.
    pub fn advance(&mut self, grid: &mut WignerGrid, schedule: &ControlSchedule, t_end: f64) -> Result<()> {
        let mut marks: Vec<f64> = schedule
            .breakpoints()
            .into_iter()
            .filter(|&b| b > grid.t && b < t_end)
            .collect();
        marks.push(t_end);
        for mark in marks {
            let t0 = grid.t;
            if mark <= t0 {
                continue;
            }
            let seg = schedule.segment_at(0.5 * (t0 + mark));
            let n = step_count(mark - t0, self.cfg.dt);
            let h = (mark - t0) / n as f64;
            for k in 0..n {
                let t = t0 + k as f64 * h;
                self.step(grid, h, schedule.eval_in(seg, t), schedule.eval_in(seg, t + h))?;
            }
            grid.t = mark;
        }
        Ok(())
    }
}

/// Moments sampled along a Wigner evolution.
#[derive(Debug, Clone, PartialEq)]
pub struct WignerRun {
    pub times: Vec<f64>,
    pub moments: Vec<MomentSet>,
    /// Largest |∫W − 1| seen at the samples.
    pub norm_drift: f64,
    pub final_grid: WignerGrid,
    pub snapshots: Vec<WignerGrid>,
}

impl WignerRun {
    /// CSV `t,re_mean,im_mean,re_third,im_third,phonon`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,re_mean,im_mean,re_third,im_third,phonon\n");
        for (t, m) in self.times.iter().zip(&self.moments) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                fmt17(*t),
                fmt17(m.mean.re),
                fmt17(m.mean.im),
                fmt17(m.third.re),
                fmt17(m.third.im),
                fmt17(m.phonon)
            );
        }
        out
    }
}

/// Evolves a coherent state to `t_end`, recording moments every
/// `sample_dt` and grids at `snapshot_times`. Boundary leakage and
/// normalization drift are checked at every sample.
pub fn evolve(
    alpha0: Complex64,
    schedule: &ControlSchedule,
    p: &QuantumParams,
    cfg: &PdeConfig,
    t_end: f64,
    sample_dt: f64,
    snapshot_times: &[f64],
) -> Result<WignerRun> {
    if !(sample_dt > 0.0) || !(t_end >= 0.0) {
        return Err(Error::invalid("sample_dt", "sample_dt must be positive and t_end >= 0"));
    }
    let mut grid = initialize_coherent(alpha0, cfg)?;
    let mut stepper = WignerStepper::new(p, cfg)?;
    let count = step_count(t_end, sample_dt);
    let mut marks: Vec<(f64, bool)> = (0..=count)
        .map(|k| (t_end * k as f64 / count as f64, false))
        .collect();
    marks.extend(
        snapshot_times
            .iter()
            .filter(|&&t| (0.0..=t_end).contains(&t))
            .map(|&t| (t, true)),
    );
    marks.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut run = WignerRun {
        times: Vec::new(),
        moments: Vec::new(),
        norm_drift: 0.0,
        final_grid: grid.clone(),
        snapshots: Vec::new(),
    };
    for (t, snapshot) in marks {
        stepper.advance(&mut grid, schedule, t)?;
        grid.check_boundary(cfg.boundary_tol)?;
        let drift = (grid.integral() - 1.0).abs();
        run.norm_drift = run.norm_drift.max(drift);
        if drift > cfg.norm_tol {
            warn!("Wigner normalization drifted by {drift:e} at t = {t}");
        }
        if snapshot {
            run.snapshots.push(grid.clone());
        } else if run.times.last() != Some(&t) {
            run.times.push(t);
            run.moments.push(moments_from_wigner(&grid));
            debug!("wigner t = {t}: solver iterations {}", stepper.last_iterations);
        }
    }
    run.final_grid = grid;
    Ok(run)
}
