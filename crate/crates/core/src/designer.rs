//! Shortcut design for the quantum oscillator: piecewise-linear reference
//! paths for the mean amplitude, semiclassical control inversion, iterative
//! offset correction against the full master equation, and the third-moment
//! mismatch used to rank shortcuts.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Mutex;

use log::{debug, info};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt17;
use crate::fock::{coherent_state, DensityMatrix, MomentOperators, MomentSet, QuantumParams};
use crate::lindblad::{
    propagate, recommended_dt, steady_state, ControlSample, ControlSchedule, ControlSegment,
    PropagationOptions, SteadyStateOptions,
};
use crate::ode::step_count;

/// Two straight legs α0 → α_I → α∞, each traversed at constant speed over
/// τ/2, with α_I = (α0 + α∞)/2 + iΔy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpec {
    pub alpha0: Complex64,
    pub alpha_inf: Complex64,
    pub delta_y: f64,
    pub tau: f64,
}

impl PathSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid("tau", "must be positive"));
        }
        if !self.delta_y.is_finite() || !self.alpha0.is_finite() || !self.alpha_inf.is_finite() {
            return Err(Error::invalid("path", "endpoints and delta_y must be finite"));
        }
        Ok(())
    }

    pub fn midpoint(&self) -> Complex64 {
        (self.alpha0 + self.alpha_inf) * 0.5
    }

    pub fn waypoint(&self) -> Complex64 {
        self.midpoint() + Complex64::new(0.0, self.delta_y)
    }

    /// (α0, α_I, α∞).
    pub fn waypoints(&self) -> [Complex64; 3] {
        [self.alpha0, self.waypoint(), self.alpha_inf]
    }
}

/// Straight leg from `from` to `to` over [t0, t0 + duration].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leg {
    pub from: Complex64,
    pub to: Complex64,
    pub t0: f64,
    pub duration: f64,
}

impl Leg {
    pub fn value(&self, t: f64) -> Complex64 {
        self.from + (self.to - self.from) * ((t - self.t0) / self.duration)
    }

    pub fn velocity(&self) -> Complex64 {
        (self.to - self.from) / self.duration
    }

    pub fn end(&self) -> f64 {
        self.t0 + self.duration
    }
}

/// Piecewise-linear mean trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePath {
    legs: Vec<Leg>,
}

impl ReferencePath {
    pub fn legs(&self) -> &[Leg] {
        &self.legs
    }

    fn leg_at(&self, t: f64) -> &Leg {
        self.legs
            .iter()
            .find(|l| t <= l.end())
            .unwrap_or_else(|| self.legs.last().expect("path has legs"))
    }

    /// ⟨α⟩(t), clamped to the path ends.
    pub fn value(&self, t: f64) -> Complex64 {
        let first = &self.legs[0];
        if t <= first.t0 {
            return first.from;
        }
        let last = self.legs.last().expect("path has legs");
        if t >= last.end() {
            return last.to;
        }
        self.leg_at(t).value(t)
    }

    /// d⟨α⟩/dt; at a junction the earlier leg's value.
    pub fn derivative(&self, t: f64) -> Complex64 {
        self.leg_at(t).velocity()
    }

    pub fn duration(&self) -> f64 {
        self.legs.last().map_or(0.0, Leg::end)
    }
}

pub fn reference_path(spec: &PathSpec) -> Result<ReferencePath> {
    spec.validate()?;
    let half = 0.5 * spec.tau;
    let [a0, ai, af] = spec.waypoints();
    Ok(ReferencePath {
        legs: vec![
            Leg { from: a0, to: ai, t0: 0.0, duration: half },
            Leg { from: ai, to: af, t0: half, duration: half },
        ],
    })
}

/// dz/dt under the mean-amplitude equation with ⟨|α|²α⟩ → |z|²z.
pub fn semiclassical_rhs(z: Complex64, eps: (f64, f64), p: &QuantumParams) -> Complex64 {
    Complex64::new(0.0, -p.delta) * z + z * (p.kappa1 + 2.0 * p.kappa2)
        - z * (2.0 * p.kappa2 * z.norm_sqr())
        - Complex64::new(eps.1, eps.0) * 0.5
}

/// Controls (ε1, ε2) that make z(t) with velocity `dz` a semiclassical
/// solution.
pub fn invert_point(z: Complex64, dz: Complex64, p: &QuantumParams) -> (f64, f64) {
    let half = -dz + Complex64::new(0.0, -p.delta) * z + z * (p.kappa1 + 2.0 * p.kappa2)
        - z * (2.0 * p.kappa2 * z.norm_sqr());
    (2.0 * half.im, 2.0 * half.re)
}

/// Samples the inverted controls of one leg every `spacing` (local time
/// starting at `t_offset`).
fn invert_leg(leg: &Leg, p: &QuantumParams, spacing: f64, t_offset: f64) -> Result<ControlSegment> {
    let n = step_count(leg.duration, spacing);
    let h = leg.duration / n as f64;
    let dz = leg.velocity();
    let samples = (0..=n)
        .map(|k| {
            let s = k as f64 * h;
            let (eps1, eps2) = invert_point(leg.value(leg.t0 + s), dz, p);
            ControlSample { t: t_offset + s, eps1, eps2 }
        })
        .collect();
    ControlSegment::new(samples)
}

/// Controls for every leg of `path`, sampled every `spacing`, one schedule
/// segment per leg so the velocity jump is preserved.
pub fn semiclassical_inversion(
    path: &ReferencePath,
    p: &QuantumParams,
    spacing: f64,
    tail: (f64, f64),
) -> Result<ControlSchedule> {
    if !(spacing > 0.0) {
        return Err(Error::invalid("spacing", "must be positive"));
    }
    let segments = path
        .legs()
        .iter()
        .map(|leg| invert_leg(leg, p, spacing, leg.t0))
        .collect::<Result<Vec<_>>>()?;
    ControlSchedule::new(segments, tail)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IterationMode {
    /// Correct the first leg against α_I at τ/2, then the second against α∞.
    PerSegment,
    /// Correct only the end target of the full two-leg path.
    WholePath,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationRecord {
    /// Leg being corrected (0 for whole-path mode).
    pub segment: usize,
    /// 1-based iteration index.
    pub iteration: usize,
    /// Achieved mean minus the nominal waypoint.
    pub offset: Complex64,
    /// Target for the next iteration.
    pub corrected_target: Complex64,
}

pub fn records_to_jsonl(records: &[IterationRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignOptions {
    pub mode: IterationMode,
    /// Bound on |Δα| for acceptance.
    pub tol: f64,
    pub n_max: usize,
    /// Fraction of each offset removed from the target per iteration; 1
    /// is the plain fixed-point rule. Values below 1 damp the period-2
    /// oscillation seen on long legs.
    pub relaxation: f64,
    /// Integration step; `None` picks a stable power-of-two fraction of 10⁻³.
    pub dt: Option<f64>,
    /// Constant controls after the shortcut.
    pub tail: (f64, f64),
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            mode: IterationMode::PerSegment,
            tol: 1e-3,
            n_max: 6,
            relaxation: 1.0,
            dt: None,
            tail: (1.0, 0.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Design {
    pub schedule: ControlSchedule,
    pub records: Vec<IterationRecord>,
    /// State reached at t = τ under `schedule`.
    pub state_at_tau: DensityMatrix,
    pub moments_at_tau: MomentSet,
    pub converged: bool,
    pub dt: f64,
}

/// Iterates the semiclassical design until the propagated mean lands within
/// `tol` of each target; `NotConverged` after `n_max` iterations.
pub fn iterate_design(
    spec: &PathSpec,
    rho0: &DensityMatrix,
    p: &QuantumParams,
    opts: &DesignOptions,
) -> Result<Design> {
    let design = design_loop(spec, rho0, p, opts)?;
    if !design.converged {
        let last = design.records.last().map_or(f64::NAN, |r| r.offset.norm());
        return Err(Error::NotConverged {
            what: "shortcut design".into(),
            detail: format!("|offset| = {last:e} > {:e} after {} iterations", opts.tol, opts.n_max),
        });
    }
    Ok(design)
}

/// As [`iterate_design`], reporting non-convergence through
/// [`Design::converged`] instead of an error.
pub fn design_loop(
    spec: &PathSpec,
    rho0: &DensityMatrix,
    p: &QuantumParams,
    opts: &DesignOptions,
) -> Result<Design> {
    spec.validate()?;
    p.validate()?;
    if !(opts.tol > 0.0) || opts.n_max == 0 {
        return Err(Error::invalid("design", "tol must be positive and n_max >= 1"));
    }
    if !(opts.relaxation > 0.0 && opts.relaxation <= 1.0) {
        return Err(Error::invalid("design.relaxation", "must lie in (0, 1]"));
    }
    let nominal = reference_path(spec)?;
    let dt = match opts.dt {
        Some(dt) => dt,
        None => recommended_dt(p, max_control_amplitude(&nominal, p, opts.tail))?,
    };
    let ops = MomentOperators::new(p.dim)?;
    let half = 0.5 * spec.tau;
    let [a0, ai, af] = spec.waypoints();

    match opts.mode {
        IterationMode::PerSegment => {
            let mut records = Vec::new();
            let (seg1, rho_mid, ok1) = correct_leg(0, a0, ai, half, rho0, p, opts, dt, &ops, &mut records)?;
            let (seg2, rho_end, ok2) = correct_leg(1, ai, af, half, &rho_mid, p, opts, dt, &ops, &mut records)?;
            let seg2 = shift_segment(&seg2, half)?;
            let schedule = ControlSchedule::new(vec![seg1, seg2], opts.tail)?;
            let moments_at_tau = ops.evaluate(&rho_end);
            Ok(Design {
                schedule,
                records,
                state_at_tau: rho_end,
                moments_at_tau,
                converged: ok1 && ok2,
                dt,
            })
        }
        IterationMode::WholePath => {
            let mut records = Vec::new();
            let mut target = af;
            let mut best = None;
            for n in 1..=opts.n_max {
                let path = ReferencePath {
                    legs: vec![
                        Leg { from: a0, to: ai, t0: 0.0, duration: half },
                        Leg { from: ai, to: target, t0: half, duration: half },
                    ],
                };
                let schedule = semiclassical_inversion(&path, p, 0.5 * dt, opts.tail)?;
                let rho = propagate_to(rho0, &schedule, p, spec.tau, dt)?;
                let m = ops.evaluate(&rho);
                let offset = m.mean - af;
                let corrected_target = target - offset;
                records.push(IterationRecord { segment: 0, iteration: n, offset, corrected_target });
                debug!("whole-path iteration {n}: offset {offset}");
                let done = offset.norm() < opts.tol;
                best = Some((schedule, rho, m, done));
                if done {
                    break;
                }
                target = corrected_target;
            }
            let (schedule, state_at_tau, moments_at_tau, converged) = best.expect("n_max >= 1");
            Ok(Design {
                schedule,
                records,
                state_at_tau,
                moments_at_tau,
                converged,
                dt,
            })
        }
    }
}

/// Iterates one leg from `from` towards the nominal end `to`, shifting the
/// leg's target by the measured offset each round. Works in local time.
#[allow(clippy::too_many_arguments)]
fn correct_leg(
    segment: usize,
    from: Complex64,
    to: Complex64,
    duration: f64,
    rho_start: &DensityMatrix,
    p: &QuantumParams,
    opts: &DesignOptions,
    dt: f64,
    ops: &MomentOperators,
    records: &mut Vec<IterationRecord>,
) -> Result<(ControlSegment, DensityMatrix, bool)> {
    let mut target = to;
    let mut last = None;
    for n in 1..=opts.n_max {
        let leg = Leg { from, to: target, t0: 0.0, duration };
        let seg = invert_leg(&leg, p, 0.5 * dt, 0.0)?;
        let schedule = ControlSchedule::new(vec![seg.clone()], opts.tail)?;
        let rho = propagate_to(rho_start, &schedule, p, duration, dt)?;
        let offset = ops.evaluate(&rho).mean - to;
        let corrected_target = target - opts.relaxation * offset;
        records.push(IterationRecord { segment, iteration: n, offset, corrected_target });
        debug!("leg {segment} iteration {n}: offset {offset}");
        let done = offset.norm() < opts.tol;
        last = Some((seg, rho, done));
        if done {
            break;
        }
        target = corrected_target;
    }
    Ok(last.expect("n_max >= 1"))
}

fn propagate_to(
    rho0: &DensityMatrix,
    schedule: &ControlSchedule,
    p: &QuantumParams,
    t_end: f64,
    dt: f64,
) -> Result<DensityMatrix> {
    let opts = PropagationOptions {
        dt,
        sample_dt: 0.0,
        ..PropagationOptions::default()
    };
    Ok(propagate(rho0, schedule, p, t_end, &opts, None)?.final_state)
}

fn shift_segment(seg: &ControlSegment, by: f64) -> Result<ControlSegment> {
    ControlSegment::new(
        seg.samples()
            .iter()
            .map(|s| ControlSample { t: s.t + by, ..*s })
            .collect(),
    )
}

/// Largest control amplitude along the nominal path, padded for the
/// target shifts made during iteration.
fn max_control_amplitude(path: &ReferencePath, p: &QuantumParams, tail: (f64, f64)) -> f64 {
    let mut worst = tail.0.hypot(tail.1);
    for leg in path.legs() {
        for k in 0..=16 {
            let t = leg.t0 + leg.duration * k as f64 / 16.0;
            let (e1, e2) = invert_point(leg.value(t), leg.velocity(), p);
            worst = worst.max(e1.hypot(e2));
        }
    }
    1.5 * worst
}

/// Euclidean mismatch between the Weyl third moments of two moment sets.
pub fn delta3(final_moments: &MomentSet, target: &MomentSet) -> f64 {
    (final_moments.third - target.third).norm()
}

/// Stationary state and moments for constant controls.
#[derive(Debug, Clone)]
pub struct StationaryTarget {
    pub state: DensityMatrix,
    pub moments: MomentSet,
}

pub fn stationary_target(
    p: &QuantumParams,
    tail: (f64, f64),
    opts: &SteadyStateOptions,
) -> Result<StationaryTarget> {
    let state = steady_state(tail, p, None, opts)?;
    let moments = MomentOperators::new(p.dim)?.evaluate(&state);
    Ok(StationaryTarget { state, moments })
}

/// Stationary targets keyed by (Δ, κ1, κ2, N, tail).
#[derive(Debug, Default)]
pub struct TargetCache {
    entries: Mutex<HashMap<[u64; 6], StationaryTarget>>,
    opts: SteadyStateOptions,
}

impl TargetCache {
    pub fn new(opts: SteadyStateOptions) -> Self {
        Self {
            entries: Mutex::new(HashMap::new()),
            opts,
        }
    }

    pub fn get(&self, p: &QuantumParams, tail: (f64, f64)) -> Result<StationaryTarget> {
        let key = [
            p.delta.to_bits(),
            p.kappa1.to_bits(),
            p.kappa2.to_bits(),
            p.dim as u64,
            tail.0.to_bits(),
            tail.1.to_bits(),
        ];
        if let Some(hit) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let target = stationary_target(p, tail, &self.opts)?;
        self.entries
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| target.clone());
        Ok(target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanRow {
    pub delta_y: f64,
    pub tau: f64,
    /// NaN when the cell failed before producing a final state.
    pub delta3: f64,
    pub final_moments: Option<MomentSet>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanResult {
    pub rows: Vec<ScanRow>,
}

impl ScanResult {
    /// CSV `delta_y,tau,delta3,re_third,im_third,converged`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta_y,tau,delta3,re_third,im_third,converged\n");
        for r in &self.rows {
            let third = r.final_moments.map_or(Complex64::new(f64::NAN, f64::NAN), |m| m.third);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                fmt17(r.delta_y),
                fmt17(r.tau),
                fmt17(r.delta3),
                fmt17(third.re),
                fmt17(third.im),
                r.converged
            );
        }
        out
    }

    pub fn get(&self, delta_y: f64, tau: f64) -> Option<&ScanRow> {
        self.rows.iter().find(|r| r.delta_y == delta_y && r.tau == tau)
    }
}

/// Design template shared by every scan cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanTemplate {
    pub alpha0: Complex64,
    pub alpha_inf: Complex64,
    #[serde(default)]
    pub design: DesignOptions,
}

/// Δ3 on the (Δy, τ) grid, rows ordered Δy-major. Cells run concurrently;
/// a failing cell is recorded and the scan continues.
pub fn scan_delta3(
    delta_ys: &[f64],
    taus: &[f64],
    template: &ScanTemplate,
    p: &QuantumParams,
    target: &StationaryTarget,
) -> Result<ScanResult> {
    p.validate()?;
    let rho0 = coherent_state(template.alpha0, p.dim)?;
    let cells: Vec<(f64, f64)> = delta_ys
        .iter()
        .flat_map(|&dy| taus.iter().map(move |&tau| (dy, tau)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(delta_y, tau)| {
            let spec = PathSpec {
                alpha0: template.alpha0,
                alpha_inf: template.alpha_inf,
                delta_y,
                tau,
            };
            match design_loop(&spec, &rho0, p, &template.design) {
                Ok(d) => {
                    info!("scan cell dy = {delta_y}, tau = {tau}: converged {}", d.converged);
                    ScanRow {
                        delta_y,
                        tau,
                        delta3: delta3(&d.moments_at_tau, &target.moments),
                        final_moments: Some(d.moments_at_tau),
                        converged: d.converged,
                        error: None,
                    }
                }
                Err(e) => ScanRow {
                    delta_y,
                    tau,
                    delta3: f64::NAN,
                    final_moments: None,
                    converged: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(ScanResult { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentsVsTau {
    /// (τ, ⟨|α|²x⟩_τ, ⟨|α|²y⟩_τ); NaN for failed cells.
    pub rows: Vec<(f64, f64, f64)>,
    pub target: (f64, f64),
}

impl MomentsVsTau {
    /// Distance of each row's third moment from the target.
    pub fn gaps(&self) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .map(|&(tau, x, y)| (tau, (x - self.target.0).hypot(y - self.target.1)))
            .collect()
    }

    /// CSV `tau,re_third,im_third,re_target,im_target`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,re_third,im_third,re_target,im_target\n");
        for &(tau, x, y) in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                fmt17(tau),
                fmt17(x),
                fmt17(y),
                fmt17(self.target.0),
                fmt17(self.target.1)
            );
        }
        out
    }
}

/// Final third moments of Δy = 0 shortcuts as a function of τ.
pub fn moments_vs_tau(
    taus: &[f64],
    template: &ScanTemplate,
    p: &QuantumParams,
    target: &StationaryTarget,
) -> Result<MomentsVsTau> {
    let scan = scan_delta3(&[0.0], taus, template, p, target)?;
    Ok(MomentsVsTau {
        rows: scan
            .rows
            .iter()
            .map(|r| {
                let third = r.final_moments.map_or(Complex64::new(f64::NAN, f64::NAN), |m| m.third);
                (r.tau, third.re, third.im)
            })
            .collect(),
        target: (target.moments.third.re, target.moments.third.im),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::rk4_step;
    use approx::assert_relative_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn spec(dy: f64) -> PathSpec {
        PathSpec {
            alpha0: c(-1.0, 1.0),
            alpha_inf: c(-0.86, -0.38),
            delta_y: dy,
            tau: 2.0,
        }
    }

    #[test]
    fn waypoints_are_exact() {
        let s = spec(0.25);
        let path = reference_path(&s).unwrap();
        assert_eq!(path.value(0.0), s.alpha0);
        assert_eq!(path.value(1.0), s.waypoint());
        assert_eq!(path.value(2.0), s.alpha_inf);
        assert!((s.waypoint() - c(-0.93, 0.56)).norm() < 1e-15);
    }

    #[test]
    fn zero_offset_passes_through_midpoint() {
        let s = spec(0.0);
        let path = reference_path(&s).unwrap();
        assert!((path.value(1.0) - c(-0.93, 0.31)).norm() < 1e-15);
        assert_ne!(path.derivative(0.5), path.derivative(1.5));
    }

    #[test]
    fn constant_path_has_zero_velocity() {
        let s = PathSpec {
            alpha0: c(0.2, 0.1),
            alpha_inf: c(0.2, 0.1),
            delta_y: 0.0,
            tau: 1.0,
        };
        let path = reference_path(&s).unwrap();
        assert_eq!(path.derivative(0.3), c(0.0, 0.0));
        assert_eq!(path.value(0.7), c(0.2, 0.1));
    }

    #[test]
    fn non_positive_tau_rejected() {
        assert!(reference_path(&PathSpec { tau: 0.0, ..spec(0.0) }).is_err());
    }

    #[test]
    fn origin_needs_no_drive() {
        let p = QuantumParams::weak();
        assert_eq!(invert_point(c(0.0, 0.0), c(0.0, 0.0), &p), (0.0, 0.0));
    }

    #[test]
    fn stationary_point_holds_with_constant_drive() {
        let p = QuantumParams::weak();
        let z = c(0.4, -0.7);
        let eps = invert_point(z, c(0.0, 0.0), &p);
        assert!(semiclassical_rhs(z, eps, &p).norm() < 1e-14);
    }

    #[test]
    fn inversion_round_trip_under_semiclassical_dynamics() {
        let p = QuantumParams::strong();
        let s = spec(-0.3);
        let path = reference_path(&s).unwrap();
        let dt = 1e-3;
        let schedule = semiclassical_inversion(&path, &p, 0.5 * dt, (1.0, 0.0)).unwrap();
        let mut z = s.alpha0;
        let mut worst: f64 = 0.0;
        for (k, seg) in schedule.segments().iter().enumerate() {
            let (t0, t1) = (seg.start(), seg.end());
            let n = step_count(t1 - t0, dt);
            for i in 0..n {
                let t = t0 + i as f64 * dt;
                z = rk4_step(|t, z: &Complex64| semiclassical_rhs(*z, schedule.eval_in(Some(k), t), &p), t, &z, dt);
                worst = worst.max((z - path.value(t + dt)).norm());
            }
        }
        assert!(worst < 1e-9, "max deviation {worst:e}");
    }

    #[test]
    fn delta3_examples() {
        let m = |x: f64, y: f64| MomentSet {
            mean: c(0.0, 0.0),
            third: c(x, y),
            phonon: 0.0,
        };
        assert_eq!(delta3(&m(1.0, 2.0), &m(1.0, 2.0)), 0.0);
        assert_relative_eq!(delta3(&m(1.3, 1.6), &m(1.0, 2.0)), 0.5, epsilon = 1e-14);
        assert_eq!(delta3(&m(1.3, 1.6), &m(1.0, 2.0)), delta3(&m(1.0, 2.0), &m(1.3, 1.6)));
    }

    #[test]
    fn fixed_point_input_exits_after_one_iteration() {
        // Without pair loss the mean equation is linear, so the semiclassical
        // inversion is exact and the first propagated mean hits its target.
        let p = QuantumParams {
            delta: 0.3,
            kappa1: 0.0,
            kappa2: 0.0,
            dim: 30,
        };
        let z = c(0.5, -0.4);
        let tail = invert_point(z, c(0.0, 0.0), &p);
        let s = PathSpec {
            alpha0: z,
            alpha_inf: z,
            delta_y: 0.0,
            tau: 0.5,
        };
        let rho0 = coherent_state(z, p.dim).unwrap();
        let opts = DesignOptions {
            tail,
            ..DesignOptions::default()
        };
        let d = iterate_design(&s, &rho0, &p, &opts).unwrap();
        assert_eq!(d.records.len(), 2);
        assert!(d.records.iter().all(|r| r.iteration == 1 && r.offset.norm() < 1e-6));
        assert_eq!(d.schedule.segments().len(), 2);
        assert_eq!(d.schedule.tau(), 0.5);
    }

    #[test]
    fn records_serialize_as_json_lines() {
        let r = IterationRecord {
            segment: 0,
            iteration: 1,
            offset: c(0.1, -0.2),
            corrected_target: c(1.0, 0.0),
        };
        let text = records_to_jsonl(&[r, r]);
        assert_eq!(text.lines().count(), 2);
        let back: IterationRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn empty_tau_list_gives_empty_scan() {
        let p = QuantumParams { dim: 10, ..QuantumParams::weak() };
        let target = StationaryTarget {
            state: DensityMatrix::vacuum(10).unwrap(),
            moments: MomentSet {
                mean: c(0.0, 0.0),
                third: c(0.0, 0.0),
                phonon: 0.0,
            },
        };
        let template = ScanTemplate {
            alpha0: c(-0.5, 0.5),
            alpha_inf: c(0.0, 0.0),
            design: DesignOptions::default(),
        };
        let scan = scan_delta3(&[0.0, 0.1], &[], &template, &p, &target).unwrap();
        assert!(scan.rows.is_empty());
        assert_eq!(scan.to_csv(), "delta_y,tau,delta3,re_third,im_third,converged\n");
    }
}
