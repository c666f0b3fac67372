//! Master-equation dynamics of the quantum Van der Pol oscillator in a
//! truncated Fock basis.
//!
//! ρ̇ = −i[H, ρ] + κ1 D[a†]ρ + κ2 D[a²]ρ with D[O]ρ = 2OρO† − O†Oρ − ρO†O.
//!
//! The production right-hand side exploits the structure of the problem:
//! with K = κ1 a a† + κ2 a†²a² (diagonal) and Heff = H − iK (tridiagonal),
//! ρ̇ = −i(Heff ρ − ρ Heff†) + 2κ1 a†ρa + 2κ2 a²ρa†², which costs O(N²)
//! per evaluation. A dense operator form is kept as an oracle.

use std::fmt::Write as _;

use log::debug;
use nalgebra::SymmetricEigen;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt17;
use crate::fock::{
    annihilation, hamiltonian, hermitian_part, CMatrix, DensityMatrix,
    FockOperator, MomentOperators, MomentSet, QuantumParams, DEFAULT_TRUNCATION_THRESHOLD,
};

/// Default integration step in units of 1/κ-scaled time.
pub const DEFAULT_DT: f64 = 1e-3;

/// Positivity tolerance applied at sample instants.
pub const DEFAULT_POSITIVITY_TOL: f64 = 1e-6;

/// Radius of a left half-disk inside the RK4 stability region (the exact
/// value is 2.6156; the region reaches 2.785 only on the real axis).
const RK4_HALF_DISK_RADIUS: f64 = 2.6;

/// D[O]ρ = 2OρO† − O†Oρ − ρO†O.
pub fn dissipator(op: &FockOperator, rho: &DensityMatrix) -> Result<CMatrix> {
    if op.dim() != rho.dim() {
        return Err(Error::DimensionMismatch {
            expected: op.dim(),
            got: rho.dim(),
        });
    }
    let o = op.matrix();
    let od = o.adjoint();
    let odo = &od * o;
    let r = rho.matrix();
    Ok((o * r * &od).map(|z| z * 2.0) - &odo * r - r * &odo)
}

/// One control value pair at a sample instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSample {
    pub t: f64,
    pub eps1: f64,
    pub eps2: f64,
}

/// A piece of the shortcut on which the controls are continuous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSegment {
    samples: Vec<ControlSample>,
}

impl ControlSegment {
    pub fn new(samples: Vec<ControlSample>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::invalid("segment", "needs at least two samples"));
        }
        if samples.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::invalid("segment", "sample times must be strictly increasing"));
        }
        if samples
            .iter()
            .any(|s| !(s.t.is_finite() && s.eps1.is_finite() && s.eps2.is_finite()))
        {
            return Err(Error::invalid("segment", "samples must be finite"));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[ControlSample] {
        &self.samples
    }

    pub fn start(&self) -> f64 {
        self.samples[0].t
    }

    pub fn end(&self) -> f64 {
        self.samples[self.samples.len() - 1].t
    }

    /// Linear interpolation, clamped to the segment ends.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        let s = &self.samples;
        if t <= s[0].t {
            return (s[0].eps1, s[0].eps2);
        }
        let last = s[s.len() - 1];
        if t >= last.t {
            return (last.eps1, last.eps2);
        }
        let i = s.partition_point(|p| p.t <= t);
        let (a, b) = (s[i - 1], s[i]);
        let w = (t - a.t) / (b.t - a.t);
        (a.eps1 + w * (b.eps1 - a.eps1), a.eps2 + w * (b.eps2 - a.eps2))
    }

    fn max_amplitude(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.eps1.hypot(s.eps2))
            .fold(0.0, f64::max)
    }
}

/// Controls (ε1, ε2): piecewise-continuous shortcut on [0, τ], then constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSchedule {
    segments: Vec<ControlSegment>,
    tail: (f64, f64),
}

impl ControlSchedule {
    /// Constant drive at all times.
    pub fn constant(eps1: f64, eps2: f64) -> Self {
        Self {
            segments: Vec::new(),
            tail: (eps1, eps2),
        }
    }

    /// Consecutive segments starting at t = 0, each beginning where the
    /// previous one ends.
    pub fn new(segments: Vec<ControlSegment>, tail: (f64, f64)) -> Result<Self> {
        if let Some(first) = segments.first() {
            if first.start().abs() > 1e-12 {
                return Err(Error::invalid("shortcut", "must start at t = 0"));
            }
        }
        for w in segments.windows(2) {
            if (w[1].start() - w[0].end()).abs() > 1e-9 * w[0].end().abs().max(1.0) {
                return Err(Error::invalid("shortcut", "segments must be contiguous"));
            }
        }
        if !(tail.0.is_finite() && tail.1.is_finite()) {
            return Err(Error::invalid("tail", "must be finite"));
        }
        Ok(Self { segments, tail })
    }

    /// Single continuous shortcut segment.
    pub fn from_samples(samples: Vec<ControlSample>, tail: (f64, f64)) -> Result<Self> {
        Self::new(vec![ControlSegment::new(samples)?], tail)
    }

    pub fn segments(&self) -> &[ControlSegment] {
        &self.segments
    }

    pub fn tail(&self) -> (f64, f64) {
        self.tail
    }

    /// Shortcut duration; zero for a constant drive.
    pub fn tau(&self) -> f64 {
        self.segments.last().map_or(0.0, ControlSegment::end)
    }

    /// Segment boundaries strictly inside (0, τ] where the controls may jump.
    pub fn breakpoints(&self) -> Vec<f64> {
        self.segments.iter().map(ControlSegment::end).collect()
    }

    /// Index of the segment holding `t`; at a boundary the earlier segment
    /// wins. `None` outside [0, τ].
    pub fn segment_at(&self, t: f64) -> Option<usize> {
        if t < 0.0 || t > self.tau() {
            return None;
        }
        self.segments.iter().position(|s| t <= s.end())
    }

    /// Controls at `t`; the tail values outside [0, τ].
    pub fn eval(&self, t: f64) -> (f64, f64) {
        self.eval_in(self.segment_at(t), t)
    }

    /// Controls at `t` drawn from a fixed piece (`None` = tail).
    pub fn eval_in(&self, segment: Option<usize>, t: f64) -> (f64, f64) {
        match segment {
            Some(k) => self.segments[k].eval(t),
            None => self.tail,
        }
    }

    pub fn max_amplitude(&self) -> f64 {
        self.segments
            .iter()
            .map(ControlSegment::max_amplitude)
            .fold(self.tail.0.hypot(self.tail.1), f64::max)
    }

    /// CSV `segment,t,eps1,eps2`; the tail is not listed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("segment,t,eps1,eps2\n");
        for (k, seg) in self.segments.iter().enumerate() {
            for s in seg.samples() {
                let _ = writeln!(out, "{k},{},{},{}", fmt17(s.t), fmt17(s.eps1), fmt17(s.eps2));
            }
        }
        out
    }
}

/// Precomputed structure for the O(N²) master-equation right-hand side.
#[derive(Debug, Clone)]
pub struct Liouvillian {
    p: QuantumParams,
    /// Diagonal of κ1 a a† + κ2 a†²a².
    damping: Vec<f64>,
    sqrt_n: Vec<f64>,
    /// √((n+1)(n+2)).
    sqrt_pair: Vec<f64>,
}

impl Liouvillian {
    pub fn new(p: &QuantumParams) -> Result<Self> {
        p.validate()?;
        let n = p.dim;
        let damping = (0..n)
            .map(|k| {
                let gain = if k + 1 < n { p.kappa1 * (k + 1) as f64 } else { 0.0 };
                gain + p.kappa2 * (k * k.saturating_sub(1)) as f64
            })
            .collect();
        Ok(Self {
            p: *p,
            damping,
            sqrt_n: (0..n).map(|k| (k as f64).sqrt()).collect(),
            sqrt_pair: (0..n).map(|k| (((k + 1) * (k + 2)) as f64).sqrt()).collect(),
        })
    }

    pub fn params(&self) -> &QuantumParams {
        &self.p
    }

    pub fn dim(&self) -> usize {
        self.p.dim
    }

    /// Writes ρ̇ into `out` for controls (ε1, ε2).
    pub fn apply_into(&self, rho: &CMatrix, eps: (f64, f64), out: &mut CMatrix) {
        let n = self.p.dim;
        let c = Complex64::new(eps.0, eps.1) * 0.5;
        let cc = c.conj();
        let delta = self.p.delta;
        let gain2 = 2.0 * self.p.kappa1;
        let loss2 = 2.0 * self.p.kappa2;
        let (k, sq, sp) = (&self.damping, &self.sqrt_n, &self.sqrt_pair);
        let r = rho.as_slice();
        let o = out.as_mut_slice();
        for col in 0..n {
            let base = col * n;
            for row in 0..n {
                let mut h = Complex64::new(delta * (row as f64 - col as f64), -(k[row] + k[col]))
                    * r[base + row];
                if row + 1 < n {
                    h += c * (sq[row + 1] * r[base + row + 1]);
                }
                if row >= 1 {
                    h += cc * (sq[row] * r[base + row - 1]);
                }
                if col + 1 < n {
                    h -= cc * (sq[col + 1] * r[base + n + row]);
                }
                if col >= 1 {
                    h -= c * (sq[col] * r[base - n + row]);
                }
                let mut v = Complex64::new(h.im, -h.re);
                if row >= 1 && col >= 1 {
                    v += r[base - n + row - 1] * (gain2 * sq[row] * sq[col]);
                }
                if row + 2 < n && col + 2 < n {
                    v += r[base + 2 * n + row + 2] * (loss2 * sp[row] * sp[col]);
                }
                o[base + row] = v;
            }
        }
    }

    pub fn apply(&self, rho: &CMatrix, eps: (f64, f64)) -> CMatrix {
        let mut out = CMatrix::zeros(rho.nrows(), rho.ncols());
        self.apply_into(rho, eps, &mut out);
        out
    }

    /// Upper bound on the modulus of the generator spectrum for drives up
    /// to `eps_max`, from the trace-norm bound on each part. The
    /// dissipator contributes twice the largest decay rate: once through
    /// the anticommutator and once more through the jump terms.
    pub fn rate_bound(&self, eps_max: f64) -> f64 {
        let n = self.p.dim as f64;
        let kmax = self.damping.iter().copied().fold(0.0, f64::max);
        4.0 * kmax + self.p.delta.abs() * (n - 1.0) + 2.0 * eps_max * (n - 1.0).sqrt()
    }

    /// Largest RK4 step that keeps every mode inside the stability region.
    pub fn stability_limit(&self, eps_max: f64) -> f64 {
        RK4_HALF_DISK_RADIUS / self.rate_bound(eps_max)
    }
}

/// ρ̇ for the controls in effect at `t`.
pub fn master_rhs(
    rho: &DensityMatrix,
    t: f64,
    schedule: &ControlSchedule,
    p: &QuantumParams,
) -> Result<CMatrix> {
    if rho.dim() != p.dim {
        return Err(Error::DimensionMismatch {
            expected: p.dim,
            got: rho.dim(),
        });
    }
    Ok(Liouvillian::new(p)?.apply(rho.matrix(), schedule.eval(t)))
}

/// Operator-level evaluation of the same right-hand side, used as an oracle.
pub fn master_rhs_dense(rho: &DensityMatrix, eps: (f64, f64), p: &QuantumParams) -> Result<CMatrix> {
    let h = hamiltonian(p, eps.0, eps.1)?.into_matrix();
    let a = annihilation(p.dim)?;
    let a2 = FockOperator::from_matrix(a.matrix() * a.matrix())?;
    let r = rho.matrix();
    let comm = (&h * r - r * &h).map(|z| z * Complex64::new(0.0, -1.0));
    Ok(comm
        + dissipator(&a.adjoint(), rho)?.map(|z| z * p.kappa1)
        + dissipator(&a2, rho)?.map(|z| z * p.kappa2))
}

/// Right side of the mean-amplitude equation built from moments:
/// −iΔ⟨α⟩ + (κ1 + 2κ2)⟨α⟩ − 2κ2⟨|α|²α⟩ − (ε2 + iε1)/2.
pub fn mean_equation_rhs(m: &MomentSet, eps: (f64, f64), p: &QuantumParams) -> Complex64 {
    Complex64::new(0.0, -p.delta) * m.mean + m.mean * (p.kappa1 + 2.0 * p.kappa2)
        - m.third * (2.0 * p.kappa2)
        - Complex64::new(eps.1, eps.0) * 0.5
}

/// ½ Σ |λ| over the eigenvalues of the Hermitian difference.
pub fn trace_distance(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(trace_distance_matrix(&(a.matrix() - b.matrix())))
}

fn trace_distance_matrix(diff: &CMatrix) -> f64 {
    let eig = SymmetricEigen::new(hermitian_part(diff));
    0.5 * eig.eigenvalues.iter().map(|l| l.abs()).sum::<f64>()
}

/// Cumulative size of the per-step Hermiticity and trace repairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectionLog {
    pub steps: usize,
    pub hermiticity: f64,
    pub trace: f64,
}

impl CorrectionLog {
    pub fn total(&self) -> f64 {
        self.hermiticity + self.trace
    }
}

/// Fixed-step RK4 integrator with reusable work buffers.
#[derive(Debug, Clone)]
pub struct Integrator {
    liouvillian: Liouvillian,
    k: [CMatrix; 4],
    tmp: CMatrix,
}

impl Integrator {
    pub fn new(p: &QuantumParams) -> Result<Self> {
        let liouvillian = Liouvillian::new(p)?;
        let z = CMatrix::zeros(p.dim, p.dim);
        Ok(Self {
            liouvillian,
            k: [z.clone(), z.clone(), z.clone(), z.clone()],
            tmp: z,
        })
    }

    pub fn liouvillian(&self) -> &Liouvillian {
        &self.liouvillian
    }

    /// Advances `rho` from `t0` to `t1` with controls from one schedule piece,
    /// using equal steps no larger than `dt`.
    pub fn advance(
        &mut self,
        rho: &mut CMatrix,
        schedule: &ControlSchedule,
        segment: Option<usize>,
        t0: f64,
        t1: f64,
        dt: f64,
        log: &mut CorrectionLog,
    ) {
        if t1 <= t0 {
            return;
        }
        let steps = crate::ode::step_count(t1 - t0, dt);
        let h = (t1 - t0) / steps as f64;
        for i in 0..steps {
            let t = t0 + i as f64 * h;
            self.rk4(rho, schedule, segment, t, h);
            repair(rho, log);
        }
    }

    fn rk4(&mut self, rho: &mut CMatrix, schedule: &ControlSchedule, seg: Option<usize>, t: f64, h: f64) {
        let l = &self.liouvillian;
        let [k1, k2, k3, k4] = &mut self.k;
        let tmp = &mut self.tmp;
        l.apply_into(rho, schedule.eval_in(seg, t), k1);
        combine(tmp, rho, 0.5 * h, k1);
        l.apply_into(tmp, schedule.eval_in(seg, t + 0.5 * h), k2);
        combine(tmp, rho, 0.5 * h, k2);
        l.apply_into(tmp, schedule.eval_in(seg, t + 0.5 * h), k3);
        combine(tmp, rho, h, k3);
        l.apply_into(tmp, schedule.eval_in(seg, t + h), k4);
        let (a, b) = (h / 6.0, h / 3.0);
        let r = rho.as_mut_slice();
        let (s1, s2, s3, s4) = (k1.as_slice(), k2.as_slice(), k3.as_slice(), k4.as_slice());
        for i in 0..r.len() {
            r[i] += (s1[i] + s4[i]) * a + (s2[i] + s3[i]) * b;
        }
    }
}

fn combine(out: &mut CMatrix, base: &CMatrix, h: f64, k: &CMatrix) {
    for ((o, b), k) in out.iter_mut().zip(base.iter()).zip(k.iter()) {
        *o = b + k * h;
    }
}

const FLUSH_BELOW: f64 = 1e-150;

/// Symmetrizes and renormalizes in place, accumulating the repair sizes.
fn repair(rho: &mut CMatrix, log: &mut CorrectionLog) {
    let n = rho.nrows();
    let mut herm: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let (u, l) = (rho[(i, j)], rho[(j, i)]);
            herm = herm.max(0.5 * (u - l.conj()).norm());
            let avg = (u + l.conj()) * 0.5;
            rho[(i, j)] = avg;
            rho[(j, i)] = avg.conj();
        }
        herm = herm.max(rho[(i, i)].im.abs());
        rho[(i, i)].im = 0.0;
    }
    // Entries this small only slow the arithmetic down once they go subnormal.
    for z in rho.iter_mut() {
        if z.re.abs() < FLUSH_BELOW {
            z.re = 0.0;
        }
        if z.im.abs() < FLUSH_BELOW {
            z.im = 0.0;
        }
    }
    let tr: f64 = (0..n).map(|i| rho[(i, i)].re).sum();
    if tr != 1.0 {
        rho.iter_mut().for_each(|z| *z /= tr);
    }
    log.steps += 1;
    log.hermiticity += herm;
    log.trace += (tr - 1.0).abs();
}

/// Largest step of the form 10⁻³/2ᵏ within the RK4 stability limit.
pub fn recommended_dt(p: &QuantumParams, eps_max: f64) -> Result<f64> {
    let limit = Liouvillian::new(p)?.stability_limit(eps_max);
    let mut dt = DEFAULT_DT;
    while dt > limit {
        dt *= 0.5;
    }
    Ok(dt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagationOptions {
    pub dt: f64,
    /// Interval between recorded observables; zero records only the end.
    pub sample_dt: f64,
    pub snapshot_times: Vec<f64>,
    pub truncation_threshold: f64,
    pub positivity_tol: f64,
}

impl Default for PropagationOptions {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            sample_dt: 0.1,
            snapshot_times: Vec::new(),
            truncation_threshold: DEFAULT_TRUNCATION_THRESHOLD,
            positivity_tol: DEFAULT_POSITIVITY_TOL,
        }
    }
}

impl PropagationOptions {
    pub fn with_dt(dt: f64) -> Self {
        Self {
            dt,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid("dt", "must be positive"));
        }
        if !(self.sample_dt >= 0.0) || !self.sample_dt.is_finite() {
            return Err(Error::invalid("sample_dt", "must be >= 0"));
        }
        if !(self.truncation_threshold > 0.0) {
            return Err(Error::invalid("truncation_threshold", "must be positive"));
        }
        if !(self.positivity_tol >= 0.0) {
            return Err(Error::invalid("positivity_tol", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantumTrajectory {
    pub times: Vec<f64>,
    pub observables: Vec<MomentSet>,
    /// Distance to the reference state at each sample; empty without one.
    pub trace_distance: Vec<f64>,
    pub snapshots: Vec<(f64, DensityMatrix)>,
    pub final_state: DensityMatrix,
    pub corrections: CorrectionLog,
}

impl QuantumTrajectory {
    pub fn last(&self) -> &MomentSet {
        self.observables.last().expect("trajectory has at least one sample")
    }

    /// Moments at the recorded sample closest to `t`.
    pub fn observable_at(&self, t: f64) -> Option<&MomentSet> {
        let i = self.times.partition_point(|&s| s < t);
        let candidates = [i.checked_sub(1), Some(i)];
        candidates
            .into_iter()
            .flatten()
            .filter(|&j| j < self.times.len())
            .min_by(|&a, &b| (self.times[a] - t).abs().total_cmp(&(self.times[b] - t).abs()))
            .map(|j| &self.observables[j])
    }

    /// (t, T(ρ(t), ρ_ref)) pairs.
    pub fn distance_series(&self) -> Vec<(f64, f64)> {
        self.times.iter().copied().zip(self.trace_distance.iter().copied()).collect()
    }

    /// CSV `t,re_mean,im_mean,re_third,im_third,phonon,trace_dist`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,re_mean,im_mean,re_third,im_third,phonon,trace_dist\n");
        for (i, (t, m)) in self.times.iter().zip(&self.observables).enumerate() {
            let d = self.trace_distance.get(i).copied().unwrap_or(f64::NAN);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                fmt17(*t),
                fmt17(m.mean.re),
                fmt17(m.mean.im),
                fmt17(m.third.re),
                fmt17(m.third.im),
                fmt17(m.phonon),
                fmt17(d)
            );
        }
        out
    }
}

/// Integrates the master equation from `rho0` at t = 0 to `t_end`.
///
/// Steps are aligned with control breakpoints, sample instants and snapshot
/// times. Positivity and the truncation guard are checked at every sample.
pub fn propagate(
    rho0: &DensityMatrix,
    schedule: &ControlSchedule,
    p: &QuantumParams,
    t_end: f64,
    opts: &PropagationOptions,
    reference: Option<&DensityMatrix>,
) -> Result<QuantumTrajectory> {
    opts.validate()?;
    if rho0.dim() != p.dim {
        return Err(Error::DimensionMismatch {
            expected: p.dim,
            got: rho0.dim(),
        });
    }
    if let Some(r) = reference {
        if r.dim() != p.dim {
            return Err(Error::DimensionMismatch {
                expected: p.dim,
                got: r.dim(),
            });
        }
    }
    if !(t_end >= 0.0) || !t_end.is_finite() {
        return Err(Error::invalid("t_end", "must be >= 0"));
    }
    let mut integrator = Integrator::new(p)?;
    let limit = integrator.liouvillian().stability_limit(schedule.max_amplitude());
    if opts.dt > limit {
        return Err(Error::UnstableStep { dt: opts.dt, limit });
    }
    let ops = MomentOperators::new(p.dim)?;

    let mut events = Vec::new();
    if opts.sample_dt > 0.0 {
        let count = crate::ode::step_count(t_end, opts.sample_dt);
        let h = t_end / count as f64;
        events.extend((0..=count).map(|k| (k as f64 * h, Event::Sample)));
    } else {
        events.push((0.0, Event::Sample));
        events.push((t_end, Event::Sample));
    }
    events.extend(
        opts.snapshot_times
            .iter()
            .filter(|&&t| (0.0..=t_end).contains(&t))
            .map(|&t| (t, Event::Snapshot)),
    );
    events.extend(
        schedule
            .breakpoints()
            .into_iter()
            .filter(|&t| t > 0.0 && t < t_end)
            .map(|t| (t, Event::Break)),
    );
    events.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rho = rho0.matrix().clone();
    let mut log = CorrectionLog::default();
    let mut traj = QuantumTrajectory {
        times: Vec::new(),
        observables: Vec::new(),
        trace_distance: Vec::new(),
        snapshots: Vec::new(),
        final_state: rho0.clone(),
        corrections: log,
    };
    let mut t = 0.0;
    for (te, kind) in events {
        if te > t {
            let segment = schedule.segment_at(0.5 * (t + te));
            integrator.advance(&mut rho, schedule, segment, t, te, opts.dt, &mut log);
            t = te;
        }
        match kind {
            Event::Break => {}
            Event::Snapshot => {
                let state = DensityMatrix::from_matrix_unchecked(rho.clone());
                check_state(&state, t, opts)?;
                traj.snapshots.push((t, state));
            }
            Event::Sample => {
                if traj.times.last() == Some(&t) {
                    continue;
                }
                let state = DensityMatrix::from_matrix_unchecked(rho.clone());
                check_state(&state, t, opts)?;
                traj.times.push(t);
                traj.observables.push(ops.evaluate(&state));
                if let Some(r) = reference {
                    traj.trace_distance.push(trace_distance_matrix(&(&rho - r.matrix())));
                }
            }
        }
    }
    debug!(
        "propagated to t = {t_end} in {} steps; corrections herm {:e}, trace {:e}",
        log.steps, log.hermiticity, log.trace
    );
    traj.final_state = DensityMatrix::from_matrix_unchecked(rho);
    traj.corrections = log;
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    Sample,
    Snapshot,
    Break,
}

fn check_state(state: &DensityMatrix, t: f64, opts: &PropagationOptions) -> Result<()> {
    let m = state.matrix();
    if m.iter().any(|z| !z.is_finite()) {
        return Err(Error::Divergence {
            t,
            magnitude: f64::INFINITY,
        });
    }
    let min_eigenvalue = state.min_eigenvalue();
    if min_eigenvalue < -opts.positivity_tol {
        return Err(Error::PositivityLoss { t, min_eigenvalue });
    }
    let population = state.top_population();
    if population > opts.truncation_threshold {
        return Err(Error::TruncationOverflow {
            t,
            population,
            threshold: opts.truncation_threshold,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteadyStateOptions {
    /// Frobenius-norm threshold on ρ̇.
    pub tol: f64,
    pub t_max: f64,
    /// Step; `None` picks [`recommended_dt`].
    pub dt: Option<f64>,
    /// Interval between convergence checks.
    pub check_every: f64,
}

impl Default for SteadyStateOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            t_max: 2000.0,
            dt: None,
            check_every: 0.5,
        }
    }
}

/// Stationary state under constant controls by long-time propagation from
/// `seed` (vacuum when `None`).
pub fn steady_state(
    eps: (f64, f64),
    p: &QuantumParams,
    seed: Option<&DensityMatrix>,
    opts: &SteadyStateOptions,
) -> Result<DensityMatrix> {
    if !(opts.tol > 0.0) || !(opts.t_max > 0.0) || !(opts.check_every > 0.0) {
        return Err(Error::invalid("steady_state", "tol, t_max and check_every must be positive"));
    }
    let schedule = ControlSchedule::constant(eps.0, eps.1);
    let dt = match opts.dt {
        Some(dt) => dt,
        None => recommended_dt(p, eps.0.hypot(eps.1))?,
    };
    let mut integrator = Integrator::new(p)?;
    let limit = integrator.liouvillian().stability_limit(eps.0.hypot(eps.1));
    if dt > limit {
        return Err(Error::UnstableStep { dt, limit });
    }
    let mut rho = match seed {
        Some(s) if s.dim() != p.dim => {
            return Err(Error::DimensionMismatch {
                expected: p.dim,
                got: s.dim(),
            })
        }
        Some(s) => s.matrix().clone(),
        None => DensityMatrix::vacuum(p.dim)?.into_matrix(),
    };
    let mut log = CorrectionLog::default();
    let mut t = 0.0;
    let mut rate = f64::INFINITY;
    while t < opts.t_max {
        let next = (t + opts.check_every).min(opts.t_max);
        integrator.advance(&mut rho, &schedule, None, t, next, dt, &mut log);
        t = next;
        rate = integrator.liouvillian().apply(&rho, eps).norm();
        if !rate.is_finite() {
            return Err(Error::Divergence {
                t,
                magnitude: f64::INFINITY,
            });
        }
        if rate < opts.tol {
            debug!("steady state reached at t = {t} (|rho'| = {rate:e})");
            return Ok(DensityMatrix::from_matrix_unchecked(rho));
        }
    }
    Err(Error::NotConverged {
        what: "steady state".into(),
        detail: format!("|drho/dt| = {rate:e} > {:e} at t_max = {}", opts.tol, opts.t_max),
    })
}

/// Largest truncation accepted by [`steady_state_nullspace`].
pub const NULLSPACE_MAX_DIM: usize = 15;

/// Stationary state from the kernel of the vectorized generator, with one
/// equation replaced by the trace condition. Cross-check for small N only.
pub fn steady_state_nullspace(eps: (f64, f64), p: &QuantumParams) -> Result<DensityMatrix> {
    if p.dim > NULLSPACE_MAX_DIM {
        return Err(Error::invalid("dim", format!("null-space solve limited to N <= {NULLSPACE_MAX_DIM}")));
    }
    let l = Liouvillian::new(p)?;
    let n = p.dim;
    let n2 = n * n;
    let mut gen = CMatrix::zeros(n2, n2);
    let mut basis = CMatrix::zeros(n, n);
    for j in 0..n2 {
        basis.as_mut_slice()[j] = Complex64::new(1.0, 0.0);
        let col = l.apply(&basis, eps);
        gen.column_mut(j).copy_from_slice(col.as_slice());
        basis.as_mut_slice()[j] = Complex64::new(0.0, 0.0);
    }
    let mut rhs = nalgebra::DVector::<Complex64>::zeros(n2);
    for j in 0..n2 {
        gen[(0, j)] = Complex64::new(0.0, 0.0);
    }
    for k in 0..n {
        gen[(0, k * n + k)] = Complex64::new(1.0, 0.0);
    }
    rhs[0] = Complex64::new(1.0, 0.0);
    let sol = gen.lu().solve(&rhs).ok_or_else(|| Error::NotConverged {
        what: "null-space steady state".into(),
        detail: "singular generator".into(),
    })?;
    let m = CMatrix::from_column_slice(n, n, sol.as_slice());
    Ok(DensityMatrix::from_matrix_unchecked(hermitian_part(&m)))
}

/// T(ρ(t), ρ_ref) sampled every `sample_dt` up to `horizon`.
pub fn trace_distance_curve(
    schedule: &ControlSchedule,
    p: &QuantumParams,
    rho0: &DensityMatrix,
    rho_ref: &DensityMatrix,
    horizon: f64,
    sample_dt: f64,
    dt: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(sample_dt > 0.0) {
        return Err(Error::invalid("sample_dt", "must be positive"));
    }
    let opts = PropagationOptions {
        dt,
        sample_dt,
        ..PropagationOptions::default()
    };
    Ok(propagate(rho0, schedule, p, horizon, &opts, Some(rho_ref))?.distance_series())
}

/// First time after which the series stays below `threshold`, linearly
/// interpolated between samples.
pub fn crossing_time(series: &[(f64, f64)], threshold: f64) -> Result<f64> {
    let Some(last_above) = series.iter().rposition(|&(_, v)| v >= threshold) else {
        return series
            .first()
            .map(|s| s.0)
            .ok_or(Error::NeverCrosses { threshold });
    };
    if last_above + 1 >= series.len() {
        return Err(Error::NeverCrosses { threshold });
    }
    let (t0, v0) = series[last_above];
    let (t1, v1) = series[last_above + 1];
    Ok(t0 + (v0 - threshold) / (v0 - v1) * (t1 - t0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{coherent_state, moments};
    use approx::assert_relative_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn params(delta: f64, k1: f64, k2: f64, dim: usize) -> QuantumParams {
        QuantumParams {
            delta,
            kappa1: k1,
            kappa2: k2,
            dim,
        }
    }

    #[test]
    fn dissipator_examples() {
        let a = annihilation(5).unwrap();
        let vac = DensityMatrix::vacuum(5).unwrap();
        assert!(dissipator(&a, &vac).unwrap().norm() < 1e-15);

        let one = DensityMatrix::fock_state(1, 5).unwrap();
        let d = dissipator(&a, &one).unwrap();
        assert_relative_eq!(d[(0, 0)].re, 2.0, epsilon = 1e-14);
        assert_relative_eq!(d[(1, 1)].re, -2.0, epsilon = 1e-14);
        assert!(d.iter().map(|z| z.norm()).sum::<f64>() - 4.0 < 1e-13);

        let a2 = FockOperator::from_matrix(a.matrix() * a.matrix()).unwrap();
        let two = DensityMatrix::fock_state(2, 5).unwrap();
        let d = dissipator(&a2, &two).unwrap();
        assert_relative_eq!(d[(0, 0)].re, 4.0, epsilon = 1e-13);
        assert_relative_eq!(d[(2, 2)].re, -4.0, epsilon = 1e-13);
    }

    #[test]
    fn structured_rhs_matches_dense() {
        let p = params(0.4, 0.7, 0.3, 9);
        let rho = coherent_state(c(0.6, -0.4), 9).unwrap();
        let rho = DensityMatrix::from_matrix_unchecked(
            (rho.matrix() + DensityMatrix::fock_state(7, 9).unwrap().matrix()).map(|z| z * 0.5),
        );
        let eps = (0.8, -0.3);
        let fast = Liouvillian::new(&p).unwrap().apply(rho.matrix(), eps);
        let dense = master_rhs_dense(&rho, eps, &p).unwrap();
        assert!((fast - dense).norm() < 1e-12);
    }

    #[test]
    fn number_states_stationary_without_coupling() {
        let p = QuantumParams {
            delta: 1.3,
            kappa1: 0.0,
            kappa2: 0.0,
            dim: 6,
        };
        let rho = DensityMatrix::fock_state(3, 6).unwrap();
        let rhs = master_rhs(&rho, 0.0, &ControlSchedule::constant(0.0, 0.0), &p).unwrap();
        assert!(rhs.norm() < 1e-12);
    }

    #[test]
    fn vacuum_dark_for_pair_loss() {
        let p = params(0.0, 0.0, 1.0, 6);
        let rhs = master_rhs(&DensityMatrix::vacuum(6).unwrap(), 0.0, &ControlSchedule::constant(0.0, 0.0), &p)
            .unwrap();
        assert!(rhs.norm() < 1e-15);
    }

    #[test]
    fn schedule_evaluation() {
        let seg1 = ControlSegment::new(vec![
            ControlSample { t: 0.0, eps1: 0.0, eps2: 1.0 },
            ControlSample { t: 1.0, eps1: 2.0, eps2: 1.0 },
        ])
        .unwrap();
        let seg2 = ControlSegment::new(vec![
            ControlSample { t: 1.0, eps1: -5.0, eps2: 0.0 },
            ControlSample { t: 2.0, eps1: -3.0, eps2: 0.0 },
        ])
        .unwrap();
        let s = ControlSchedule::new(vec![seg1, seg2], (1.0, 0.0)).unwrap();
        assert_eq!(s.tau(), 2.0);
        assert_eq!(s.eval(0.5), (1.0, 1.0));
        assert_eq!(s.eval(1.0), (2.0, 1.0));
        assert_eq!(s.eval_in(Some(1), 1.0), (-5.0, 0.0));
        assert_eq!(s.eval(1.5), (-4.0, 0.0));
        assert_eq!(s.eval(2.5), (1.0, 0.0));
        assert_eq!(s.eval(-0.1), (1.0, 0.0));
        assert_eq!(s.breakpoints(), vec![1.0, 2.0]);
    }

    #[test]
    fn schedule_rejects_bad_samples() {
        let bad = ControlSegment::new(vec![
            ControlSample { t: 0.0, eps1: 0.0, eps2: 0.0 },
            ControlSample { t: 0.0, eps1: 0.0, eps2: 0.0 },
        ]);
        assert!(bad.is_err());
        let late = ControlSegment::new(vec![
            ControlSample { t: 0.5, eps1: 0.0, eps2: 0.0 },
            ControlSample { t: 1.0, eps1: 0.0, eps2: 0.0 },
        ])
        .unwrap();
        assert!(ControlSchedule::new(vec![late], (0.0, 0.0)).is_err());
    }

    #[test]
    fn trace_distance_examples() {
        let v = DensityMatrix::vacuum(4).unwrap();
        let one = DensityMatrix::fock_state(1, 4).unwrap();
        let mix = DensityMatrix::from_populations(&[0.5, 0.5, 0.0, 0.0]).unwrap();
        assert_relative_eq!(trace_distance(&v, &v).unwrap(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(trace_distance(&v, &one).unwrap(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(trace_distance(&v, &mix).unwrap(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn crossing_time_rules() {
        let s = [(0.0, 1.0), (1.0, 0.5), (2.0, 0.005), (3.0, 0.02), (4.0, 0.0)];
        assert_relative_eq!(crossing_time(&s, 0.01).unwrap(), 3.5);
        assert_relative_eq!(crossing_time(&s, 0.6).unwrap(), 0.8);
        assert_eq!(crossing_time(&[(0.0, 0.001), (1.0, 0.0)], 0.01).unwrap(), 0.0);
        assert!(matches!(
            crossing_time(&[(0.0, 1.0), (1.0, 0.5)], 0.01),
            Err(Error::NeverCrosses { .. })
        ));
    }

    #[test]
    fn free_rotation_of_coherent_state() {
        let p = params(0.7, 0.0, 0.0, 30);
        let alpha0 = c(-1.0, 1.0);
        let rho0 = coherent_state(alpha0, 30).unwrap();
        let opts = PropagationOptions {
            sample_dt: 0.5,
            ..PropagationOptions::default()
        };
        let traj = propagate(&rho0, &ControlSchedule::constant(0.0, 0.0), &p, 3.0, &opts, None).unwrap();
        for (t, m) in traj.times.iter().zip(&traj.observables) {
            let exact = alpha0 * Complex64::from_polar(1.0, -0.7 * t);
            assert!((m.mean - exact).norm() < 1e-6 * t.max(1.0), "t = {t}");
        }
    }

    #[test]
    fn unstable_step_rejected() {
        let p = QuantumParams::strong();
        let rho0 = DensityMatrix::vacuum(p.dim).unwrap();
        let err = propagate(
            &rho0,
            &ControlSchedule::constant(1.0, 0.0),
            &p,
            1.0,
            &PropagationOptions::with_dt(1e-3),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnstableStep { .. }));
        assert_eq!(recommended_dt(&p, 1.0).unwrap(), 2.5e-4);
        assert_eq!(recommended_dt(&QuantumParams::weak(), 1.0).unwrap(), 1e-3);
    }

    #[test]
    fn nullspace_matches_propagated_steady_state() {
        let p = params(0.3, 1.0, 0.4, 12);
        let eps = (0.6, 0.2);
        let ns = steady_state_nullspace(eps, &p).unwrap();
        let ss = steady_state(eps, &p, None, &SteadyStateOptions::default()).unwrap();
        assert!(trace_distance(&ns, &ss).unwrap() < 1e-7);
        assert!(Liouvillian::new(&p).unwrap().apply(ns.matrix(), eps).norm() < 1e-10);
        let m = moments(&ss).unwrap();
        assert!(m.phonon > 0.0);
    }
}
