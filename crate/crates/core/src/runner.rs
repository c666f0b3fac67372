//! Scenario files and the pipelines behind the `vdp-sync` command.
//!
//! A scenario is a JSON object whose `kind` field selects the pipeline.
//! Unknown fields are rejected; omitted fields take the defaults below and
//! the fully resolved scenario is written back next to the outputs.
//! Outputs are staged in a scratch directory and moved into place only
//! after every file has been produced, so a failed run leaves nothing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classical::{
    design_shortcut, dominant_angular_frequency, fold_pi, integrate, phase_difference, reference_deviation,
    ClassicalParams, ClassicalTrajectory, PhasePoint, ShortcutOptions, Sinusoid, DEFAULT_DT_PERIODS,
};
use crate::designer::{
    delta3, iterate_design, design_loop, records_to_jsonl, scan_delta3, DesignOptions, MomentsVsTau, PathSpec,
    ScanTemplate, StationaryTarget, TargetCache,
};
use crate::error::{Error, Result};
use crate::fmt17;
use crate::fock::{coherent_state, DensityMatrix, MomentOperators, MomentSet, QuantumParams};
use crate::lindblad::{
    crossing_time, propagate, recommended_dt, steady_state, ControlSchedule, PropagationOptions, SteadyStateOptions,
};
use crate::wigner::{evolve, PdeConfig};

/// Scenario files shipped with the binary, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("classical_fig1", include_str!("../scenarios/classical_fig1.json")),
    ("classical_reference", include_str!("../scenarios/classical_reference.json")),
    ("quantum_steady", include_str!("../scenarios/quantum_steady.json")),
    ("quantum_fig3_weak", include_str!("../scenarios/quantum_fig3_weak.json")),
    ("quantum_fig3_strong", include_str!("../scenarios/quantum_fig3_strong.json")),
    ("quantum_scan_weak", include_str!("../scenarios/quantum_scan_weak.json")),
    ("quantum_scan_strong", include_str!("../scenarios/quantum_scan_strong.json")),
    ("wigner_crosscheck", include_str!("../scenarios/wigner_crosscheck.json")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scenario {
    ClassicalShortcut(ClassicalShortcutScenario),
    ClassicalReference(ClassicalReferenceScenario),
    QuantumSteady(QuantumSteadyScenario),
    QuantumShortcut(QuantumShortcutScenario),
    QuantumScan(QuantumScanScenario),
    WignerCrosscheck(WignerCrosscheckScenario),
}

/// Shortcut design for the classical oscillator and its comparison with
/// the sinusoidally driven reference. Times are in absolute units; the
/// default parameters use T0 = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassicalShortcutScenario {
    pub description: String,
    pub params: ClassicalParams,
    pub alpha0: PhasePoint,
    pub tau: f64,
    pub t_inf: f64,
    pub shortcut: ShortcutOptions,
    /// Simulated time after τ.
    pub horizon: f64,
    /// Spacing of the exported samples; a multiple of the step.
    pub sample_dt: f64,
    /// Length of the deviation check after τ, in free periods.
    pub deviation_periods: f64,
}

impl Default for ClassicalShortcutScenario {
    fn default() -> Self {
        Self {
            description: String::new(),
            params: ClassicalParams::locking_example(),
            alpha0: PhasePoint::default(),
            tau: 0.25,
            t_inf: 50.125,
            shortcut: ShortcutOptions::default(),
            horizon: 40.0,
            sample_dt: 0.01,
            deviation_periods: 10.0,
        }
    }
}

/// Sudden sinusoidal drive switched on at t = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassicalReferenceScenario {
    pub description: String,
    pub params: ClassicalParams,
    pub alpha0: PhasePoint,
    pub t_end: f64,
    pub dt: f64,
    pub sample_dt: f64,
}

impl Default for ClassicalReferenceScenario {
    fn default() -> Self {
        Self {
            description: String::new(),
            params: ClassicalParams::locking_example(),
            alpha0: PhasePoint::default(),
            t_end: 60.0,
            dt: DEFAULT_DT_PERIODS,
            sample_dt: 0.01,
        }
    }
}

/// Stationary states for a list of constant drives (ε1, ε2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantumSteadyScenario {
    pub description: String,
    pub params: QuantumParams,
    pub drives: Vec<(f64, f64)>,
    pub steady: SteadyStateOptions,
    /// Coherent amplitude of the initial state; vacuum when absent.
    pub seed: Option<Complex64>,
}

impl Default for QuantumSteadyScenario {
    fn default() -> Self {
        Self {
            description: String::new(),
            params: QuantumParams::weak(),
            drives: vec![(0.0, 0.0), (1.0, 0.0)],
            steady: SteadyStateOptions::default(),
            seed: None,
        }
    }
}

/// Designed shortcuts for several durations, followed by free relaxation
/// under the tail drive, with the trace distance to the stationary state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantumShortcutScenario {
    pub description: String,
    pub params: QuantumParams,
    pub alpha0: Complex64,
    /// Final mean; the stationary mean under the tail drive when absent.
    pub alpha_inf: Option<Complex64>,
    pub delta_y: f64,
    pub taus: Vec<f64>,
    pub design: DesignOptions,
    /// Also relax from α0 under the constant tail drive alone.
    pub include_constant: bool,
    pub horizon: f64,
    pub sample_dt: f64,
    pub threshold: f64,
    pub steady: SteadyStateOptions,
    /// Density-matrix snapshots written for every curve.
    pub snapshot_times: Vec<f64>,
    /// Keep going when a design misses its tolerance after n_max iterations.
    pub allow_unconverged: bool,
}

impl Default for QuantumShortcutScenario {
    fn default() -> Self {
        Self {
            description: String::new(),
            params: QuantumParams::weak(),
            alpha0: Complex64::new(-1.0, 1.0),
            alpha_inf: None,
            delta_y: 0.0,
            taus: vec![2.0, 1.0, 0.5],
            design: DesignOptions::default(),
            include_constant: true,
            horizon: 50.0,
            sample_dt: 0.1,
            threshold: 0.01,
            steady: SteadyStateOptions::default(),
            snapshot_times: Vec::new(),
            allow_unconverged: false,
        }
    }
}

/// Δ3 over a (Δy, τ) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantumScanScenario {
    pub description: String,
    pub params: QuantumParams,
    pub alpha0: Complex64,
    pub alpha_inf: Option<Complex64>,
    pub delta_ys: Vec<f64>,
    pub taus: Vec<f64>,
    pub design: DesignOptions,
    pub steady: SteadyStateOptions,
}

impl Default for QuantumScanScenario {
    fn default() -> Self {
        Self {
            description: String::new(),
            params: QuantumParams::weak(),
            alpha0: Complex64::new(-1.0, 1.0),
            alpha_inf: None,
            delta_ys: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            taus: vec![2.0],
            design: DesignOptions::default(),
            steady: SteadyStateOptions::default(),
        }
    }
}

/// One designed shortcut propagated by both the master equation and the
/// Wigner equation, with their moments compared sample by sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WignerCrosscheckScenario {
    pub description: String,
    pub params: QuantumParams,
    pub alpha0: Complex64,
    pub alpha_inf: Option<Complex64>,
    pub delta_y: f64,
    pub tau: f64,
    pub design: DesignOptions,
    pub t_end: f64,
    pub sample_dt: f64,
    pub pde: PdeConfig,
    pub snapshot_times: Vec<f64>,
    pub steady: SteadyStateOptions,
}

impl Default for WignerCrosscheckScenario {
    fn default() -> Self {
        Self {
            description: String::new(),
            params: QuantumParams::weak(),
            alpha0: Complex64::new(-1.0, 1.0),
            alpha_inf: None,
            delta_y: 0.0,
            tau: 2.0,
            design: DesignOptions::default(),
            t_end: 4.0,
            sample_dt: 0.1,
            pde: PdeConfig {
                half_width: 7.0,
                ..PdeConfig::default()
            },
            snapshot_times: Vec::new(),
            steady: SteadyStateOptions::default(),
        }
    }
}

fn scoped<T>(prefix: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidParameter { field, reason } => Error::InvalidParameter {
            field: format!("{prefix}.{field}"),
            reason,
        },
        other => other,
    })
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(field, "must be positive and finite"))
    }
}

fn all_positive(field: &str, vs: &[f64]) -> Result<()> {
    if vs.is_empty() {
        return Err(Error::invalid(field, "must not be empty"));
    }
    vs.iter().try_for_each(|&v| positive(field, v))
}

fn check_design(d: &DesignOptions) -> Result<()> {
    positive("design.tol", d.tol)?;
    if d.n_max == 0 {
        return Err(Error::invalid("design.n_max", "must be >= 1"));
    }
    if !(d.relaxation > 0.0 && d.relaxation <= 1.0) {
        return Err(Error::invalid("design.relaxation", "must lie in (0, 1]"));
    }
    if let Some(dt) = d.dt {
        positive("design.dt", dt)?;
    }
    Ok(())
}

impl Scenario {
    /// Parses a scenario; serde's message carries the line, column and
    /// offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::Config("scenario must be a JSON object".into()))?;
        let kind = match obj.remove("kind") {
            Some(serde_json::Value::String(k)) => k,
            Some(_) => return Err(Error::Config(located(text, "kind", "`kind` must be a string"))),
            None => return Err(Error::Config("missing field `kind`".into())),
        };
        let scenario = match kind.as_str() {
            "classical-shortcut" => Scenario::ClassicalShortcut(typed(value, text)?),
            "classical-reference" => Scenario::ClassicalReference(typed(value, text)?),
            "quantum-steady" => Scenario::QuantumSteady(typed(value, text)?),
            "quantum-shortcut" => Scenario::QuantumShortcut(typed(value, text)?),
            "quantum-scan" => Scenario::QuantumScan(typed(value, text)?),
            "wigner-crosscheck" => Scenario::WignerCrosscheck(typed(value, text)?),
            other => {
                return Err(Error::Config(located(
                    text,
                    "kind",
                    &format!("unknown kind `{other}`, expected one of {}", KINDS.join(", ")),
                )))
            }
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Scenario::ClassicalShortcut(_) => "classical-shortcut",
            Scenario::ClassicalReference(_) => "classical-reference",
            Scenario::QuantumSteady(_) => "quantum-steady",
            Scenario::QuantumShortcut(_) => "quantum-shortcut",
            Scenario::QuantumScan(_) => "quantum-scan",
            Scenario::WignerCrosscheck(_) => "wigner-crosscheck",
        }
    }

    pub fn description(&self) -> &str {
        match self {
            Scenario::ClassicalShortcut(s) => &s.description,
            Scenario::ClassicalReference(s) => &s.description,
            Scenario::QuantumSteady(s) => &s.description,
            Scenario::QuantumShortcut(s) => &s.description,
            Scenario::QuantumScan(s) => &s.description,
            Scenario::WignerCrosscheck(s) => &s.description,
        }
    }

    /// Field-level checks that do not need any computation.
    pub fn validate(&self) -> Result<()> {
        match self {
            Scenario::ClassicalShortcut(s) => {
                scoped("params", s.params.validate())?;
                positive("tau", s.tau)?;
                positive("t_inf", s.t_inf)?;
                positive("shortcut.dt", s.shortcut.dt)?;
                positive("horizon", s.horizon)?;
                positive("deviation_periods", s.deviation_periods)?;
                stride("sample_dt", s.sample_dt, s.shortcut.dt)?;
                if s.tau >= s.t_inf {
                    return Err(Error::invalid("tau", "must be shorter than t_inf"));
                }
            }
            Scenario::ClassicalReference(s) => {
                scoped("params", s.params.validate())?;
                positive("t_end", s.t_end)?;
                positive("dt", s.dt)?;
                stride("sample_dt", s.sample_dt, s.dt)?;
            }
            Scenario::QuantumSteady(s) => {
                scoped("params", s.params.validate())?;
                if s.drives.is_empty() {
                    return Err(Error::invalid("drives", "must not be empty"));
                }
                positive("steady.tol", s.steady.tol)?;
                positive("steady.t_max", s.steady.t_max)?;
            }
            Scenario::QuantumShortcut(s) => {
                scoped("params", s.params.validate())?;
                all_positive("taus", &s.taus)?;
                check_design(&s.design)?;
                positive("horizon", s.horizon)?;
                positive("sample_dt", s.sample_dt)?;
                positive("threshold", s.threshold)?;
                if s.taus.iter().any(|&t| t >= s.horizon) {
                    return Err(Error::invalid("horizon", "must exceed every tau"));
                }
            }
            Scenario::QuantumScan(s) => {
                scoped("params", s.params.validate())?;
                all_positive("taus", &s.taus)?;
                if s.delta_ys.is_empty() || s.delta_ys.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("delta_ys", "must be a non-empty list of finite values"));
                }
                check_design(&s.design)?;
            }
            Scenario::WignerCrosscheck(s) => {
                scoped("params", s.params.validate())?;
                positive("tau", s.tau)?;
                check_design(&s.design)?;
                positive("t_end", s.t_end)?;
                positive("sample_dt", s.sample_dt)?;
                scoped("pde", s.pde.validate())?;
            }
        }
        Ok(())
    }
}

pub const KINDS: [&str; 6] = [
    "classical-shortcut",
    "classical-reference",
    "quantum-steady",
    "quantum-shortcut",
    "quantum-scan",
    "wigner-crosscheck",
];

fn typed<T: serde::de::DeserializeOwned>(value: serde_json::Value, text: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        let field = unknown_field(&inner).or_else(|| path.rsplit('.').next().map(str::to_string));
        let path = if path == "." { String::new() } else { path };
        let label = match (&field, path.is_empty()) {
            (Some(f), true) => format!("field `{f}`"),
            (_, false) => format!("field `{path}`"),
            (None, true) => String::new(),
        };
        match field.and_then(|f| key_line(text, &f)) {
            Some(line) => Error::Config(format!("{label} (line {line}): {inner}")),
            None if label.is_empty() => Error::Config(inner),
            None => Error::Config(format!("{label}: {inner}")),
        }
    })
}

fn located(text: &str, key: &str, message: &str) -> String {
    match key_line(text, key) {
        Some(line) => format!("field `{key}` (line {line}): {message}"),
        None => format!("field `{key}`: {message}"),
    }
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    rest.split('`').next().map(str::to_string)
}

/// 1-based line of the first `"key":` in the source text.
fn key_line(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

fn stride(field: &str, sample_dt: f64, dt: f64) -> Result<usize> {
    positive(field, sample_dt)?;
    let ratio = sample_dt / dt;
    let k = ratio.round();
    if k < 1.0 || (ratio - k).abs() > 1e-6 * k {
        return Err(Error::invalid(field, format!("must be a whole multiple of the step {dt}")));
    }
    Ok(k as usize)
}

/// Loads a scenario from a file, or from the bundled set when `source`
/// names one and no such file exists.
pub fn load(source: &str) -> Result<(Scenario, String)> {
    let path = Path::new(source);
    let text = if path.exists() {
        fs::read_to_string(path)?
    } else if let Some((_, text)) = BUNDLED.iter().find(|(name, _)| *name == source) {
        text.to_string()
    } else {
        return Err(Error::Config(format!("scenario `{source}` is neither a file nor a bundled name")));
    };
    let scenario = Scenario::from_json(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{source}: {msg}")),
        other => other,
    })?;
    Ok((scenario, text))
}

/// A produced file, relative to the output directory.
#[derive(Debug, Clone)]
pub struct OutputFile {
    pub path: String,
    pub contents: Vec<u8>,
}

impl OutputFile {
    fn text(path: impl Into<String>, contents: String) -> Self {
        Self {
            path: path.into(),
            contents: contents.into_bytes(),
        }
    }

    fn json(path: impl Into<String>, value: &impl Serialize) -> Self {
        let mut text = serde_json::to_string_pretty(value).expect("output serializes");
        text.push('\n');
        Self::text(path, text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub kind: String,
    pub source: String,
    pub resolved_config: Scenario,
    pub wall_time_s: f64,
    pub outputs: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESOLVED_FILE: &str = "resolved_config.json";

/// Runs the scenario's pipeline and returns its files, without touching
/// the file system.
pub fn execute(scenario: &Scenario) -> Result<Vec<OutputFile>> {
    scenario.validate()?;
    let mut files = vec![OutputFile::json(RESOLVED_FILE, scenario)];
    files.extend(match scenario {
        Scenario::ClassicalShortcut(s) => classical_shortcut(s)?,
        Scenario::ClassicalReference(s) => classical_reference(s)?,
        Scenario::QuantumSteady(s) => quantum_steady(s)?,
        Scenario::QuantumShortcut(s) => quantum_shortcut(s)?,
        Scenario::QuantumScan(s) => quantum_scan(s)?,
        Scenario::WignerCrosscheck(s) => wigner_crosscheck(s)?,
    });
    Ok(files)
}

/// Executes `scenario` and moves its outputs plus a manifest into `out`,
/// which must be absent or empty.
pub fn run_to_dir(scenario: &Scenario, source: &str, out: &Path) -> Result<RunManifest> {
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        return Err(Error::Config(format!("output directory {} is not empty", out.display())));
    }
    let start = Instant::now();
    let files = execute(scenario)?;
    let outputs = files
        .iter()
        .map(|f| ManifestEntry {
            path: f.path.clone(),
            bytes: f.contents.len(),
            sha256: hex::encode(Sha256::digest(&f.contents)),
        })
        .collect();
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        kind: scenario.kind().to_string(),
        source: source.to_string(),
        resolved_config: scenario.clone(),
        wall_time_s: start.elapsed().as_secs_f64(),
        outputs,
    };
    let staging = staging_dir(out);
    let written = write_all(&staging, &files, &manifest).and_then(|_| {
        if out.exists() {
            fs::remove_dir(out)?;
        }
        fs::rename(&staging, out)
    });
    if let Err(e) = written {
        let _ = fs::remove_dir_all(&staging);
        return Err(e.into());
    }
    Ok(manifest)
}

fn staging_dir(out: &Path) -> PathBuf {
    let name = out.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned());
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    parent.join(format!(".{name}.partial-{}", std::process::id()))
}

fn write_all(dir: &Path, files: &[OutputFile], manifest: &RunManifest) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for f in files {
        let path = dir.join(&f.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, &f.contents)?;
    }
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)
}

fn decimate(traj: &ClassicalTrajectory, stride: usize) -> ClassicalTrajectory {
    ClassicalTrajectory {
        dt: traj.dt * stride as f64,
        samples: traj.samples.iter().step_by(stride).copied().collect(),
    }
}

fn phase_csv(t: &[f64], series: &[&[f64]], header: &str) -> String {
    let mut out = format!("{header}\n");
    for (i, ti) in t.iter().enumerate() {
        out.push_str(&fmt17(*ti));
        for s in series {
            out.push(',');
            out.push_str(&fmt17(s[i]));
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct ClassicalShortcutSummary {
    branch_point: PhasePoint,
    y_slope: f64,
    gamma: f64,
    shooting_residual: f64,
    shooting_iterations: usize,
    shortcut_peak: f64,
    eps0: f64,
    tail_phase: f64,
    reference_deviation: f64,
    dominant_phase_frequency: f64,
    dominant_frequency_ratio: f64,
    origin_crossing: Option<f64>,
}

fn classical_shortcut(s: &ClassicalShortcutScenario) -> Result<Vec<OutputFile>> {
    let p = &s.params;
    let dt = s.shortcut.dt;
    let k = stride("sample_dt", s.sample_dt, dt)?;
    let design = design_shortcut(p, s.alpha0, s.tau, s.t_inf, &s.shortcut)?;
    info!("shooting gamma = {}", design.shooting.gamma);
    let t_end = s.tau + s.horizon;
    let traj = integrate(s.alpha0, &design.driving, t_end, dt, p)?;
    let window = s.deviation_periods * p.period();
    let reference_end = s.t_inf + s.horizon.max(window) + 10.0 * dt;
    let reference = integrate(s.alpha0, &Sinusoid::sudden(p), reference_end, dt, p)?;
    let deviation = reference_deviation(&traj, &reference, s.t_inf - s.tau, s.tau, s.tau + window)
        .ok_or_else(|| Error::invalid("deviation_periods", "window runs past the simulated horizon"))?;

    let coarse = decimate(&traj, k);
    let phase = phase_difference(&traj, p.omega, design.driving.tail().phi);
    let idx: Vec<usize> = (0..phase.t.len()).step_by(k).collect();
    let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let (pt, pu, pm, pc) = (pick(&phase.t), pick(&phase.unwrapped), pick(&phase.modulo_pi), pick(&phase.conjugate));
    let after: Vec<usize> = (0..pt.len()).filter(|&i| pt[i] >= s.tau).collect();
    let at: Vec<f64> = after.iter().map(|&i| pt[i]).collect();
    let av: Vec<f64> = after.iter().map(|&i| pu[i]).collect();
    let dominant = dominant_angular_frequency(&at, &av, 0.2 * p.omega, 4.0 * p.omega);

    let mut driving = String::from("t,eps\n");
    for sample in &coarse.samples {
        let _ = writeln!(driving, "{},{}", fmt17(sample.t), fmt17(sample.eps));
    }
    let summary = ClassicalShortcutSummary {
        branch_point: design.branch.point,
        y_slope: design.branch.y_slope,
        gamma: design.shooting.gamma,
        shooting_residual: design.shooting.residual,
        shooting_iterations: design.shooting.iterations,
        shortcut_peak: design.driving.shortcut_peak(),
        eps0: p.eps0,
        tail_phase: design.driving.tail().phi,
        reference_deviation: deviation,
        dominant_phase_frequency: dominant,
        dominant_frequency_ratio: dominant / p.omega,
        origin_crossing: phase.origin_crossing,
    };
    let pcm: Vec<f64> = pc.iter().copied().map(fold_pi).collect();
    Ok(vec![
        OutputFile::text("trajectory.csv", coarse.to_csv()),
        OutputFile::text("reference.csv", decimate(&reference, k).to_csv()),
        OutputFile::text("driving.csv", driving),
        OutputFile::text(
            "phase.csv",
            phase_csv(
                &pt,
                &[&pu, &pm, &pc, &pcm],
                "t,dphi_unwrapped,dphi_mod_pi,dphi_conjugate,dphi_conjugate_mod_pi",
            ),
        ),
        OutputFile::json("summary.json", &summary),
    ])
}

#[derive(Serialize)]
struct ClassicalReferenceSummary {
    final_point: PhasePoint,
    final_radius: f64,
    free_cycle_radius: f64,
}

fn classical_reference(s: &ClassicalReferenceScenario) -> Result<Vec<OutputFile>> {
    let p = &s.params;
    let k = stride("sample_dt", s.sample_dt, s.dt)?;
    let traj = integrate(s.alpha0, &Sinusoid::sudden(p), s.t_end, s.dt, p)?;
    let phase = phase_difference(&decimate(&traj, k), p.omega, 0.0);
    let summary = ClassicalReferenceSummary {
        final_point: traj.last(),
        final_radius: traj.last().norm(),
        free_cycle_radius: p.free_cycle_radius(),
    };
    Ok(vec![
        OutputFile::text("trajectory.csv", decimate(&traj, k).to_csv()),
        OutputFile::text("phase.csv", phase.to_csv()),
        OutputFile::json("summary.json", &summary),
    ])
}

fn moments_row(out: &mut String, m: &MomentSet) {
    let _ = write!(
        out,
        "{},{},{},{},{}",
        fmt17(m.mean.re),
        fmt17(m.mean.im),
        fmt17(m.third.re),
        fmt17(m.third.im),
        fmt17(m.phonon)
    );
}

fn quantum_steady(s: &QuantumSteadyScenario) -> Result<Vec<OutputFile>> {
    let p = &s.params;
    let seed = s.seed.map(|a| coherent_state(a, p.dim)).transpose()?;
    let ops = MomentOperators::new(p.dim)?;
    let states = s
        .drives
        .par_iter()
        .map(|&eps| steady_state(eps, p, seed.as_ref(), &s.steady))
        .collect::<Result<Vec<DensityMatrix>>>()?;
    let mut csv = String::from("eps1,eps2,re_mean,im_mean,re_third,im_third,phonon,phonon_estimate\n");
    let mut files = Vec::new();
    for (k, (eps, state)) in s.drives.iter().zip(&states).enumerate() {
        let _ = write!(csv, "{},{},", fmt17(eps.0), fmt17(eps.1));
        moments_row(&mut csv, &ops.evaluate(state));
        let _ = writeln!(csv, ",{}", fmt17(p.phonon_estimate()));
        files.push(OutputFile::json(format!("state_{k}.json"), state));
    }
    files.insert(0, OutputFile::text("steady.csv", csv));
    Ok(files)
}

fn resolve_target(
    p: &QuantumParams,
    tail: (f64, f64),
    opts: &SteadyStateOptions,
) -> Result<StationaryTarget> {
    TargetCache::new(opts.clone()).get(p, tail)
}

fn tau_label(tau: f64) -> String {
    format!("tau_{tau}")
}

#[derive(Serialize)]
struct CurveSummary {
    label: String,
    tau: Option<f64>,
    converged: bool,
    dt: f64,
    iterations: usize,
    moments_at_tau: Option<MomentSet>,
    delta3: Option<f64>,
    crossing_time: Option<f64>,
    crossing_error: Option<String>,
}

#[derive(Serialize)]
struct QuantumShortcutSummary {
    alpha_inf: Complex64,
    target: MomentSet,
    threshold: f64,
    curves: Vec<CurveSummary>,
}

#[derive(Serialize)]
struct TaggedRecord<'a> {
    tau: f64,
    #[serde(flatten)]
    record: &'a crate::designer::IterationRecord,
}

fn quantum_shortcut(s: &QuantumShortcutScenario) -> Result<Vec<OutputFile>> {
    let p = &s.params;
    let target = resolve_target(p, s.design.tail, &s.steady)?;
    let alpha_inf = s.alpha_inf.unwrap_or(target.moments.mean);
    let rho0 = coherent_state(s.alpha0, p.dim)?;
    let prop_opts = |dt: f64| PropagationOptions {
        dt,
        sample_dt: s.sample_dt,
        snapshot_times: s.snapshot_times.clone(),
        ..PropagationOptions::default()
    };

    let mut jobs: Vec<Option<f64>> = s.taus.iter().copied().map(Some).collect();
    if s.include_constant {
        jobs.push(None);
    }
    let results = jobs
        .par_iter()
        .map(|&tau| -> Result<(Vec<OutputFile>, CurveSummary)> {
            let (schedule, design, dt) = match tau {
                Some(tau) => {
                    let spec = PathSpec {
                        alpha0: s.alpha0,
                        alpha_inf,
                        delta_y: s.delta_y,
                        tau,
                    };
                    let design = if s.allow_unconverged {
                        design_loop(&spec, &rho0, p, &s.design)?
                    } else {
                        iterate_design(&spec, &rho0, p, &s.design)?
                    };
                    let dt = design.dt;
                    (design.schedule.clone(), Some(design), dt)
                }
                None => {
                    let (e1, e2) = s.design.tail;
                    let dt = s.design.dt.map_or_else(|| recommended_dt(p, e1.hypot(e2)), Ok)?;
                    (ControlSchedule::constant(e1, e2), None, dt)
                }
            };
            let label = tau.map_or_else(|| "constant".to_string(), tau_label);
            let traj = propagate(&rho0, &schedule, p, s.horizon, &prop_opts(dt), Some(&target.state))?;
            let crossing = crossing_time(&traj.distance_series(), s.threshold);
            let mut files = vec![OutputFile::text(format!("trajectory_{label}.csv"), traj.to_csv())];
            for (t, rho) in &traj.snapshots {
                files.push(OutputFile::json(format!("snapshots/{label}_t_{t}.json"), rho));
            }
            if let Some(d) = &design {
                files.push(OutputFile::text(format!("controls_{label}.csv"), d.schedule.to_csv()));
                let tagged: String = d
                    .records
                    .iter()
                    .map(|r| {
                        serde_json::to_string(&TaggedRecord {
                            tau: tau.unwrap_or(f64::NAN),
                            record: r,
                        })
                        .expect("record serializes")
                            + "\n"
                    })
                    .collect();
                files.push(OutputFile::text(format!("iterations_{label}.jsonl"), tagged));
            }
            let summary = CurveSummary {
                label,
                tau,
                converged: design.as_ref().is_none_or(|d| d.converged),
                dt,
                iterations: design.as_ref().map_or(0, |d| d.records.len()),
                moments_at_tau: design.as_ref().map(|d| d.moments_at_tau),
                delta3: design.as_ref().map(|d| delta3(&d.moments_at_tau, &target.moments)),
                crossing_time: crossing.as_ref().ok().copied(),
                crossing_error: crossing.err().map(|e| e.to_string()),
            };
            Ok((files, summary))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut files = Vec::new();
    let mut curves = Vec::new();
    for (f, c) in results {
        files.extend(f);
        curves.push(c);
    }
    files.push(OutputFile::json(
        "summary.json",
        &QuantumShortcutSummary {
            alpha_inf,
            target: target.moments,
            threshold: s.threshold,
            curves,
        },
    ));
    Ok(files)
}

#[derive(Serialize)]
struct ScanSummary {
    alpha_inf: Complex64,
    target: MomentSet,
    minimum: Option<(f64, f64, f64)>,
    failed_cells: Vec<(f64, f64, String)>,
}

fn quantum_scan(s: &QuantumScanScenario) -> Result<Vec<OutputFile>> {
    let p = &s.params;
    let target = resolve_target(p, s.design.tail, &s.steady)?;
    let alpha_inf = s.alpha_inf.unwrap_or(target.moments.mean);
    let template = ScanTemplate {
        alpha0: s.alpha0,
        alpha_inf,
        design: s.design.clone(),
    };
    let scan = scan_delta3(&s.delta_ys, &s.taus, &template, p, &target)?;
    let minimum = scan
        .rows
        .iter()
        .filter(|r| r.delta3.is_finite())
        .min_by(|a, b| a.delta3.total_cmp(&b.delta3))
        .map(|r| (r.delta_y, r.tau, r.delta3));
    let failed_cells = scan
        .rows
        .iter()
        .filter_map(|r| r.error.clone().map(|e| (r.delta_y, r.tau, e)))
        .collect();
    let mut files = vec![OutputFile::text("scan.csv", scan.to_csv())];
    let at_zero: Vec<(f64, f64, f64)> = scan
        .rows
        .iter()
        .filter(|r| r.delta_y == 0.0)
        .map(|r| {
            let third = r.final_moments.map_or(Complex64::new(f64::NAN, f64::NAN), |m| m.third);
            (r.tau, third.re, third.im)
        })
        .collect();
    if !at_zero.is_empty() {
        let table = MomentsVsTau {
            rows: at_zero,
            target: (target.moments.third.re, target.moments.third.im),
        };
        files.push(OutputFile::text("moments_vs_tau.csv", table.to_csv()));
    }
    files.push(OutputFile::json(
        "summary.json",
        &ScanSummary {
            alpha_inf,
            target: target.moments,
            minimum,
            failed_cells,
        },
    ));
    Ok(files)
}

#[derive(Serialize)]
struct CrosscheckSummary {
    alpha_inf: Complex64,
    design_converged: bool,
    design_dt: f64,
    max_mean_relative_error: f64,
    max_third_relative_error: f64,
    wigner_norm_drift: f64,
    initial_third_master: Complex64,
    initial_third_wigner: Complex64,
    initial_third_exact: Complex64,
}

fn wigner_crosscheck(s: &WignerCrosscheckScenario) -> Result<Vec<OutputFile>> {
    let p = &s.params;
    let alpha_inf = match s.alpha_inf {
        Some(a) => a,
        None => resolve_target(p, s.design.tail, &s.steady)?.moments.mean,
    };
    let rho0 = coherent_state(s.alpha0, p.dim)?;
    let spec = PathSpec {
        alpha0: s.alpha0,
        alpha_inf,
        delta_y: s.delta_y,
        tau: s.tau,
    };
    let design = iterate_design(&spec, &rho0, p, &s.design)?;
    let opts = PropagationOptions {
        dt: design.dt,
        sample_dt: s.sample_dt,
        ..PropagationOptions::default()
    };
    let master = propagate(&rho0, &design.schedule, p, s.t_end, &opts, None)?;
    let wigner = evolve(s.alpha0, &design.schedule, p, &s.pde, s.t_end, s.sample_dt, &s.snapshot_times)?;
    if master.times.len() != wigner.times.len() {
        return Err(Error::Config(format!(
            "sample grids differ: {} master samples vs {} Wigner samples",
            master.times.len(),
            wigner.times.len()
        )));
    }
    let mut comparison = String::from("t,mean_rel_err,third_rel_err\n");
    let (mut worst_mean, mut worst_third) = (0.0f64, 0.0f64);
    for ((t, m), w) in master.times.iter().zip(&master.observables).zip(&wigner.moments) {
        let e_mean = (w.mean - m.mean).norm() / m.mean.norm();
        let e_third = (w.third - m.third).norm() / m.third.norm();
        worst_mean = worst_mean.max(e_mean);
        worst_third = worst_third.max(e_third);
        let _ = writeln!(comparison, "{},{},{}", fmt17(*t), fmt17(e_mean), fmt17(e_third));
    }
    let mut files = vec![
        OutputFile::text("master.csv", master.to_csv()),
        OutputFile::text("wigner.csv", wigner.to_csv()),
        OutputFile::text("comparison.csv", comparison),
        OutputFile::text("controls.csv", design.schedule.to_csv()),
        OutputFile::text("iterations.jsonl", records_to_jsonl(&design.records)),
    ];
    for g in &wigner.snapshots {
        let header = serde_json::to_string(&g.header()).expect("header serializes");
        files.push(OutputFile::text(
            format!("snapshots/wigner_t_{}.csv", g.time()),
            format!("{header}\n{}", g.abs_csv()),
        ));
    }
    let a = s.alpha0;
    files.push(OutputFile::json(
        "summary.json",
        &CrosscheckSummary {
            alpha_inf,
            design_converged: design.converged,
            design_dt: design.dt,
            max_mean_relative_error: worst_mean,
            max_third_relative_error: worst_third,
            wigner_norm_drift: wigner.norm_drift,
            initial_third_master: master.observables[0].third,
            initial_third_wigner: wigner.moments[0].third,
            initial_third_exact: a * (a.norm_sqr() + 1.0),
        },
    ));
    Ok(files)
}
