//! Scenario configuration and the dimer / FMO experiments built on it.
//!
//! Scenarios run in `f64`. Indices in configuration files (sites, excitons,
//! measure targets) are one-based; excitons are ordered by ascending energy.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath::{build_rate_table, RateTable, RateTableOptions, SpectralDensity};
use crate::error::{Error, PositivityViolation, Result};
use crate::model::{build_channels, bundled_fmo7, diagonalize, dimer, fmo7, parse_matrix, SiteHamiltonian};
use crate::model::{JumpChannel, DEFAULT_DEGENERACY_TOL_CM};
use crate::nmqj::{JumpEvent, NmqjConfig, NmqjEngine};
use crate::system::ExcitonSystem;
use crate::tcl::{DensityMatrix, TclPropagator};

/// Most negative eigenvalue of ρ still read as round-off.
pub const POSITIVITY_TOL: f64 = 1e-9;

type C64 = Complex<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum HamiltonianSpec {
    /// Two sites with coupling V₁₂ and site-2 offset ε₂ (cm⁻¹).
    Dimer { coupling: f64, detuning: f64 },
    /// Seven-site FMO complex; `file` overrides the bundled matrix.
    Fmo {
        #[serde(default)]
        file: Option<PathBuf>,
    },
}

impl HamiltonianSpec {
    pub fn build(&self) -> Result<SiteHamiltonian<f64>> {
        match self {
            Self::Dimer { coupling, detuning } => {
                if !coupling.is_finite() || !detuning.is_finite() {
                    return Err(Error::InvalidInput("dimer parameters must be finite".into()));
                }
                Ok(dimer(*coupling, *detuning))
            }
            Self::Fmo { file: None } => Ok(bundled_fmo7()),
            Self::Fmo { file: Some(path) } => {
                let text = std::fs::read_to_string(path)?;
                fmo7(&parse_matrix(&text)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum InitialState {
    /// Localized on a site (one-based).
    Site(usize),
    /// An exciton eigenstate (one-based, ascending energy).
    Exciton(usize),
    /// Site-basis amplitudes as `[re, im]` pairs; normalized on use.
    Vector(Vec<[f64; 2]>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Tcl,
    Nmqj,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Measure {
    /// Exciton whose time-averaged population is reported (one-based).
    pub target: usize,
    /// Averaging window in ps.
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanAxis {
    Lambda,
    Temperature,
    Cutoff,
}

impl ScanAxis {
    /// Default scan range and point count.
    pub fn default_range(self) -> (f64, f64, usize) {
        match self {
            Self::Lambda => (5.0, 150.0, 24),
            Self::Temperature => (50.0, 400.0, 24),
            Self::Cutoff => (10.0, 120.0, 24),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Lambda => "lambda",
            Self::Temperature => "temperature",
            Self::Cutoff => "cutoff",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSpec {
    pub axis: ScanAxis,
    /// Explicit values; when absent, `points` evenly spaced values over
    /// `[from, to]` (axis defaults if unset).
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub from: Option<f64>,
    #[serde(default)]
    pub to: Option<f64>,
    #[serde(default)]
    pub points: Option<usize>,
}

impl ScanSpec {
    pub fn resolved_values(&self) -> Result<Vec<f64>> {
        if let Some(v) = &self.values {
            if v.is_empty() {
                return Err(Error::InvalidInput("scan values are empty".into()));
            }
            return Ok(v.clone());
        }
        let (a0, b0, n0) = self.axis.default_range();
        let (a, b, n) = (self.from.unwrap_or(a0), self.to.unwrap_or(b0), self.points.unwrap_or(n0));
        if n == 0 {
            return Err(Error::InvalidInput("scan needs at least one point".into()));
        }
        if n == 1 {
            return Ok(vec![a]);
        }
        Ok((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect())
    }
}

fn default_dt() -> f64 {
    0.001
}
fn default_trajectories() -> u64 {
    10_000
}
fn default_engine() -> EngineKind {
    EngineKind::Tcl
}
fn default_degeneracy_tol() -> f64 {
    DEFAULT_DEGENERACY_TOL_CM
}

/// One simulation setup, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub hamiltonian: HamiltonianSpec,
    pub bath: SpectralDensity<f64>,
    /// Kelvin.
    pub temperature: f64,
    pub initial_state: InitialState,
    /// ps.
    pub t_final: f64,
    /// ps.
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_engine")]
    pub engine: EngineKind,
    #[serde(default)]
    pub markovian: bool,
    #[serde(default = "default_trajectories")]
    pub trajectories: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub measure: Option<Measure>,
    /// Parameter scan for the `scan` command.
    #[serde(default)]
    pub scan: Option<ScanSpec>,
    /// Temperature list for multi-temperature runs.
    #[serde(default)]
    pub temperatures: Option<Vec<f64>>,
    /// Rate-table columns for the `rates` command (cm⁻¹); defaults to the
    /// channel frequencies.
    #[serde(default)]
    pub frequencies: Option<Vec<f64>>,
    #[serde(default)]
    pub lamb_shift: bool,
    #[serde(default = "default_degeneracy_tol")]
    pub degeneracy_tol: f64,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        // relative Hamiltonian files are resolved against the config file
        if let HamiltonianSpec::Fmo { file: Some(f) } = &mut cfg.hamiltonian {
            if f.is_relative() {
                if let Some(dir) = path.parent() {
                    *f = dir.join(&*f);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        self.bath.validate()?;
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature must be > 0 K, got {}", self.temperature));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.t_final >= self.dt) || !self.t_final.is_finite() {
            return bad(format!("t_final must be at least dt, got {}", self.t_final));
        }
        if self.engine == EngineKind::Nmqj && self.trajectories == 0 {
            return bad("trajectories must be >= 1".into());
        }
        if let Some(m) = &self.measure {
            if m.target == 0 {
                return bad("measure.target is one-based".into());
            }
            if !(m.tau > 0.0) || m.tau > self.t_final * (1.0 + 1e-12) {
                return bad(format!("measure.tau must lie in (0, t_final], got {}", m.tau));
            }
        }
        if let Some(ts) = &self.temperatures {
            if ts.iter().any(|t| !(*t > 0.0)) {
                return bad("temperatures must be > 0 K".into());
            }
        }
        if let Some(s) = &self.scan {
            if s.resolved_values()?.iter().any(|v| !(*v > 0.0) && !(s.axis == ScanAxis::Lambda && *v == 0.0)) {
                return bad("scan values must be positive".into());
            }
        }
        if self.markovian && self.lamb_shift {
            return bad("lamb_shift needs time-dependent rates".into());
        }
        if !(self.degeneracy_tol >= 0.0) {
            return bad("degeneracy_tol must be >= 0".into());
        }
        Ok(())
    }

    pub fn with_axis_value(&self, axis: ScanAxis, value: f64) -> Self {
        let mut c = self.clone();
        match axis {
            ScanAxis::Lambda => c.bath.reorganization = value,
            ScanAxis::Temperature => c.temperature = value,
            ScanAxis::Cutoff => c.bath.cutoff = value,
        }
        c
    }
}

/// A configuration with its Hamiltonian diagonalized, channels enumerated
/// and rates tabulated.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub system: ExcitonSystem<f64>,
    /// Rates on a grid of `dt / 2`, so RK4 substages and ensemble step
    /// midpoints fall on grid points.
    pub table: RateTable<f64>,
}

impl Scenario {
    pub fn new(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hamiltonian.build()?;
        let basis = diagonalize(&h);
        let channels = build_channels(&basis, config.degeneracy_tol);
        let freqs: Vec<f64> = channels.iter().map(|c| c.frequency).collect();
        let opts = RateTableOptions { markovian: config.markovian, lamb_shift: config.lamb_shift };
        let table = build_rate_table(&config.bath, config.temperature, &freqs, config.dt / 2.0, config.t_final, opts)?;
        let system = ExcitonSystem::new(basis, channels, &table)?;
        let scenario = Self { config: config.clone(), system, table };
        scenario.initial_site_state()?;
        let n = scenario.system.dim();
        if let Some(m) = config.measure.filter(|m| m.target == 0 || m.target > n) {
            return Err(Error::InvalidInput(format!("measure.target {} outside 1..={n}", m.target)));
        }
        Ok(scenario)
    }

    pub fn channels(&self) -> &[JumpChannel<f64>] {
        self.system.channels()
    }

    /// Initial pure state in the site basis.
    pub fn initial_site_state(&self) -> Result<DVector<C64>> {
        let n = self.system.dim();
        let basis = self.system.basis();
        let v = match &self.config.initial_state {
            InitialState::Site(s) => {
                if *s == 0 || *s > n {
                    return Err(Error::InvalidInput(format!("initial site {s} outside 1..={n}")));
                }
                let mut v = DVector::zeros(n);
                v[s - 1] = Complex::new(1.0, 0.0);
                v
            }
            InitialState::Exciton(m) => {
                if *m == 0 || *m > n {
                    return Err(Error::InvalidInput(format!("initial exciton {m} outside 1..={n}")));
                }
                let mut e = DVector::zeros(n);
                e[m - 1] = Complex::new(1.0, 0.0);
                basis.state_to_site(&e)
            }
            InitialState::Vector(a) => {
                if a.len() != n {
                    return Err(Error::InvalidInput(format!("initial vector has {} entries, expected {n}", a.len())));
                }
                let v = DVector::from_iterator(n, a.iter().map(|[re, im]| Complex::new(*re, *im)));
                let norm = v.norm();
                if !(norm > 0.0) || !norm.is_finite() {
                    return Err(Error::InvalidInput("initial vector has zero norm".into()));
                }
                v / Complex::new(norm, 0.0)
            }
        };
        Ok(v)
    }

    pub fn initial_density(&self) -> Result<DensityMatrix<f64>> {
        let v = self.initial_site_state()?;
        Ok(DensityMatrix::new(&v * v.adjoint(), 0.0))
    }

    /// Runs the configured engine.
    pub fn run(&self) -> Result<Trajectory> {
        match self.config.engine {
            EngineKind::Tcl => self.run_tcl(),
            EngineKind::Nmqj => self.run_nmqj(),
        }
    }

    pub fn run_tcl(&self) -> Result<Trajectory> {
        let prop = TclPropagator::new(&self.system, &self.table).with_lamb_shift(self.config.lamb_shift);
        let t = prop.evolve(&self.initial_density()?, self.config.t_final, self.config.dt)?;
        Ok(Trajectory { times: t.times, site: t.site, exciton: t.exciton, min_eigs: t.min_eigs, ensemble: None })
    }

    pub fn run_nmqj(&self) -> Result<Trajectory> {
        self.run_nmqj_with(self.config.trajectories, self.config.seed, false)
    }

    pub fn run_nmqj_with(&self, trajectories: u64, seed: u64, record_events: bool) -> Result<Trajectory> {
        let mut cfg = NmqjConfig::new(self.config.dt, seed);
        cfg.lamb_shift = self.config.lamb_shift;
        cfg.record_events = record_events;
        let engine = NmqjEngine::new(&self.system, &self.table, cfg)?;
        let psi = self.system.basis().state_to_exciton(&self.initial_site_state()?);
        let run = engine.run(&psi, trajectories, self.config.t_final)?;
        let min_eigs = run.exciton.iter().map(crate::tcl::min_eigenvalue).collect();
        Ok(Trajectory {
            times: run.times,
            site: run.site,
            exciton: run.exciton,
            min_eigs,
            ensemble: Some(EnsembleStats {
                trajectories,
                n_groups: run.n_groups,
                jumps_pos: run.jumps_pos,
                jumps_neg: run.jumps_neg,
                events: run.events,
                warnings: run.warnings,
            }),
        })
    }
}

/// Ensemble bookkeeping attached to jump-engine trajectories.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub trajectories: u64,
    pub n_groups: Vec<usize>,
    pub jumps_pos: Vec<u64>,
    pub jumps_neg: Vec<u64>,
    pub events: Vec<JumpEvent>,
    pub warnings: u64,
}

/// Density-matrix time series from either engine.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub site: Vec<DMatrix<C64>>,
    pub exciton: Vec<DMatrix<C64>>,
    pub min_eigs: Vec<f64>,
    pub ensemble: Option<EnsembleStats>,
}

impl Trajectory {
    /// ⟨M|ρ|M⟩ over time, `m` zero-based.
    pub fn exciton_population(&self, m: usize) -> Vec<f64> {
        self.exciton.iter().map(|r| r[(m, m)].re).collect()
    }

    /// ρ_mm over time, `m` zero-based.
    pub fn site_population(&self, m: usize) -> Vec<f64> {
        self.site.iter().map(|r| r[(m, m)].re).collect()
    }

    /// Site-basis ρ_mn over time, zero-based.
    pub fn site_element(&self, m: usize, n: usize) -> Vec<C64> {
        self.site.iter().map(|r| r[(m, n)]).collect()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Positivity is broken beyond round-off somewhere on the trajectory.
    pub fn violates_positivity(&self) -> bool {
        self.min_eigenvalue() < -POSITIVITY_TOL
    }
}

/// Trapezoid average (1/τ)∫₀^τ x(t) dt over a sampled series.
pub fn time_average(times: &[f64], values: &[f64], tau: f64) -> Result<f64> {
    if times.len() != values.len() || times.len() < 2 {
        return Err(Error::InvalidInput("time average needs at least two samples".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidInput("tau must be > 0".into()));
    }
    let t_last = *times.last().unwrap();
    if tau > t_last * (1.0 + 1e-9) + 1e-12 || times[0].abs() > 1e-12 {
        return Err(Error::InvalidInput(format!("tau = {tau} ps is not covered by the trajectory (0..{t_last} ps)")));
    }
    let mut acc = 0.0;
    for k in 0..times.len() - 1 {
        let (t0, t1) = (times[k], times[k + 1]);
        if t0 >= tau {
            break;
        }
        let (v0, v1) = (values[k], values[k + 1]);
        if t1 <= tau {
            acc += 0.5 * (t1 - t0) * (v0 + v1);
        } else {
            let vt = v0 + (v1 - v0) * (tau - t0) / (t1 - t0);
            acc += 0.5 * (tau - t0) * (v0 + vt);
        }
    }
    Ok(acc / tau)
}

/// P̄_M = (1/τ)∫₀^τ ⟨M|ρ(t)|M⟩ dt, `target` zero-based.
pub fn transport_measure(trajectory: &Trajectory, target: usize, tau: f64) -> Result<f64> {
    let n = trajectory.exciton.first().map_or(0, |r| r.nrows());
    if target >= n {
        return Err(Error::InvalidInput(format!("target exciton {} outside 1..={n}", target + 1)));
    }
    time_average(&trajectory.times, &trajectory.exciton_population(target), tau)
}

/// The transport dimer: V₁₂ = 50, ε₂ = 100, λ = ω_c = 30 cm⁻¹, 300 K, start
/// in the upper exciton, P̄ of the lower exciton over 1 ps.
pub fn transport_dimer() -> ScenarioConfig {
    ScenarioConfig {
        hamiltonian: HamiltonianSpec::Dimer { coupling: 50.0, detuning: 100.0 },
        bath: SpectralDensity { reorganization: 30.0, cutoff: 30.0 },
        temperature: 300.0,
        initial_state: InitialState::Exciton(2),
        t_final: 1.0,
        dt: 0.001,
        engine: EngineKind::Tcl,
        markovian: false,
        trajectories: default_trajectories(),
        seed: 0,
        measure: Some(Measure { target: 1, tau: 1.0 }),
        scan: None,
        temperatures: None,
        frequencies: None,
        lamb_shift: false,
        degeneracy_tol: DEFAULT_DEGENERACY_TOL_CM,
    }
}

/// The beating dimer: V₁₂ = 87, ε₂ = 120, λ = ω_c = 50 cm⁻¹, start on site 1.
pub fn beating_dimer(temperature: f64) -> ScenarioConfig {
    ScenarioConfig {
        hamiltonian: HamiltonianSpec::Dimer { coupling: 87.0, detuning: 120.0 },
        bath: SpectralDensity { reorganization: 50.0, cutoff: 50.0 },
        temperature,
        initial_state: InitialState::Site(1),
        t_final: 1.0,
        measure: None,
        temperatures: Some(vec![77.0, 150.0, 300.0]),
        ..transport_dimer()
    }
}

/// FMO at λ = 35, ω_c = 150 cm⁻¹.
pub fn fmo_scenario(initial_site: usize, temperature: f64, markovian: bool) -> ScenarioConfig {
    ScenarioConfig {
        hamiltonian: HamiltonianSpec::Fmo { file: None },
        bath: SpectralDensity { reorganization: 35.0, cutoff: 150.0 },
        temperature,
        initial_state: InitialState::Site(initial_site),
        t_final: 1.0,
        markovian,
        measure: None,
        ..transport_dimer()
    }
}

/// Runs `base` at each temperature with the requested rate model.
pub fn run_dimer_beatings(base: &ScenarioConfig, temperatures: &[f64], markovian: bool) -> Result<Vec<(f64, Trajectory)>> {
    temperatures
        .par_iter()
        .map(|&t| {
            let cfg = ScenarioConfig { temperature: t, markovian, ..base.clone() };
            Scenario::new(&cfg)?.run().map(|tr| (t, tr))
        })
        .collect()
}

/// One row of a parameter scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRow {
    pub value: f64,
    pub pbar_markov: Option<f64>,
    /// `None` when the run failed; `Some` even when flagged so the number
    /// can be inspected.
    pub pbar_nm: Option<f64>,
    pub violation: bool,
    /// Diagnostic of the first violation, if any.
    pub diagnostic: Option<String>,
}

fn violation_diag(v: &PositivityViolation) -> String {
    v.to_string()
}

/// Outcome of the non-Markovian run at one scan point.
fn nm_point(cfg: &ScenarioConfig, target: usize, tau: f64) -> (Option<f64>, bool, Option<String>) {
    let run = Scenario::new(cfg).and_then(|s| s.run());
    match run {
        Ok(tr) => {
            let p = transport_measure(&tr, target, tau).ok();
            let violation = tr.violates_positivity();
            let diag = violation.then(|| {
                let (k, v) = tr
                    .min_eigs
                    .iter()
                    .enumerate()
                    .fold((0, f64::INFINITY), |a, (k, v)| if *v < a.1 { (k, *v) } else { a });
                format!("min eigenvalue {v:.3e} at t = {:.4} ps", tr.times[k])
            });
            (p, violation, diag)
        }
        Err(Error::Positivity(v)) => (None, true, Some(violation_diag(&v))),
        Err(e) => (None, false, Some(e.to_string())),
    }
}

/// Scans one bath parameter of `base`, reporting the Markovian and
/// non-Markovian P̄ of `base.measure` for each value. Points are independent;
/// a failing point is recorded and the scan continues.
pub fn scan_parameter(base: &ScenarioConfig, axis: ScanAxis, values: &[f64]) -> Result<Vec<ScanRow>> {
    let m = base.measure.ok_or_else(|| Error::InvalidInput("scan needs a measure".into()))?;
    let target = m.target - 1;
    Ok(values
        .par_iter()
        .map(|&value| {
            let cfg = base.with_axis_value(axis, value);
            let mk = ScenarioConfig { markovian: true, lamb_shift: false, ..cfg.clone() };
            let pbar_markov = Scenario::new(&mk).and_then(|s| s.run()).and_then(|t| transport_measure(&t, target, m.tau)).ok();
            let nm = ScenarioConfig { markovian: false, ..cfg };
            let (pbar_nm, violation, diagnostic) = nm_point(&nm, target, m.tau);
            ScanRow { value, pbar_markov, pbar_nm, violation, diagnostic }
        })
        .collect())
}

/// FMO site populations for a start site (one-based), temperature and rate
/// model, with the remaining settings of `base`.
pub fn run_fmo(base: &ScenarioConfig, initial_site: usize, temperature: f64, markovian: bool) -> Result<Trajectory> {
    let cfg = ScenarioConfig {
        initial_state: InitialState::Site(initial_site),
        temperature,
        markovian,
        lamb_shift: base.lamb_shift && !markovian,
        ..base.clone()
    };
    Scenario::new(&cfg)?.run()
}
