//! Scenario-driven analyses that write CSV artifacts and a manifest.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cfreq::{cf_csv, cf_from_trajectory, decompose_converter_cf, pll_internal_frequency, CfError, CfSeries};
use crate::contin::{
    bifurcations_csv, boundary_csv, continue_branch, detect_bifurcations, trace_boundary_2d, ContinError, ContinuationSettings,
    Termination,
};
use crate::engine::{eigenvalues, reduced_state_matrix, DaeSystem, EngineError, Trajectory};
use crate::netmodel::ModelError;
use crate::report::{fmt_f64, Csv};
use crate::scenario::{Scenario, ScenarioError};
use crate::secondary::{run_recursive, SecondaryController, SecondaryError};
use crate::system::GridSystem;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Contin(#[from] ContinError),
    #[error(transparent)]
    Secondary(#[from] SecondaryError),
    #[error(transparent)]
    Cf(#[from] CfError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Config(String),
}

impl From<ModelError> for RunError {
    fn from(e: ModelError) -> Self {
        RunError::Engine(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Equilibrium,
    Continue,
    Boundary2d,
    Simulate,
    Secondary,
    Cf,
}

impl Command {
    pub const ALL: [Command; 6] =
        [Command::Equilibrium, Command::Continue, Command::Boundary2d, Command::Simulate, Command::Secondary, Command::Cf];

    pub fn name(self) -> &'static str {
        match self {
            Command::Equilibrium => "equilibrium",
            Command::Continue => "continue",
            Command::Boundary2d => "boundary2d",
            Command::Simulate => "simulate",
            Command::Secondary => "secondary",
            Command::Cf => "cf",
        }
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Command::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| format!("unknown command '{s}'"))
    }
}

/// Command-line overrides of the scenario's analysis settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    /// Continuation parameter.
    pub param: Option<String>,
    /// Grid of the second boundary parameter.
    pub grid: Option<Vec<f64>>,
    /// Step budget for `continue`/`boundary2d`, number of time steps for
    /// `simulate`/`cf`.
    pub steps: Option<usize>,
    pub quiet: bool,
}

/// Parses `a:b:n` into `n` evenly spaced values from `a` to `b`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, n] = parts.as_slice() else {
        return Err(format!("grid '{s}' must look like a:b:n"));
    };
    let a: f64 = a.parse().map_err(|_| format!("bad grid start '{a}'"))?;
    let b: f64 = b.parse().map_err(|_| format!("bad grid end '{b}'"))?;
    let n: usize = n.parse().map_err(|_| format!("bad grid count '{n}'"))?;
    match n {
        0 => Ok(Vec::new()),
        1 => Ok(vec![a]),
        _ => Ok((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: String,
    /// SHA-256 of the scenario's canonical form.
    pub scenario_sha256: String,
    pub tool_version: String,
    pub command: String,
    pub outputs: Vec<OutputEntry>,
    pub wall_time_s: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Writer {
    dir: PathBuf,
    outputs: Vec<OutputEntry>,
}

impl Writer {
    fn write(&mut self, name: &str, csv: Csv) -> Result<(), RunError> {
        let text = csv.into_string();
        let path = self.dir.join(name);
        std::fs::write(&path, &text).map_err(|source| RunError::Io { path: path.display().to_string(), source })?;
        self.outputs.push(OutputEntry { file: name.to_string(), sha256: sha256_hex(text.as_bytes()), bytes: text.len() });
        Ok(())
    }
}

fn note(opts: &RunOptions, msg: impl FnOnce() -> String) {
    if !opts.quiet {
        eprintln!("{}", msg());
    }
}

/// Runs `command` on `scenario`, writing its CSV files and `manifest.json`
/// into `out_dir`.
pub fn run(command: Command, scenario: &Scenario, out_dir: &Path, opts: &RunOptions) -> Result<RunManifest, RunError> {
    let started = Instant::now();
    std::fs::create_dir_all(out_dir).map_err(|source| RunError::Io { path: out_dir.display().to_string(), source })?;
    let mut w = Writer { dir: out_dir.to_path_buf(), outputs: Vec::new() };
    match command {
        Command::Equilibrium => equilibrium(scenario, &mut w, opts)?,
        Command::Continue => continuation(scenario, &mut w, opts)?,
        Command::Boundary2d => boundary(scenario, &mut w, opts)?,
        Command::Simulate => simulate(scenario, &mut w, opts)?,
        Command::Secondary => secondary(scenario, &mut w, opts)?,
        Command::Cf => complex_frequency(scenario, &mut w, opts)?,
    }
    let manifest = RunManifest {
        scenario: scenario.name.clone(),
        scenario_sha256: sha256_hex(scenario.canonical_json().as_bytes()),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.name().to_string(),
        outputs: w.outputs,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let path = out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|source| RunError::Io { path: path.display().to_string(), source })?;
    Ok(manifest)
}

fn equilibrium(sc: &Scenario, w: &mut Writer, opts: &RunOptions) -> Result<(), RunError> {
    let sys = GridSystem::new(sc.to_model()?, &[])?;
    let sol = sys.solve_equilibrium(None, &[])?;
    note(opts, || format!("equilibrium: {} Newton iterations, |F|inf = {:.2e}", sol.iterations, sol.residual));
    let mut states = Csv::new(&["state", "value"]);
    for (name, v) in sys.state_names().iter().zip(&sol.x) {
        states.row(&[name.clone(), fmt_f64(*v)]);
    }
    w.write("equilibrium.csv", states)?;
    let mut buses = Csv::new(&["bus", "v", "angle"]);
    for (name, v) in sys.model().names.buses.iter().zip(sys.bus_voltages(&sol.x)) {
        buses.row(&[name.clone(), fmt_f64(v.norm()), fmt_f64(v.arg())]);
    }
    w.write("buses.csv", buses)?;
    let spectrum = eigenvalues(&reduced_state_matrix(&sys, &sol.x, &[])?.a)?;
    let mut eig = Csv::new(&["re", "im"]);
    for z in &spectrum.eigenvalues {
        eig.numbers(&[z.re, z.im]);
    }
    w.write("spectrum.csv", eig)?;
    Ok(())
}

fn settings(sc: &Scenario, opts: &RunOptions) -> ContinuationSettings {
    let mut s = ContinuationSettings::from(&sc.analysis.continuation);
    if let Some(n) = opts.steps {
        s.max_steps = n;
    }
    s
}

fn continuation_param(sc: &Scenario, opts: &RunOptions) -> String {
    opts.param.clone().unwrap_or_else(|| sc.analysis.continuation.param.clone())
}

fn continuation(sc: &Scenario, w: &mut Writer, opts: &RunOptions) -> Result<(), RunError> {
    let param = continuation_param(sc, opts);
    let sys = GridSystem::new(sc.to_model()?, &[param.as_str()])?;
    let p = sys.base_params().to_vec();
    let start = sys.solve_equilibrium(None, &p)?;
    let branch = continue_branch(&sys, &start, &param, &settings(sc, opts))?;
    if let Termination::StepFailure(msg) = &branch.termination {
        note(opts, || format!("branch truncated: {msg}"));
    }
    let records = detect_bifurcations(&sys, &branch);
    note(opts, || {
        let found: Vec<String> = records.iter().map(|r| format!("{} at {:.6}", r.kind, r.lambda)).collect();
        format!("continue: {} points, bifurcations: [{}]", branch.points.len(), found.join(", "))
    });
    w.write("branch.csv", branch.to_csv(&sys.state_names()))?;
    w.write("bifurcations.csv", bifurcations_csv(&records))?;
    Ok(())
}

fn boundary(sc: &Scenario, w: &mut Writer, opts: &RunOptions) -> Result<(), RunError> {
    let spec = sc.analysis.boundary.as_ref();
    let param2 = spec.map(|b| b.param2.clone()).ok_or_else(|| RunError::Config("scenario has no boundary block".into()))?;
    let grid = opts.grid.clone().or_else(|| spec.map(|b| b.grid.clone())).unwrap_or_default();
    let param = continuation_param(sc, opts);
    let sys = GridSystem::new(sc.to_model()?, &[param.as_str(), param2.as_str()])?;
    let b = trace_boundary_2d(&sys, sys.base_params(), &param, &param2, &grid, &settings(sc, opts))?;
    for r in &b.rows {
        if let Some(e) = &r.error {
            note(opts, || format!("row {param2} = {}: {e}", r.value));
        }
    }
    w.write("boundary.csv", boundary_csv(&b))?;
    Ok(())
}

/// Equilibrium at the scenario values, then the configured step and
/// perturbation, then integration. Returns the system, the post-step
/// parameters and the trajectory.
fn run_simulation(sc: &Scenario, opts: &RunOptions) -> Result<(GridSystem, Vec<f64>, Trajectory), RunError> {
    let spec = &sc.analysis.simulation;
    let params: Vec<&str> = spec.step.iter().map(|s| s.param.as_str()).collect();
    let sys = GridSystem::new(sc.to_model()?, &params)?;
    let p0 = sys.base_params().to_vec();
    let sol = sys.solve_equilibrium(None, &p0)?;
    let p1: Vec<f64> = spec.step.iter().map(|s| s.value).collect();
    let mut x0 = sol.x;
    if let Some(pert) = &spec.perturb {
        let k = sys.state_index(&pert.param).ok_or_else(|| RunError::Config(format!("unknown state '{}'", pert.param)))?;
        x0[k] += pert.value;
    }
    if !(spec.h > 0.0) || spec.decimate == 0 {
        return Err(RunError::Config("simulation needs h > 0 and decimate >= 1".into()));
    }
    let t_end = opts.steps.map_or(spec.t_end, |n| n as f64 * spec.h);
    let traj = sys.simulate(&x0, &p1, t_end, spec.h)?;
    note(opts, || format!("simulate: {} steps of {} s", traj.len() - 1, spec.h));
    Ok((sys, p1, traj))
}

fn decimated(traj: &Trajectory, every: usize) -> impl Iterator<Item = usize> + '_ {
    (0..traj.len()).filter(move |i| i % every == 0 || *i == traj.len() - 1)
}

fn simulate(sc: &Scenario, w: &mut Writer, opts: &RunOptions) -> Result<(), RunError> {
    let (sys, _, traj) = run_simulation(sc, opts)?;
    let mut header = vec!["t".to_string()];
    header.extend(sys.state_names());
    let mut csv = Csv::new(&header);
    for i in decimated(&traj, sc.analysis.simulation.decimate) {
        let mut row = vec![traj.t[i]];
        row.extend_from_slice(&traj.x[i]);
        csv.numbers(&row);
    }
    w.write("trajectory.csv", csv)?;
    Ok(())
}

fn secondary(sc: &Scenario, w: &mut Writer, opts: &RunOptions) -> Result<(), RunError> {
    let ctrl = SecondaryController::from_scenario(sc)?;
    let h = run_recursive(&ctrl, &ctrl.initial_gains())?;
    note(opts, || {
        let first = &h.records[0];
        format!(
            "secondary: {} iterations, max deviation {:.4} -> {:.4} ({:?})",
            h.records.len(),
            first.max_deviation,
            h.last().max_deviation,
            h.stop
        )
    });
    let model = ctrl.system().model();
    let conv: Vec<String> = ctrl.converters.iter().map(|&k| model.names.gfl[k].clone()).collect();
    w.write("secondary_voltages.csv", h.voltages_csv(&model.names.buses))?;
    w.write("secondary_gains.csv", h.gains_csv(&conv))?;
    Ok(())
}

fn thin(s: CfSeries, every: usize) -> CfSeries {
    let keep: Vec<usize> = (0..s.t.len()).filter(|i| i % every == 0 || *i == s.t.len() - 1).collect();
    CfSeries {
        t: keep.iter().map(|&i| s.t[i]).collect(),
        rho: keep.iter().map(|&i| s.rho[i]).collect(),
        omega: keep.iter().map(|&i| s.omega[i]).collect(),
        source: s.source,
    }
}

fn complex_frequency(sc: &Scenario, w: &mut Writer, opts: &RunOptions) -> Result<(), RunError> {
    let spec = sc.analysis.cf.as_ref().ok_or_else(|| RunError::Config("scenario has no cf block".into()))?;
    let (sys, p, traj) = run_simulation(sc, opts)?;
    let m = sys.model_at(&p)?;
    let b = m.names.bus(&spec.bus)?;
    let v: Vec<_> = traj.x.iter().map(|x| sys.bus_voltage(x, b)).collect();
    let mut series = vec![cf_from_trajectory(&traj.t, &v, m.omega_frame(), spec.smoothing, &format!("bus.{}", spec.bus))?];
    for (k, id) in m.names.gfl.iter().enumerate() {
        let omega = pll_internal_frequency(&sys, &traj, &p, k)?;
        series.push(CfSeries { t: traj.t.clone(), rho: vec![0.0; omega.len()], omega, source: format!("{id}.pll") });
    }
    for c in &spec.converters {
        let d = decompose_converter_cf(&sys, &traj, &p, c, spec.smoothing)?;
        note(opts, || format!("cf: {c} additivity residual {:.2e}", d.additivity_residual()));
        series.push(d.total);
        series.extend(d.blocks);
    }
    let every = sc.analysis.simulation.decimate;
    let thinned: Vec<CfSeries> = series.into_iter().map(|s| thin(s, every)).collect();
    let refs: Vec<&CfSeries> = thinned.iter().collect();
    w.write("cf.csv", cf_csv(&refs))?;
    Ok(())
}
