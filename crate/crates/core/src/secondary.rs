//! Recursive secondary voltage control through the virtual-admittance gains
//! of grid-following converters.
//!
//! Every round solves the equilibrium for the current gains, measures bus
//! voltages, estimates `∂|v|/∂(g_v, b_v)` by re-solving perturbed equilibria,
//! and takes a damped step toward the minimiser of a weighted quadratic
//! voltage-deviation model under gain boxes and linearised current limits.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::engine::EngineError;
use crate::netmodel::{ModelError, NetworkModel};
use crate::report::{fmt_f64, Csv};
use crate::scenario::{Scenario, ScenarioError};
use crate::system::GridSystem;
use crate::val::ValMode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SecondaryError {
    #[error("secondary control configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl From<ModelError> for SecondaryError {
    fn from(e: ModelError) -> Self {
        SecondaryError::Engine(e.into())
    }
}

impl From<ScenarioError> for SecondaryError {
    fn from(e: ScenarioError) -> Self {
        SecondaryError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSnapshot {
    pub iteration: usize,
    /// `|v|` per bus.
    pub voltages: Vec<f64>,
    /// `|i|` per load.
    pub load_currents: Vec<f64>,
    /// `(p_ref, q_ref)` per grid-following converter.
    pub setpoints: Vec<(f64, f64)>,
    /// Magnitude of the requested (pre-limiter) current per converter.
    pub references: Vec<f64>,
}

/// Reads the measured quantities from an equilibrium.
pub fn collect_measurements(
    sys: &GridSystem,
    x: &[f64],
    p: &[f64],
    iteration: usize,
) -> Result<MeasurementSnapshot, EngineError> {
    let m = sys.model_at(p)?;
    let mut setpoints = Vec::with_capacity(m.gfl.len());
    let mut references = Vec::with_capacity(m.gfl.len());
    for (k, c) in m.gfl.iter().enumerate() {
        let r = sys.gfl_outputs(x, p, k)?;
        setpoints.push((c.p_ref, r.reference.q_ref));
        references.push(r.reference.raw.norm());
    }
    Ok(MeasurementSnapshot {
        iteration,
        voltages: sys.bus_voltages(x).iter().map(|v| v.norm()).collect(),
        load_currents: sys.load_currents(x).iter().map(|i| i.norm()).collect(),
        setpoints,
        references,
    })
}

/// Forward-difference sensitivities of bus voltages and converter current
/// requests to every gain.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensitivity {
    /// Buses × gains.
    pub voltage: DMatrix<f64>,
    /// Converters × gains.
    pub current: DMatrix<f64>,
    /// Columns whose perturbed equilibrium could not be solved are unusable
    /// and zero.
    pub usable: Vec<bool>,
}

pub const FD_STEP: f64 = 1e-4;

/// Perturbs each gain by `step` in turn and re-solves the equilibrium from
/// `x`. Columns are independent and computed in parallel.
pub fn gain_sensitivity(sys: &GridSystem, x: &[f64], gains: &[f64], step: f64) -> Result<Sensitivity, EngineError> {
    let base = collect_measurements(sys, x, gains, 0)?;
    let nb = base.voltages.len();
    let nc = base.references.len();
    let cols: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..gains.len())
        .into_par_iter()
        .map(|j| {
            let mut p = gains.to_vec();
            p[j] += step;
            let sol = sys.solve_equilibrium(Some(x), &p).ok()?;
            let snap = collect_measurements(sys, &sol.x, &p, 0).ok()?;
            let dv = snap.voltages.iter().zip(&base.voltages).map(|(a, b)| (a - b) / step).collect();
            let di = snap.references.iter().zip(&base.references).map(|(a, b)| (a - b) / step).collect();
            Some((dv, di))
        })
        .collect();
    let mut voltage = DMatrix::zeros(nb, gains.len());
    let mut current = DMatrix::zeros(nc, gains.len());
    let mut usable = vec![false; gains.len()];
    for (j, c) in cols.into_iter().enumerate() {
        if let Some((dv, di)) = c {
            usable[j] = true;
            voltage.column_mut(j).copy_from_slice(&dv);
            current.column_mut(j).copy_from_slice(&di);
        }
    }
    Ok(Sensitivity { voltage, current, usable })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// Per bus, non-negative.
    pub w: Vec<f64>,
    /// Step regularisation `ρ·‖Δg‖²`.
    pub rho: f64,
}

impl Weights {
    fn validate(&self, buses: usize) -> Result<(), SecondaryError> {
        if self.w.len() != buses {
            return Err(SecondaryError::Config(format!("{} weights for {buses} buses", self.w.len())));
        }
        if self.w.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || !(self.w.iter().sum::<f64>() > 0.0) || !(self.rho >= 0.0) {
            return Err(SecondaryError::Config("weights must be non-negative with a positive sum, and rho >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainUpdate {
    pub old: Vec<f64>,
    pub new: Vec<f64>,
    /// Full (undamped) step of the quadratic model.
    pub delta: Vec<f64>,
    pub alpha: f64,
    pub objective_before: f64,
    /// Model objective at the full step.
    pub objective_model: f64,
    /// Model gradient at the full step.
    pub gradient: Vec<f64>,
    /// `-1` on the lower bound, `1` on the upper bound, `0` inside.
    pub box_active: Vec<i8>,
    pub current_active: Vec<bool>,
    /// Length of the last projected-gradient step.
    pub kkt: f64,
    /// True when no usable column remained and nothing moved.
    pub no_op: bool,
}

pub const KKT_TOL: f64 = 1e-8;

/// Halfspaces `aᵀΔ <= b` plus a box, projected onto with Dykstra's method.
struct Feasible {
    lo: Vec<f64>,
    hi: Vec<f64>,
    rows: Vec<(DVector<f64>, f64)>,
}

impl Feasible {
    fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        let clip = |v: &DVector<f64>| {
            DVector::from_iterator(v.len(), v.iter().enumerate().map(|(i, x)| x.clamp(self.lo[i], self.hi[i])))
        };
        if self.rows.is_empty() {
            return clip(z);
        }
        let sets = self.rows.len() + 1;
        let mut incr = vec![DVector::zeros(z.len()); sets];
        let mut x = z.clone();
        for _ in 0..10_000 {
            let prev = x.clone();
            for (s, inc) in incr.iter_mut().enumerate() {
                let y = &x + &*inc;
                let px = if s == 0 {
                    clip(&y)
                } else {
                    let (a, b) = &self.rows[s - 1];
                    let viol = a.dot(&y) - b;
                    let aa = a.norm_squared();
                    if viol > 0.0 && aa > 0.0 {
                        &y - a * (viol / aa)
                    } else {
                        y.clone()
                    }
                };
                *inc = &y - &px;
                x = px;
            }
            if (&x - &prev).amax() <= 1e-15 {
                break;
            }
        }
        clip(&x)
    }
}

/// Minimises `Σ w_i (|v_i| + (SΔ)_i - v_nom)² + ρ‖Δ‖²` over gain steps that
/// keep every gain in its box and every linearised current request within
/// its margin, by accelerated projected gradient until the projected
/// gradient step is below 1e-8. The returned gains are `old + α·Δ`.
#[allow(clippy::too_many_arguments)]
pub fn solve_update(
    snapshot: &MeasurementSnapshot,
    sens: &Sensitivity,
    gains: &[f64],
    weights: &Weights,
    v_nom: f64,
    boxes: &[(f64, f64)],
    margins: &[f64],
    alpha: f64,
) -> Result<GainUpdate, SecondaryError> {
    let m = gains.len();
    let nb = snapshot.voltages.len();
    weights.validate(nb)?;
    if boxes.len() != m || sens.voltage.ncols() != m || sens.voltage.nrows() != nb {
        return Err(SecondaryError::Config("sensitivity, gains and boxes disagree in size".into()));
    }
    if let Some(j) = (0..m).find(|&j| !(boxes[j].0 <= boxes[j].1) || gains[j] < boxes[j].0 || gains[j] > boxes[j].1) {
        return Err(SecondaryError::Config(format!("gain {j} has an empty box or lies outside it")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(SecondaryError::Config("trust step must lie in (0, 1]".into()));
    }
    let e = DVector::from_iterator(nb, snapshot.voltages.iter().map(|v| v - v_nom));
    let objective_before: f64 = (0..nb).map(|i| weights.w[i] * e[i] * e[i]).sum();
    let s = &sens.voltage;
    let wm = DMatrix::from_diagonal(&DVector::from_column_slice(&weights.w));
    let hess = (s.transpose() * &wm * s + DMatrix::identity(m, m) * weights.rho) * 2.0;
    let lin = s.transpose() * &wm * &e * 2.0;
    let mut lo = vec![0.0; m];
    let mut hi = vec![0.0; m];
    for j in 0..m {
        if sens.usable[j] {
            lo[j] = boxes[j].0 - gains[j];
            hi[j] = boxes[j].1 - gains[j];
        }
    }
    let rows = (0..sens.current.nrows())
        .map(|k| {
            let a = DVector::from_iterator(m, (0..m).map(|j| if sens.usable[j] { sens.current[(k, j)] } else { 0.0 }));
            (a, margins.get(k).copied().unwrap_or(f64::INFINITY).max(0.0))
        })
        .filter(|(a, b)| a.amax() > 0.0 && b.is_finite())
        .collect();
    let feas = Feasible { lo, hi, rows };
    let grad = |d: &DVector<f64>| &hess * d + &lin;
    let model = |d: &DVector<f64>| objective_before + lin.dot(d) + 0.5 * d.dot(&(&hess * d));
    let no_op = !sens.usable.iter().any(|u| *u);
    let lips = SymmetricEigen::new(hess.clone()).eigenvalues.iter().fold(0.0f64, |a, v| a.max(*v));
    let mut d = DVector::zeros(m);
    let mut kkt = 0.0;
    if !no_op && lips > 0.0 {
        // projected-gradient step length, in gain units
        let residual = |d: &DVector<f64>| {
            let step = feas.project(&(d - grad(d) / lips));
            (d - step).amax()
        };
        let mut y = d.clone();
        let mut t = 1.0f64;
        kkt = residual(&d);
        for _ in 0..200_000 {
            if kkt <= KKT_TOL {
                break;
            }
            let dn = feas.project(&(&y - grad(&y) / lips));
            if (&y - &dn).dot(&(&dn - &d)) > 0.0 {
                t = 1.0;
            }
            let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &dn + (&dn - &d) * ((t - 1.0) / tn);
            t = tn;
            d = dn;
            kkt = residual(&d);
        }
    }
    let gradient = grad(&d);
    let box_active = (0..m)
        .map(|j| {
            if !sens.usable[j] {
                0
            } else if d[j] <= feas.lo[j] + 1e-12 && feas.lo[j] < feas.hi[j] {
                -1
            } else if d[j] >= feas.hi[j] - 1e-12 && feas.lo[j] < feas.hi[j] {
                1
            } else {
                0
            }
        })
        .collect();
    let current_active = feas.rows.iter().map(|(a, b)| a.dot(&d) >= b - 1e-10).collect();
    let new = (0..m).map(|j| (gains[j] + alpha * d[j]).clamp(boxes[j].0, boxes[j].1)).collect();
    Ok(GainUpdate {
        old: gains.to_vec(),
        new,
        delta: d.iter().copied().collect(),
        alpha,
        objective_before,
        objective_model: model(&d),
        gradient: gradient.iter().copied().collect(),
        box_active,
        current_active,
        kkt,
        no_op,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondarySettings {
    pub weights: Weights,
    pub v_nom: f64,
    pub alpha: f64,
    pub max_iter: usize,
    pub tol_v: f64,
    pub max_halvings: usize,
}

impl SecondarySettings {
    pub fn new(weights: Vec<f64>) -> Self {
        Self { weights: Weights { w: weights, rho: 0.0 }, v_nom: 1.0, alpha: 0.7, max_iter: 30, tol_v: 0.01, max_halvings: 5 }
    }
}

/// The network with every VAL-equipped converter's gains exposed as
/// parameters `(g_v, b_v)` in converter order.
#[derive(Debug, Clone)]
pub struct SecondaryController {
    sys: GridSystem,
    pub converters: Vec<usize>,
    pub boxes: Vec<(f64, f64)>,
    pub settings: SecondarySettings,
}

impl SecondaryController {
    pub fn new(model: NetworkModel, settings: SecondarySettings) -> Result<Self, SecondaryError> {
        let mut paths = Vec::new();
        let mut converters = Vec::new();
        let mut boxes = Vec::new();
        for (k, c) in model.gfl.iter().enumerate() {
            if let ValMode::Quasi(g) | ValMode::Dynamic(g) = &c.val {
                let id = &model.names.gfl[k];
                paths.push(format!("gfl.{id}.g_v"));
                paths.push(format!("gfl.{id}.b_v"));
                boxes.push((g.g_min, g.g_max));
                boxes.push((g.b_min, g.b_max));
                converters.push(k);
            }
        }
        if converters.is_empty() {
            return Err(SecondaryError::Config("no converter has a virtual admittance loop".into()));
        }
        settings.weights.validate(model.bus_count())?;
        let refs: Vec<&str> = paths.iter().map(String::as_str).collect();
        let sys = GridSystem::new(model, &refs)?;
        Ok(Self { sys, converters, boxes, settings })
    }

    /// Builds the controller from a scenario's `secondary` block.
    pub fn from_scenario(sc: &Scenario) -> Result<Self, SecondaryError> {
        let spec =
            sc.analysis.secondary.as_ref().ok_or_else(|| SecondaryError::Config("scenario has no secondary block".into()))?;
        let model = sc.to_model()?;
        let mut w = vec![0.0; model.bus_count()];
        for (id, v) in &spec.weights {
            w[model.names.bus(id)?] = *v;
        }
        let settings = SecondarySettings {
            weights: Weights { w, rho: spec.rho },
            v_nom: spec.v_nom,
            alpha: spec.alpha,
            max_iter: spec.max_iter,
            tol_v: spec.tol_v,
            max_halvings: 5,
        };
        Self::new(model, settings)
    }

    pub fn system(&self) -> &GridSystem {
        &self.sys
    }

    pub fn initial_gains(&self) -> Vec<f64> {
        self.sys.base_params().to_vec()
    }

    pub fn param_names(&self) -> Vec<String> {
        crate::engine::DaeSystem::param_names(&self.sys).to_vec()
    }

    fn objective(&self, v: &[f64]) -> f64 {
        let w = &self.settings.weights.w;
        v.iter().zip(w).map(|(v, w)| w * (v - self.settings.v_nom).powi(2)).sum()
    }

    /// `max_i w_i·|v_i - v_nom|`.
    pub fn max_deviation(&self, v: &[f64]) -> f64 {
        let w = &self.settings.weights.w;
        v.iter().zip(w).map(|(v, w)| w * (v - self.settings.v_nom).abs()).fold(0.0, f64::max)
    }

    fn margins(&self, gains: &[f64], snap: &MeasurementSnapshot) -> Result<Vec<f64>, SecondaryError> {
        let m = self.sys.model_at(gains)?;
        Ok(m.gfl.iter().zip(&snap.references).map(|(c, r)| c.i_max() - r).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub gains: Vec<f64>,
    pub snapshot: MeasurementSnapshot,
    pub objective: f64,
    pub max_deviation: f64,
    /// The update that produced these gains.
    pub update: Option<GainUpdate>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SecondaryStop {
    Converged,
    SmallStep,
    MaxIter,
    /// No damped step lowered the objective or kept an equilibrium.
    Stalled(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondaryHistory {
    pub records: Vec<IterationRecord>,
    pub stop: SecondaryStop,
}

impl SecondaryHistory {
    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("history holds the initial state")
    }

    /// `(iter, bus, v)` table.
    pub fn voltages_csv(&self, bus_names: &[String]) -> Csv {
        let mut csv = Csv::new(&["iter", "bus", "v"]);
        for r in &self.records {
            for (b, v) in r.snapshot.voltages.iter().enumerate() {
                csv.row(&[r.iteration.to_string(), bus_names[b].clone(), fmt_f64(*v)]);
            }
        }
        csv
    }

    /// `(iter, converter, g_v, b_v, objective)` table.
    pub fn gains_csv(&self, converter_names: &[String]) -> Csv {
        let mut csv = Csv::new(&["iter", "converter", "g_v", "b_v", "objective"]);
        for r in &self.records {
            for (k, name) in converter_names.iter().enumerate() {
                csv.row(&[
                    r.iteration.to_string(),
                    name.clone(),
                    fmt_f64(r.gains[2 * k]),
                    fmt_f64(r.gains[2 * k + 1]),
                    fmt_f64(r.objective),
                ]);
            }
        }
        csv
    }
}

/// Runs the measure, linearise, update loop until the weighted deviation is
/// within `tol_v`, the step becomes negligible, or the iteration budget is
/// spent. A step that raises the objective or loses the equilibrium is
/// retried with half the trust step, up to `max_halvings` times.
pub fn run_recursive(ctrl: &SecondaryController, initial: &[f64]) -> Result<SecondaryHistory, SecondaryError> {
    let sys = &ctrl.sys;
    let st = &ctrl.settings;
    let mut gains = initial.to_vec();
    let mut eq = sys.solve_equilibrium(None, &gains)?;
    let snap = collect_measurements(sys, &eq.x, &gains, 1)?;
    let mut objective = ctrl.objective(&snap.voltages);
    let mut records = vec![IterationRecord {
        iteration: 1,
        gains: gains.clone(),
        max_deviation: ctrl.max_deviation(&snap.voltages),
        snapshot: snap,
        objective,
        update: None,
    }];
    let stop = loop {
        let cur = records.last().expect("non-empty");
        if cur.max_deviation <= st.tol_v {
            break SecondaryStop::Converged;
        }
        if cur.iteration >= st.max_iter {
            break SecondaryStop::MaxIter;
        }
        let sens = gain_sensitivity(sys, &eq.x, &gains, FD_STEP)?;
        let margins = ctrl.margins(&gains, &cur.snapshot)?;
        let base = solve_update(&cur.snapshot, &sens, &gains, &st.weights, st.v_nom, &ctrl.boxes, &margins, 1.0)?;
        if base.no_op || base.delta.iter().fold(0.0f64, |a, d| a.max(d.abs())) <= 1e-6 {
            break SecondaryStop::SmallStep;
        }
        let mut alpha = st.alpha;
        let mut accepted = None;
        for _ in 0..=st.max_halvings {
            let trial: Vec<f64> =
                (0..gains.len()).map(|j| (gains[j] + alpha * base.delta[j]).clamp(ctrl.boxes[j].0, ctrl.boxes[j].1)).collect();
            if let Ok(sol) = sys.solve_equilibrium(Some(&eq.x), &trial) {
                let snap = collect_measurements(sys, &sol.x, &trial, cur.iteration + 1)?;
                let obj = ctrl.objective(&snap.voltages);
                if obj <= objective {
                    accepted = Some((trial, sol, snap, obj, alpha));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((trial, sol, snap, obj, alpha)) = accepted else {
            break SecondaryStop::Stalled(format!("no damped step improved the objective at iteration {}", cur.iteration));
        };
        let update = GainUpdate { new: trial.clone(), alpha, ..base };
        let iteration = cur.iteration + 1;
        gains = trial;
        eq = sol;
        objective = obj;
        records.push(IterationRecord {
            iteration,
            gains: gains.clone(),
            max_deviation: ctrl.max_deviation(&snap.voltages),
            snapshot: snap,
            objective,
            update: Some(update),
        });
    };
    Ok(SecondaryHistory { records, stop })
}
