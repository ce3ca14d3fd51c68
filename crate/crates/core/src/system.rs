//! Assembly of every device into one `M·ẋ = F(x, p)` system with named
//! parameters.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::converter::{gfl_residual, gfm_droop_residual, GflResidual, GflState, GfmResidual, GfmState};
use crate::engine::{
    integrate, newton_equilibrium, pseudo_transient, DaeSystem, EngineError, EquilibriumSolution, IntegrateOptions,
    NewtonOptions, Trajectory,
};
use crate::netmodel::{
    im_residual, invalid, ltc_residual, network_residual, rot_j, zip_admittance_target, ImState, ModelError, NetworkModel,
    NetworkView, SourceKind,
};
use crate::smoothlim::SmoothLimiter;
use crate::val::{dval_realization, qval_reference, val_deviation, ValMode};

/// A model quantity addressable as a continuation or tuning parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamTarget {
    Lambda,
    GridDw,
    GridE,
    GridR,
    GridX,
    BranchR(usize),
    BranchX(usize),
    BusB(usize),
    LoadP0(usize),
    LoadQ0(usize),
    MachineTorque(usize),
    LtcVref(usize),
    GflPref(usize),
    GflQ0(usize),
    GflKq(usize),
    GflVref(usize),
    GflKpPll(usize),
    GflKiPll(usize),
    GflImax(usize),
    GflGv(usize),
    GflBv(usize),
    GfmPset(usize),
    GfmQset(usize),
    GfmMp(usize),
    GfmNq(usize),
}

impl ParamTarget {
    /// Resolves a dotted path such as `lambda`, `grid.x_g`, `branch.L12.x` or
    /// `gfl.C1.g_v`.
    pub fn parse(model: &NetworkModel, path: &str) -> Result<Self, ModelError> {
        let n = &model.names;
        let parts: Vec<&str> = path.split('.').collect();
        let bad = || invalid(format!("parameter '{path}'"), "unknown parameter path");
        let t = match parts.as_slice() {
            ["lambda"] => ParamTarget::Lambda,
            ["grid", f] => match *f {
                "dw" => ParamTarget::GridDw,
                "e_mag" => ParamTarget::GridE,
                "r_g" => ParamTarget::GridR,
                "x_g" => ParamTarget::GridX,
                _ => return Err(bad()),
            },
            ["branch", id, f] => {
                let k = n.branch(id)?;
                match *f {
                    "r" => ParamTarget::BranchR(k),
                    "x" => ParamTarget::BranchX(k),
                    _ => return Err(bad()),
                }
            }
            ["bus", id, "b_sh"] => ParamTarget::BusB(n.bus(id)?),
            ["load", id, f] => {
                let k = n.load(id)?;
                match *f {
                    "p0" => ParamTarget::LoadP0(k),
                    "q0" => ParamTarget::LoadQ0(k),
                    _ => return Err(bad()),
                }
            }
            ["machine", id, "t_mech"] => ParamTarget::MachineTorque(n.machine(id)?),
            ["ltc", id, "v_ref"] => ParamTarget::LtcVref(n.ltc(id)?),
            ["gfl", id, f] => {
                let k = n.gfl(id)?;
                match *f {
                    "p_ref" => ParamTarget::GflPref(k),
                    "q0" => ParamTarget::GflQ0(k),
                    "kq" => ParamTarget::GflKq(k),
                    "v_ref" => ParamTarget::GflVref(k),
                    "kp_pll" => ParamTarget::GflKpPll(k),
                    "ki_pll" => ParamTarget::GflKiPll(k),
                    "i_max" => ParamTarget::GflImax(k),
                    "g_v" => ParamTarget::GflGv(k),
                    "b_v" => ParamTarget::GflBv(k),
                    _ => return Err(bad()),
                }
            }
            ["gfm", id, f] => {
                let k = n.gfm(id)?;
                match *f {
                    "p_set" => ParamTarget::GfmPset(k),
                    "q_set" => ParamTarget::GfmQset(k),
                    "m_p" => ParamTarget::GfmMp(k),
                    "n_q" => ParamTarget::GfmNq(k),
                    _ => return Err(bad()),
                }
            }
            _ => return Err(bad()),
        };
        match t {
            ParamTarget::GridX if model.grid.kind() != SourceKind::Dynamic => {
                Err(invalid(format!("parameter '{path}'"), "grid reactance can only vary on an inductive source"))
            }
            ParamTarget::GridR if model.grid.kind() == SourceKind::Ideal => {
                Err(invalid(format!("parameter '{path}'"), "grid resistance cannot vary on an ideal source"))
            }
            ParamTarget::GflGv(k) | ParamTarget::GflBv(k) if model.gfl[k].val == ValMode::Off => {
                Err(invalid(format!("parameter '{path}'"), "converter has no virtual admittance loop"))
            }
            _ => Ok(t),
        }
    }

    pub fn get(&self, m: &NetworkModel) -> f64 {
        let w0 = m.omega0;
        let gains = |k: usize| m.gfl[k].val.gains().copied().unwrap_or_else(|| unreachable!("checked at parse"));
        match *self {
            ParamTarget::Lambda => m.lambda,
            ParamTarget::GridDw => m.dw,
            ParamTarget::GridE => m.grid.e_mag,
            ParamTarget::GridR => m.grid.r_g,
            ParamTarget::GridX => m.grid.l_g * w0,
            ParamTarget::BranchR(k) => m.branches[k].r,
            ParamTarget::BranchX(k) => m.branches[k].l * w0,
            ParamTarget::BusB(k) => m.buses[k].c_sh * w0,
            ParamTarget::LoadP0(k) => m.loads[k].p0,
            ParamTarget::LoadQ0(k) => m.loads[k].q0,
            ParamTarget::MachineTorque(k) => m.machines[k].t_mech,
            ParamTarget::LtcVref(k) => m.ltcs[k].v_ref,
            ParamTarget::GflPref(k) => m.gfl[k].p_ref,
            ParamTarget::GflQ0(k) => m.gfl[k].q0,
            ParamTarget::GflKq(k) => m.gfl[k].kq,
            ParamTarget::GflVref(k) => m.gfl[k].v_ref,
            ParamTarget::GflKpPll(k) => m.gfl[k].kp_pll,
            ParamTarget::GflKiPll(k) => m.gfl[k].ki_pll,
            ParamTarget::GflImax(k) => m.gfl[k].i_max(),
            ParamTarget::GflGv(k) => gains(k).g_v,
            ParamTarget::GflBv(k) => gains(k).b_v,
            ParamTarget::GfmPset(k) => m.gfm[k].p_set,
            ParamTarget::GfmQset(k) => m.gfm[k].q_set,
            ParamTarget::GfmMp(k) => m.gfm[k].m_p,
            ParamTarget::GfmNq(k) => m.gfm[k].n_q,
        }
    }

    pub fn set(&self, m: &mut NetworkModel, value: f64) -> Result<(), ModelError> {
        let w0 = m.omega0;
        match *self {
            ParamTarget::Lambda => m.lambda = value,
            ParamTarget::GridDw => m.dw = value,
            ParamTarget::GridE => m.grid.e_mag = value,
            ParamTarget::GridR => m.grid.r_g = value,
            ParamTarget::GridX => m.grid.l_g = value / w0,
            ParamTarget::BranchR(k) => m.branches[k].r = value,
            ParamTarget::BranchX(k) => m.branches[k].l = value / w0,
            ParamTarget::BusB(k) => m.buses[k].c_sh = value / w0,
            ParamTarget::LoadP0(k) => m.loads[k].p0 = value,
            ParamTarget::LoadQ0(k) => m.loads[k].q0 = value,
            ParamTarget::MachineTorque(k) => m.machines[k].t_mech = value,
            ParamTarget::LtcVref(k) => m.ltcs[k].v_ref = value,
            ParamTarget::GflPref(k) => m.gfl[k].p_ref = value,
            ParamTarget::GflQ0(k) => m.gfl[k].q0 = value,
            ParamTarget::GflKq(k) => m.gfl[k].kq = value,
            ParamTarget::GflVref(k) => m.gfl[k].v_ref = value,
            ParamTarget::GflKpPll(k) => m.gfl[k].kp_pll = value,
            ParamTarget::GflKiPll(k) => m.gfl[k].ki_pll = value,
            ParamTarget::GflImax(k) => {
                let k_s = m.gfl[k].limiter.sharpness();
                m.gfl[k].limiter =
                    SmoothLimiter::new(value, k_s).ok_or_else(|| invalid("converter current limit", "must be > 0"))?;
            }
            ParamTarget::GflGv(k) => {
                if let Some(g) = m.gfl[k].val.gains_mut() {
                    g.g_v = value;
                }
            }
            ParamTarget::GflBv(k) => {
                if let Some(g) = m.gfl[k].val.gains_mut() {
                    g.b_v = value;
                }
            }
            ParamTarget::GfmPset(k) => m.gfm[k].p_set = value,
            ParamTarget::GfmQset(k) => m.gfm[k].q_set = value,
            ParamTarget::GfmMp(k) => m.gfm[k].m_p = value,
            ParamTarget::GfmNq(k) => m.gfm[k].n_q = value,
        }
        Ok(())
    }
}

/// Offsets of each device block inside the state vector.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    bus: usize,
    branch: usize,
    grid: usize,
    ltc: usize,
    load: usize,
    machine: usize,
    gfl: Vec<usize>,
    gfm: usize,
    dim: usize,
}

impl Layout {
    fn new(m: &NetworkModel) -> Self {
        let bus = 0;
        let branch = bus + 2 * m.buses.len();
        let grid = branch + 2 * m.branches.len();
        let grid_len = if m.grid.kind() == SourceKind::Ideal { 0 } else { 2 };
        let ltc = grid + grid_len;
        let load = ltc + 3 * m.ltcs.len();
        let machine = load + 2 * m.loads.len();
        let mut at = machine + 3 * m.machines.len();
        let mut gfl = Vec::with_capacity(m.gfl.len());
        for c in &m.gfl {
            gfl.push(at);
            at += if matches!(c.val, ValMode::Dynamic(_)) { 8 } else { 6 };
        }
        let gfm = at;
        Self { bus, branch, grid, ltc, load, machine, gfl, gfm, dim: gfm + 5 * m.gfm.len() }
    }
}

fn cx(x: &[f64], k: usize) -> Complex64 {
    Complex64::new(x[k], x[k + 1])
}

fn put(out: &mut [f64], k: usize, z: Complex64) {
    out[k] = z.re;
    out[k + 1] = z.im;
}

/// The assembled network as a [`DaeSystem`].
#[derive(Debug, Clone)]
pub struct GridSystem {
    model: NetworkModel,
    layout: Layout,
    targets: Vec<ParamTarget>,
    names: Vec<String>,
    base: Vec<f64>,
}

impl GridSystem {
    /// Builds the system with the listed parameter paths exposed in `p`.
    pub fn new(model: NetworkModel, params: &[&str]) -> Result<Self, ModelError> {
        model.validate()?;
        let mut targets = Vec::with_capacity(params.len());
        let mut names = Vec::with_capacity(params.len());
        for &path in params {
            if names.iter().any(|n| n == path) {
                return Err(invalid(format!("parameter '{path}'"), "listed twice"));
            }
            targets.push(ParamTarget::parse(&model, path)?);
            names.push(path.to_string());
        }
        let base = targets.iter().map(|t| t.get(&model)).collect();
        let layout = Layout::new(&model);
        Ok(Self { model, layout, targets, names, base })
    }

    pub fn model(&self) -> &NetworkModel {
        &self.model
    }

    /// Parameter values of the underlying model.
    pub fn base_params(&self) -> &[f64] {
        &self.base
    }

    /// The model with `p` applied.
    pub fn model_at(&self, p: &[f64]) -> Result<Cow<'_, NetworkModel>, ModelError> {
        if p == self.base.as_slice() {
            return Ok(Cow::Borrowed(&self.model));
        }
        let mut m = self.model.clone();
        for (t, &v) in self.targets.iter().zip(p) {
            t.set(&mut m, v)?;
        }
        Ok(Cow::Owned(m))
    }

    /// A copy whose base model carries `p`.
    pub fn with_params(&self, p: &[f64]) -> Result<Self, ModelError> {
        let m = self.model_at(p)?.into_owned();
        let params: Vec<&str> = self.names.iter().map(String::as_str).collect();
        Self::new(m, &params)
    }

    pub fn bus_offset(&self, b: usize) -> usize {
        self.layout.bus + 2 * b
    }

    pub fn bus_voltage(&self, x: &[f64], b: usize) -> Complex64 {
        cx(x, self.bus_offset(b))
    }

    pub fn bus_voltages(&self, x: &[f64]) -> Vec<Complex64> {
        (0..self.model.buses.len()).map(|b| self.bus_voltage(x, b)).collect()
    }

    pub fn branch_current(&self, x: &[f64], k: usize) -> Complex64 {
        cx(x, self.layout.branch + 2 * k)
    }

    pub fn gfl_offset(&self, k: usize) -> usize {
        self.layout.gfl[k]
    }

    pub fn gfm_offset(&self, k: usize) -> usize {
        self.layout.gfm + 5 * k
    }

    pub fn ltc_tap(&self, x: &[f64], k: usize) -> f64 {
        x[self.layout.ltc + 3 * k + 2]
    }

    pub fn machine_slip(&self, x: &[f64], k: usize) -> f64 {
        x[self.layout.machine + 3 * k]
    }

    pub fn gfl_state(&self, x: &[f64], k: usize) -> GflState {
        let o = self.layout.gfl[k];
        let i_v = if matches!(self.model.gfl[k].val, ValMode::Dynamic(_)) { cx(x, o + 6) } else { Complex64::default() };
        GflState { theta: x[o], eps: x[o + 1], i: cx(x, o + 2), xi: cx(x, o + 4), i_v }
    }

    pub fn gfm_state(&self, x: &[f64], k: usize) -> GfmState {
        let o = self.gfm_offset(k);
        GfmState { theta: x[o], p_f: x[o + 1], q_f: x[o + 2], i: cx(x, o + 3) }
    }

    /// Converter equations evaluated at `x`, including modulation voltage and
    /// reference details.
    pub fn gfl_outputs(&self, x: &[f64], p: &[f64], k: usize) -> Result<GflResidual, EngineError> {
        let m = self.model_at(p)?;
        let c = &m.gfl[k];
        Ok(gfl_residual(c, &self.gfl_state(x, k), self.bus_voltage(x, c.bus), m.omega0, m.omega_frame())?)
    }

    pub fn gfm_outputs(&self, x: &[f64], p: &[f64], k: usize) -> Result<GfmResidual, EngineError> {
        let m = self.model_at(p)?;
        let c = &m.gfm[k];
        Ok(gfm_droop_residual(c, &self.gfm_state(x, k), self.bus_voltage(x, c.bus), m.omega0, m.omega_frame()))
    }

    /// Current drawn by each ZIP load.
    pub fn load_currents(&self, x: &[f64]) -> Vec<Complex64> {
        self.model
            .loads
            .iter()
            .enumerate()
            .map(|(k, ld)| cx(x, self.layout.load + 2 * k).conj() * self.bus_voltage(x, ld.bus))
            .collect()
    }

    /// `|raw reference| / i_max` of every grid-following converter.
    pub fn limiter_activity(&self, x: &[f64], p: &[f64]) -> Result<Vec<f64>, EngineError> {
        let m = self.model_at(p)?;
        (0..m.gfl.len())
            .map(|k| {
                let r = self.gfl_outputs(x, p, k)?;
                Ok(m.gfl[k].limiter.activity(r.reference.raw.norm()))
            })
            .collect()
    }

    /// Current delivered by the grid source. For an ideal source it follows
    /// from current balance at its bus.
    pub fn grid_current(&self, x: &[f64], p: &[f64]) -> Result<Complex64, EngineError> {
        let m = self.model_at(p)?;
        if m.grid.kind() != SourceKind::Ideal {
            return Ok(cx(x, self.layout.grid));
        }
        let mut f = vec![0.0; self.layout.dim];
        let inj = self.assemble(&m, x, &mut f)?;
        let gb = m.grid.bus;
        let v = self.bus_voltage(x, gb);
        let mut net = inj[gb] + m.omega_frame() * m.buses[gb].c_sh * rot_j(v);
        for (k, br) in m.branches.iter().enumerate() {
            let i = self.branch_current(x, k);
            if br.from == gb {
                net -= i;
            }
            if br.to == gb {
                net += i;
            }
        }
        Ok(-net)
    }

    /// Device residuals and the per-bus net injections. Bus rows of `out`
    /// are left for the caller.
    fn assemble(&self, m: &NetworkModel, x: &[f64], out: &mut [f64]) -> Result<Vec<Complex64>, EngineError> {
        let lay = &self.layout;
        let w = m.omega_frame();
        let v: Vec<Complex64> = (0..m.buses.len()).map(|b| self.bus_voltage(x, b)).collect();
        let mut inj = vec![Complex64::default(); m.buses.len()];
        let g = &m.grid;
        let e = Complex64::new(g.e_mag, 0.0);
        match g.kind() {
            SourceKind::Ideal => {}
            kind => {
                let i = cx(x, lay.grid);
                let l = if kind == SourceKind::Dynamic { g.l_g } else { 0.0 };
                put(out, lay.grid, e - v[g.bus] - g.r_g * i + w * l * rot_j(i));
                inj[g.bus] += i;
            }
        }
        for (k, t) in m.ltcs.iter().enumerate() {
            let o = lay.ltc + 3 * k;
            let i = cx(x, o);
            let n = x[o + 2];
            put(out, o, n * v[t.from] - v[t.to] - t.r_t * i + w * t.l_t * rot_j(i));
            out[o + 2] = ltc_residual(t, n, v[t.to].norm());
            inj[t.from] -= n * i;
            inj[t.to] += i;
        }
        for (k, ld) in m.loads.iter().enumerate() {
            let o = lay.load + 2 * k;
            let y = cx(x, o);
            let vb = v[ld.bus];
            let target = zip_admittance_target(ld, vb.norm(), m.lambda);
            put(out, o, target - y);
            inj[ld.bus] -= y.conj() * vb;
        }
        for (k, mc) in m.machines.iter().enumerate() {
            let o = lay.machine + 3 * k;
            let st = ImState { slip: x[o], e: cx(x, o + 1) };
            let r = im_residual(mc, &st, v[mc.bus], m.omega0, w, m.lambda);
            out[o] = r.slip;
            put(out, o + 1, r.e);
            inj[mc.bus] -= r.current;
        }
        for (k, c) in m.gfl.iter().enumerate() {
            let o = lay.gfl[k];
            let r = gfl_residual(c, &self.gfl_state(x, k), v[c.bus], m.omega0, w)?;
            out[o] = r.theta;
            out[o + 1] = r.eps;
            put(out, o + 2, r.i);
            put(out, o + 4, r.xi);
            if matches!(c.val, ValMode::Dynamic(_)) {
                put(out, o + 6, r.i_v);
            }
            inj[c.bus] += r.injection;
        }
        for (k, c) in m.gfm.iter().enumerate() {
            let o = lay.gfm + 5 * k;
            let r = gfm_droop_residual(c, &self.gfm_state(x, k), v[c.bus], m.omega0, w);
            out[o] = r.theta;
            out[o + 1] = r.p_f;
            out[o + 2] = r.q_f;
            put(out, o + 3, r.i);
            inj[c.bus] += r.injection;
        }
        Ok(inj)
    }

    /// Initial guess from a phasor power flow in which every device is
    /// replaced by its steady current at the present voltages. Device states
    /// are then set to their own steady values at the solved voltages.
    pub fn initial_guess(&self, p: &[f64]) -> Result<Vec<f64>, EngineError> {
        let m = self.model_at(p)?;
        let v = phasor_power_flow(&m);
        let lay = &self.layout;
        let w = m.omega_frame();
        let mut x = vec![0.0; lay.dim];
        for (b, vb) in v.iter().enumerate() {
            put(&mut x, self.bus_offset(b), *vb);
        }
        for (k, br) in m.branches.iter().enumerate() {
            let z = Complex64::new(br.r, w * br.l);
            put(&mut x, lay.branch + 2 * k, (v[br.from] - v[br.to]) / z);
        }
        match m.grid.kind() {
            SourceKind::Ideal => {}
            kind => {
                let l = if kind == SourceKind::Dynamic { m.grid.l_g } else { 0.0 };
                let z = Complex64::new(m.grid.r_g, w * l);
                put(&mut x, lay.grid, (Complex64::new(m.grid.e_mag, 0.0) - v[m.grid.bus]) / z);
            }
        }
        for (k, t) in m.ltcs.iter().enumerate() {
            let o = lay.ltc + 3 * k;
            let n = 1.0f64.clamp(t.n_min, t.n_max);
            put(&mut x, o, (n * v[t.from] - v[t.to]) / Complex64::new(t.r_t, w * t.l_t));
            x[o + 2] = n;
        }
        for (k, ld) in m.loads.iter().enumerate() {
            put(&mut x, lay.load + 2 * k, zip_admittance_target(ld, v[ld.bus].norm(), m.lambda));
        }
        for (k, mc) in m.machines.iter().enumerate() {
            let (s, e) = machine_steady_state(mc, v[mc.bus], m.omega0, w, m.lambda);
            let o = lay.machine + 3 * k;
            x[o] = s;
            put(&mut x, o + 1, e);
        }
        for (k, c) in m.gfl.iter().enumerate() {
            let o = lay.gfl[k];
            let vb = v[c.bus];
            x[o] = vb.arg();
            x[o + 1] = m.dw;
            let v_pll = Complex64::new(vb.norm(), 0.0);
            let i = gfl_steady_current(c, v_pll);
            put(&mut x, o + 2, i);
            put(&mut x, o + 4, c.r_f * i);
            if let ValMode::Dynamic(g) = &c.val {
                put(&mut x, o + 6, g.admittance() * val_deviation(g, v_pll));
            }
        }
        for (k, c) in m.gfm.iter().enumerate() {
            let o = lay.gfm + 5 * k;
            let vb = v[c.bus];
            let z = Complex64::new(c.r_v, w * c.l_v);
            let theta = vb.arg() + gfm_angle(c, vb.norm(), z.im);
            let i = (Complex64::from_polar(c.v_set, theta) - vb) / z;
            let s = vb * i.conj();
            x[o] = theta;
            x[o + 1] = s.re;
            x[o + 2] = s.im;
            put(&mut x, o + 3, i);
        }
        Ok(x)
    }

    /// Newton from `x0` (or the flat start), falling back to pseudo-transient
    /// continuation when plain Newton fails.
    pub fn solve_equilibrium(&self, x0: Option<&[f64]>, p: &[f64]) -> Result<EquilibriumSolution, EngineError> {
        let guess = match x0 {
            Some(x) => x.to_vec(),
            None => self.initial_guess(p)?,
        };
        let opts = NewtonOptions::default();
        match newton_equilibrium(self, &guess, p, &opts) {
            Ok(s) => Ok(s),
            Err(first) => match pseudo_transient(self, &guess, p, &opts) {
                Ok(s) => Ok(s),
                Err(_) => Err(first),
            },
        }
    }

    pub fn simulate(&self, x0: &[f64], p: &[f64], t_end: f64, h: f64) -> Result<Trajectory, EngineError> {
        integrate(self, x0, p, &IntegrateOptions::new(t_end, h))
    }

    /// Index of a named state.
    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.state_names().iter().position(|n| n == name)
    }
}

fn gfl_steady_current(c: &crate::converter::GflParams, v_pll: Complex64) -> Complex64 {
    let correction = match &c.val {
        ValMode::Off => Complex64::default(),
        ValMode::Quasi(g) | ValMode::Dynamic(g) => qval_reference(g, v_pll),
    };
    let q_ref = c.q0 + c.kq * (c.v_ref - v_pll.norm());
    let raw = (Complex64::new(c.p_ref, q_ref) / v_pll).conj() + correction;
    c.limiter.sat_vector(raw)
}

fn gfm_angle(c: &crate::converter::GfmDroopParams, v: f64, x_v: f64) -> f64 {
    (c.p_set * x_v / (c.v_set * v)).clamp(-1.0, 1.0).asin()
}

/// Fixed-point phasor power flow: each pass solves the linear network with
/// device currents frozen at the previous voltages.
fn phasor_power_flow(m: &NetworkModel) -> Vec<Complex64> {
    let nb = m.buses.len();
    let w = m.omega_frame();
    let e = Complex64::new(m.grid.e_mag, 0.0);
    let mut y = DMatrix::<Complex64>::zeros(nb, nb);
    let j = Complex64::i();
    for (b, bus) in m.buses.iter().enumerate() {
        y[(b, b)] += j * w * bus.c_sh;
    }
    let mut stamp = |a: usize, b: usize, ya: Complex64, n: f64| {
        // tap n on the `a` side
        y[(a, a)] += n * n * ya;
        y[(b, b)] += ya;
        y[(a, b)] -= n * ya;
        y[(b, a)] -= n * ya;
    };
    for br in &m.branches {
        stamp(br.from, br.to, Complex64::new(br.r, w * br.l).inv(), 1.0);
    }
    for t in &m.ltcs {
        stamp(t.from, t.to, Complex64::new(t.r_t, w * t.l_t).inv(), 1.0f64.clamp(t.n_min, t.n_max));
    }
    let gb = m.grid.bus;
    let ideal = m.grid.kind() == SourceKind::Ideal;
    let y_g = if ideal {
        Complex64::default()
    } else {
        let l = if m.grid.kind() == SourceKind::Dynamic { m.grid.l_g } else { 0.0 };
        Complex64::new(m.grid.r_g, w * l).inv()
    };
    let gfm_z: Vec<Complex64> = m.gfm.iter().map(|c| Complex64::new(c.r_v, w * c.l_v)).collect();
    for (c, z) in m.gfm.iter().zip(&gfm_z) {
        y[(c.bus, c.bus)] += z.inv();
    }
    y[(gb, gb)] += y_g;
    if ideal {
        for k in 0..nb {
            y[(gb, k)] = Complex64::default();
        }
        y[(gb, gb)] = Complex64::new(1.0, 0.0);
    }
    let Some(lu) = Some(y.lu()) else { unreachable!() };
    let mut v = vec![e; nb];
    for _ in 0..100 {
        let mut rhs = DVector::<Complex64>::zeros(nb);
        for ld in &m.loads {
            let vb = v[ld.bus];
            let target = zip_admittance_target(ld, vb.norm(), m.lambda);
            rhs[ld.bus] -= target.conj() * vb;
        }
        for mc in &m.machines {
            let vb = v[mc.bus];
            let (_, em) = machine_steady_state(mc, vb, m.omega0, w, m.lambda);
            rhs[mc.bus] -= crate::netmodel::im_current(mc, em, vb);
        }
        for c in &m.gfl {
            let vb = v[c.bus];
            if vb.norm() > crate::netmodel::V_FLOOR {
                let rot = Complex64::from_polar(1.0, vb.arg());
                rhs[c.bus] += gfl_steady_current(c, Complex64::new(vb.norm(), 0.0)) * rot;
            }
        }
        for (c, z) in m.gfm.iter().zip(&gfm_z) {
            let vb = v[c.bus];
            let th = vb.arg() + gfm_angle(c, vb.norm().max(crate::netmodel::V_FLOOR), z.im);
            rhs[c.bus] += Complex64::from_polar(c.v_set, th) / z;
        }
        if ideal {
            rhs[gb] = e;
        } else {
            rhs[gb] += e * y_g;
        }
        let Some(next) = lu.solve(&rhs) else { break };
        let next: Vec<Complex64> = next.iter().map(|z| if z.norm() > 0.05 { *z } else { Complex64::new(0.05, 0.0) }).collect();
        let delta = next.iter().zip(&v).fold(0.0f64, |a, (p, q)| a.max((p - q).norm()));
        // relax to keep the iteration from oscillating near the nose
        v = next.iter().zip(&v).map(|(p, q)| 0.5 * (p + q)).collect();
        if delta < 1e-10 || !delta.is_finite() {
            break;
        }
    }
    if v.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return vec![e; nb];
    }
    v
}

/// Steady slip and EMF of the third-order machine at a fixed terminal
/// voltage, by bisection on the model's own torque curve.
fn machine_steady_state(
    mc: &crate::netmodel::InductionMachine,
    v: Complex64,
    omega0: f64,
    omega_frame: f64,
    scale: f64,
) -> (f64, Complex64) {
    let zs = Complex64::new(mc.r_s, mc.x_transient());
    let j = Complex64::i();
    let t0 = mc.t0(omega0);
    let dx = mc.x_open() - mc.x_transient();
    // 0 = -e + j·dx·(v - e)/zs - j·ω·s·t0·e  is linear in e
    let emf = |s: f64| {
        let a = Complex64::new(-1.0, 0.0) - j * dx / zs - j * omega_frame * s * t0;
        -(j * dx / zs * v) / a
    };
    let torque = |s: f64| {
        let e = emf(s);
        (e * ((v - e) / zs).conj()).re
    };
    let target = scale * mc.t_mech;
    // peak torque slip bounds the stable part of the curve
    let mut best = (0.0, f64::NEG_INFINITY);
    for i in 1..=200 {
        let s = i as f64 * 0.005;
        let t = torque(s);
        if t > best.1 {
            best = (s, t);
        }
    }
    if target <= 0.0 || target >= best.1 {
        let s = if target <= 0.0 { 0.0 } else { best.0 };
        return (s, emf(s));
    }
    let (mut lo, mut hi) = (0.0, best.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if torque(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    (s, emf(s))
}

impl DaeSystem for GridSystem {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn mass(&self, p: &[f64]) -> Vec<f64> {
        let m = match self.model_at(p) {
            Ok(m) => m,
            Err(_) => Cow::Borrowed(&self.model),
        };
        let lay = &self.layout;
        let mut mass = vec![0.0; lay.dim];
        let ideal = m.grid.kind() == SourceKind::Ideal;
        for (b, bus) in m.buses.iter().enumerate() {
            let c = if ideal && b == m.grid.bus { 0.0 } else { bus.c_sh };
            mass[lay.bus + 2 * b] = c;
            mass[lay.bus + 2 * b + 1] = c;
        }
        for (k, br) in m.branches.iter().enumerate() {
            mass[lay.branch + 2 * k] = br.l;
            mass[lay.branch + 2 * k + 1] = br.l;
        }
        if m.grid.kind() == SourceKind::Dynamic {
            mass[lay.grid] = m.grid.l_g;
            mass[lay.grid + 1] = m.grid.l_g;
        }
        for (k, t) in m.ltcs.iter().enumerate() {
            let o = lay.ltc + 3 * k;
            mass[o] = t.l_t;
            mass[o + 1] = t.l_t;
            mass[o + 2] = 1.0;
        }
        for (k, ld) in m.loads.iter().enumerate() {
            mass[lay.load + 2 * k] = ld.t_load;
            mass[lay.load + 2 * k + 1] = ld.t_load;
        }
        for (k, mc) in m.machines.iter().enumerate() {
            let o = lay.machine + 3 * k;
            mass[o] = 2.0 * mc.h;
            mass[o + 1] = mc.t0(m.omega0);
            mass[o + 2] = mc.t0(m.omega0);
        }
        for (k, c) in m.gfl.iter().enumerate() {
            let o = lay.gfl[k];
            mass[o..o + 6].copy_from_slice(&[1.0, 1.0, c.l_f, c.l_f, 1.0, 1.0]);
            if let ValMode::Dynamic(g) = &c.val {
                let l = dval_realization(g, m.omega0).map_or(0.0, |r| r.l_eq);
                mass[o + 6] = l;
                mass[o + 7] = l;
            }
        }
        for (k, c) in m.gfm.iter().enumerate() {
            let o = lay.gfm + 5 * k;
            mass[o..o + 5].copy_from_slice(&[1.0, c.tau_p, c.tau_q, c.l_v, c.l_v]);
        }
        mass
    }

    fn param_names(&self) -> &[String] {
        &self.names
    }

    fn residual(&self, x: &[f64], p: &[f64], out: &mut [f64]) -> Result<(), EngineError> {
        let m = self.model_at(p)?;
        let lay = &self.layout;
        let inj = self.assemble(&m, x, out)?;
        let nb = m.buses.len();
        let v: Vec<Complex64> = (0..nb).map(|b| self.bus_voltage(x, b)).collect();
        let ib: Vec<Complex64> = (0..m.branches.len()).map(|k| self.branch_current(x, k)).collect();
        let mut bus_out = vec![Complex64::default(); nb];
        let mut branch_out = vec![Complex64::default(); ib.len()];
        network_residual(&m, NetworkView { v: &v, i_branch: &ib }, &inj, &mut bus_out, &mut branch_out);
        for (b, z) in bus_out.iter().enumerate() {
            put(out, lay.bus + 2 * b, *z);
        }
        for (k, z) in branch_out.iter().enumerate() {
            put(out, lay.branch + 2 * k, *z);
        }
        if m.grid.kind() == SourceKind::Ideal {
            let gb = m.grid.bus;
            put(out, lay.bus + 2 * gb, Complex64::new(m.grid.e_mag, 0.0) - v[gb]);
        }
        Ok(())
    }

    fn state_names(&self) -> Vec<String> {
        let m = &self.model;
        let n = &m.names;
        let mut s = Vec::with_capacity(self.layout.dim);
        let pair = |s: &mut Vec<String>, prefix: String, a: &str, b: &str| {
            s.push(format!("{prefix}.{a}"));
            s.push(format!("{prefix}.{b}"));
        };
        for id in &n.buses {
            pair(&mut s, format!("bus.{id}"), "vd", "vq");
        }
        for id in &n.branches {
            pair(&mut s, format!("branch.{id}"), "id", "iq");
        }
        if m.grid.kind() != SourceKind::Ideal {
            pair(&mut s, "grid".into(), "id", "iq");
        }
        for id in &n.ltcs {
            pair(&mut s, format!("ltc.{id}"), "id", "iq");
            s.push(format!("ltc.{id}.n"));
        }
        for id in &n.loads {
            pair(&mut s, format!("load.{id}"), "g", "b");
        }
        for id in &n.machines {
            s.push(format!("machine.{id}.slip"));
            pair(&mut s, format!("machine.{id}"), "ed", "eq");
        }
        for (k, id) in n.gfl.iter().enumerate() {
            s.push(format!("gfl.{id}.theta"));
            s.push(format!("gfl.{id}.eps"));
            pair(&mut s, format!("gfl.{id}"), "id", "iq");
            pair(&mut s, format!("gfl.{id}"), "xid", "xiq");
            if matches!(m.gfl[k].val, ValMode::Dynamic(_)) {
                pair(&mut s, format!("gfl.{id}"), "ivd", "ivq");
            }
        }
        for id in &n.gfm {
            s.push(format!("gfm.{id}.theta"));
            s.push(format!("gfm.{id}.p_f"));
            s.push(format!("gfm.{id}.q_f"));
            pair(&mut s, format!("gfm.{id}"), "id", "iq");
        }
        s
    }
}
