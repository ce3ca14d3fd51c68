//! JSON scenario files: network tables, parameter choices and analysis
//! settings. Unknown keys are rejected; every omitted field takes a fixed
//! default so the canonical re-serialization is fully explicit.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::converter::{GflParams, GfmDroopParams};
use crate::netmodel::{
    omega_nominal, Bus, GridSource, InductionMachine, LtcTransformer, ModelError, Names, NetworkModel, RlBranch, ZipLoad,
};
use crate::smoothlim::{SmoothLimiter, DEFAULT_SHARPNESS};
use crate::val::{ValGains, ValMode};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("reference error: {kind} '{id}' does not exist")]
    Reference { kind: &'static str, id: String },
    #[error("duplicate {kind} id '{id}'")]
    Duplicate { kind: &'static str, id: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn d_f_hz() -> f64 {
    50.0
}
fn d_one() -> f64 {
    1.0
}
fn d_b_sh() -> f64 {
    1e-3
}
fn d_const_p() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}
fn d_t_load() -> f64 {
    0.05
}
fn d_x_f() -> f64 {
    0.1
}
fn d_r_f() -> f64 {
    0.005
}
fn d_cc_bw() -> f64 {
    300.0
}
fn d_kp_pll() -> f64 {
    40.0
}
fn d_ki_pll() -> f64 {
    800.0
}
fn d_i_max() -> f64 {
    1.2
}
fn d_k_lim() -> f64 {
    DEFAULT_SHARPNESS
}
fn d_gain_box() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusSpec {
    pub id: String,
    /// Shunt susceptance at the base frequency (pu).
    #[serde(default = "d_b_sh")]
    pub b_sh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub id: String,
    pub from: String,
    pub to: String,
    #[serde(default)]
    pub r: f64,
    /// Reactance at the base frequency (pu).
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub bus: String,
    #[serde(default = "d_one")]
    pub e_mag: f64,
    #[serde(default)]
    pub r_g: f64,
    #[serde(default)]
    pub x_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSpec {
    pub id: String,
    pub bus: String,
    pub p0: f64,
    #[serde(default)]
    pub q0: f64,
    /// Active ZIP fractions `[z, i, p]`.
    #[serde(default = "d_const_p")]
    pub a: [f64; 3],
    #[serde(default = "d_const_p")]
    pub b: [f64; 3],
    #[serde(default = "d_one")]
    pub v0: f64,
    #[serde(default = "d_t_load")]
    pub t_load: f64,
}

fn d_x_s() -> f64 {
    0.1
}
fn d_x_r() -> f64 {
    0.08
}
fn d_x_m() -> f64 {
    3.0
}
fn d_r_r() -> f64 {
    0.02
}
fn d_r_s() -> f64 {
    0.01
}
fn d_h() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineSpec {
    pub id: String,
    pub bus: String,
    #[serde(default = "d_x_s")]
    pub x_s: f64,
    #[serde(default = "d_x_r")]
    pub x_r: f64,
    #[serde(default = "d_x_m")]
    pub x_m: f64,
    #[serde(default = "d_r_r")]
    pub r_r: f64,
    #[serde(default = "d_r_s")]
    pub r_s: f64,
    #[serde(default = "d_h")]
    pub h: f64,
    pub t_mech: f64,
}

fn d_x_t() -> f64 {
    0.05
}
fn d_n_min() -> f64 {
    0.9
}
fn d_n_max() -> f64 {
    1.1
}
fn d_t_ltc() -> f64 {
    30.0
}
fn d_band() -> f64 {
    0.01
}
fn d_k_s() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtcSpec {
    pub id: String,
    pub from: String,
    /// Regulated bus.
    pub to: String,
    #[serde(default)]
    pub r_t: f64,
    #[serde(default = "d_x_t")]
    pub x_t: f64,
    #[serde(default = "d_n_min")]
    pub n_min: f64,
    #[serde(default = "d_n_max")]
    pub n_max: f64,
    #[serde(default = "d_t_ltc")]
    pub t_ltc: f64,
    #[serde(default = "d_one")]
    pub v_ref: f64,
    #[serde(default = "d_band")]
    pub d_band: f64,
    #[serde(default = "d_k_s")]
    pub k_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ValKind {
    #[default]
    Off,
    Dynamic,
    Quasi,
}

fn d_g_min() -> f64 {
    -d_gain_box()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValSpec {
    #[serde(default)]
    pub mode: ValKind,
    #[serde(default)]
    pub g_v: f64,
    #[serde(default)]
    pub b_v: f64,
    #[serde(default = "d_one")]
    pub v_nom: f64,
    #[serde(default = "d_g_min")]
    pub g_min: f64,
    #[serde(default = "d_gain_box")]
    pub g_max: f64,
    #[serde(default = "d_g_min")]
    pub b_min: f64,
    #[serde(default = "d_gain_box")]
    pub b_max: f64,
}

impl Default for ValSpec {
    fn default() -> Self {
        Self {
            mode: ValKind::Off,
            g_v: 0.0,
            b_v: 0.0,
            v_nom: 1.0,
            g_min: d_g_min(),
            g_max: d_gain_box(),
            b_min: d_g_min(),
            b_max: d_gain_box(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GflSpec {
    pub id: String,
    pub bus: String,
    #[serde(default = "d_x_f")]
    pub x_f: f64,
    #[serde(default = "d_r_f")]
    pub r_f: f64,
    /// Current-loop bandwidth (rad/s); PI gains are `l_f·bw` and `r_f·bw`.
    #[serde(default = "d_cc_bw")]
    pub cc_bandwidth: f64,
    #[serde(default = "d_kp_pll")]
    pub kp_pll: f64,
    #[serde(default = "d_ki_pll")]
    pub ki_pll: f64,
    pub p_ref: f64,
    #[serde(default)]
    pub kq: f64,
    #[serde(default = "d_one")]
    pub v_ref: f64,
    #[serde(default)]
    pub q0: f64,
    #[serde(default = "d_i_max")]
    pub i_max: f64,
    #[serde(default = "d_k_lim")]
    pub k_lim: f64,
    #[serde(default = "d_one")]
    pub k_aw: f64,
    #[serde(default)]
    pub val: ValSpec,
}

fn d_m_p() -> f64 {
    0.02 * omega_nominal(50.0)
}
fn d_n_q() -> f64 {
    0.05
}
fn d_x_v() -> f64 {
    0.15
}
fn d_r_v() -> f64 {
    0.01
}
fn d_tau() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GfmSpec {
    pub id: String,
    pub bus: String,
    #[serde(default = "d_m_p")]
    pub m_p: f64,
    #[serde(default = "d_n_q")]
    pub n_q: f64,
    #[serde(default = "d_one")]
    pub v_set: f64,
    #[serde(default)]
    pub p_set: f64,
    #[serde(default)]
    pub q_set: f64,
    #[serde(default = "d_r_v")]
    pub r_v: f64,
    #[serde(default = "d_x_v")]
    pub x_v: f64,
    #[serde(default = "d_tau")]
    pub tau_p: f64,
    #[serde(default = "d_tau")]
    pub tau_q: f64,
}

fn d_param() -> String {
    "lambda".into()
}
fn d_h_min() -> f64 {
    1e-5
}
fn d_h_max() -> f64 {
    0.05
}
fn d_h0() -> f64 {
    0.01
}
fn d_steps() -> usize {
    2000
}
fn d_p_min() -> f64 {
    0.0
}
fn d_p_max() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuationSpec {
    #[serde(default = "d_param")]
    pub param: String,
    #[serde(default = "d_h0")]
    pub h0: f64,
    #[serde(default = "d_h_min")]
    pub h_min: f64,
    #[serde(default = "d_h_max")]
    pub h_max: f64,
    #[serde(default = "d_steps")]
    pub max_steps: usize,
    #[serde(default = "d_p_min")]
    pub p_min: f64,
    #[serde(default = "d_p_max")]
    pub p_max: f64,
    /// After a turning point, stop once the parameter is back to this
    /// fraction of its largest excursion from the start.
    #[serde(default = "d_stop_frac")]
    pub stop_fraction: f64,
}

fn d_stop_frac() -> f64 {
    0.5
}

impl Default for ContinuationSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub param2: String,
    #[serde(default)]
    pub grid: Vec<f64>,
}

fn d_t_end() -> f64 {
    1.0
}
fn d_step_h() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSpec {
    pub param: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    #[serde(default = "d_t_end")]
    pub t_end: f64,
    #[serde(default = "d_step_h")]
    pub h: f64,
    /// Parameter change applied at t = 0 to the equilibrium.
    #[serde(default)]
    pub step: Option<StepSpec>,
    /// Additive offset applied to the named state at t = 0.
    #[serde(default)]
    pub perturb: Option<StepSpec>,
    /// Keep every n-th sample in the output.
    #[serde(default = "d_decimate")]
    pub decimate: usize,
}

fn d_decimate() -> usize {
    1
}

impl Default for SimulationSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

fn d_tol_v() -> f64 {
    0.01
}
fn d_alpha() -> f64 {
    0.7
}
fn d_iters() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecondarySpec {
    /// Per-bus weights keyed by bus id; unlisted buses weigh zero.
    pub weights: std::collections::BTreeMap<String, f64>,
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_iters")]
    pub max_iter: usize,
    #[serde(default = "d_tol_v")]
    pub tol_v: f64,
    #[serde(default = "d_one")]
    pub v_nom: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfSpec {
    pub bus: String,
    /// Converter ids (`gfl` or `gfm`) whose frequency is decomposed.
    #[serde(default)]
    pub converters: Vec<String>,
    #[serde(default = "d_decimate")]
    pub smoothing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    #[serde(default)]
    pub continuation: ContinuationSpec,
    #[serde(default)]
    pub boundary: Option<BoundarySpec>,
    #[serde(default)]
    pub simulation: SimulationSpec,
    #[serde(default)]
    pub secondary: Option<SecondarySpec>,
    #[serde(default)]
    pub cf: Option<CfSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default = "d_f_hz")]
    pub f_hz: f64,
    #[serde(default = "d_one")]
    pub lambda: f64,
    pub buses: Vec<BusSpec>,
    #[serde(default)]
    pub branches: Vec<BranchSpec>,
    pub grid: GridSpec,
    #[serde(default)]
    pub loads: Vec<LoadSpec>,
    #[serde(default)]
    pub machines: Vec<MachineSpec>,
    #[serde(default)]
    pub ltcs: Vec<LtcSpec>,
    #[serde(default)]
    pub gfl: Vec<GflSpec>,
    #[serde(default)]
    pub gfm: Vec<GfmSpec>,
    #[serde(default)]
    pub analysis: AnalysisSpec,
}

fn unique<'a>(kind: &'static str, ids: impl Iterator<Item = &'a String>) -> Result<Vec<String>, ScenarioError> {
    let mut out: Vec<String> = Vec::new();
    for id in ids {
        if out.contains(id) {
            return Err(ScenarioError::Duplicate { kind, id: id.clone() });
        }
        out.push(id.clone());
    }
    Ok(out)
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        sc.to_model()?;
        Ok(sc)
    }

    /// Pretty JSON with every default spelled out, newline-terminated.
    pub fn canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    /// Builds and validates the network model.
    pub fn to_model(&self) -> Result<NetworkModel, ScenarioError> {
        let buses = unique("bus", self.buses.iter().map(|b| &b.id))?;
        let bus =
            |id: &str| buses.iter().position(|b| b == id).ok_or_else(|| ScenarioError::Reference { kind: "bus", id: id.into() });
        let w0 = omega_nominal(self.f_hz);
        let names = Names {
            buses: buses.clone(),
            branches: unique("branch", self.branches.iter().map(|b| &b.id))?,
            loads: unique("load", self.loads.iter().map(|b| &b.id))?,
            machines: unique("machine", self.machines.iter().map(|b| &b.id))?,
            ltcs: unique("ltc", self.ltcs.iter().map(|b| &b.id))?,
            gfl: unique("gfl", self.gfl.iter().map(|b| &b.id))?,
            gfm: unique("gfm", self.gfm.iter().map(|b| &b.id))?,
        };
        let branches = self
            .branches
            .iter()
            .map(|b| Ok(RlBranch { from: bus(&b.from)?, to: bus(&b.to)?, r: b.r, l: b.x / w0 }))
            .collect::<Result<_, ScenarioError>>()?;
        let loads = self
            .loads
            .iter()
            .map(|l| Ok(ZipLoad { bus: bus(&l.bus)?, p0: l.p0, q0: l.q0, a: l.a, b: l.b, v0: l.v0, t_load: l.t_load }))
            .collect::<Result<_, ScenarioError>>()?;
        let machines = self
            .machines
            .iter()
            .map(|m| {
                Ok(InductionMachine {
                    bus: bus(&m.bus)?,
                    x_s: m.x_s,
                    x_r: m.x_r,
                    x_m: m.x_m,
                    r_r: m.r_r,
                    r_s: m.r_s,
                    h: m.h,
                    t_mech: m.t_mech,
                })
            })
            .collect::<Result<_, ScenarioError>>()?;
        let ltcs = self
            .ltcs
            .iter()
            .map(|t| {
                Ok(LtcTransformer {
                    from: bus(&t.from)?,
                    to: bus(&t.to)?,
                    r_t: t.r_t,
                    l_t: t.x_t / w0,
                    n_min: t.n_min,
                    n_max: t.n_max,
                    t_ltc: t.t_ltc,
                    v_ref: t.v_ref,
                    d_band: t.d_band,
                    k_s: t.k_s,
                })
            })
            .collect::<Result<_, ScenarioError>>()?;
        let gfl = self
            .gfl
            .iter()
            .map(|c| {
                let limiter = SmoothLimiter::new(c.i_max, c.k_lim).ok_or_else(|| {
                    crate::netmodel::invalid(format!("gfl converter {}", c.id), "requires i_max > 0 and k_lim >= 1")
                })?;
                let gains = ValGains {
                    g_v: c.val.g_v,
                    b_v: c.val.b_v,
                    v_nom: c.val.v_nom,
                    g_min: c.val.g_min,
                    g_max: c.val.g_max,
                    b_min: c.val.b_min,
                    b_max: c.val.b_max,
                };
                let val = match c.val.mode {
                    ValKind::Off => ValMode::Off,
                    ValKind::Dynamic => ValMode::Dynamic(gains),
                    ValKind::Quasi => ValMode::Quasi(gains),
                };
                let l_f = c.x_f / w0;
                Ok(GflParams {
                    bus: bus(&c.bus)?,
                    l_f,
                    r_f: c.r_f,
                    kp_cc: l_f * c.cc_bandwidth,
                    ki_cc: c.r_f * c.cc_bandwidth,
                    kp_pll: c.kp_pll,
                    ki_pll: c.ki_pll,
                    p_ref: c.p_ref,
                    kq: c.kq,
                    v_ref: c.v_ref,
                    q0: c.q0,
                    limiter,
                    k_aw: c.k_aw,
                    val,
                })
            })
            .collect::<Result<_, ScenarioError>>()?;
        let gfm = self
            .gfm
            .iter()
            .map(|c| {
                Ok(GfmDroopParams {
                    bus: bus(&c.bus)?,
                    m_p: c.m_p,
                    n_q: c.n_q,
                    v_set: c.v_set,
                    p_set: c.p_set,
                    q_set: c.q_set,
                    r_v: c.r_v,
                    l_v: c.x_v / w0,
                    tau_p: c.tau_p,
                    tau_q: c.tau_q,
                })
            })
            .collect::<Result<_, ScenarioError>>()?;
        let model = NetworkModel {
            omega0: w0,
            dw: 0.0,
            lambda: self.lambda,
            buses: self.buses.iter().map(|b| Bus { c_sh: b.b_sh / w0 }).collect(),
            branches,
            loads,
            machines,
            ltcs,
            grid: GridSource { bus: bus(&self.grid.bus)?, e_mag: self.grid.e_mag, r_g: self.grid.r_g, l_g: self.grid.x_g / w0 },
            gfl,
            gfm,
            names: Arc::new(names),
        };
        model.validate()?;
        Ok(model)
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let p = path.as_ref();
    let text = std::fs::read_to_string(p).map_err(|source| ScenarioError::Io { path: p.display().to_string(), source })?;
    Scenario::from_json(&text)
}
