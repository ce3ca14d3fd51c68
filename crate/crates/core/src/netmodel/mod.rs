//! Per-unit network model: buses, RL branches, loads, tap changer and grid
//! source, written as dynamic phasors in a synchronous dq frame.
//!
//! Complex numbers carry `(d, q)` pairs as `d + j·q`. The frame rotates at
//! `ω_f = ω0 + dw`, where `dw` is the grid-frequency offset parameter; every
//! inductor contributes `l·di/dt = Δv - r·i - j·ω_f·l·i` and every capacitor
//! `c·dv/dt = Σi - j·ω_f·c·v`.

mod induction;
mod ltc;
mod network;
mod zip;

use std::sync::Arc;

use num_complex::Complex64;
use thiserror::Error;

use crate::converter::{GflParams, GfmDroopParams};

pub use induction::{im_current, im_residual, ImResidual, ImState};
pub use ltc::ltc_residual;
pub use network::{network_residual, NetworkView};
pub use zip::{zip_admittance_target, zip_injection, zip_powers};

/// Voltage magnitude below which power-to-current conversions are frozen.
pub const V_FLOOR: f64 = 0.01;

/// Nominal angular frequency for a base frequency in Hz.
pub fn omega_nominal(f_hz: f64) -> f64 {
    2.0 * std::f64::consts::PI * f_hz
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("degenerate voltage |v| = {magnitude:.3e} at bus {bus}")]
    DegenerateVoltage { bus: String, magnitude: f64 },
    #[error("network is disconnected: bus {0} has no path to the grid source")]
    Disconnected(String),
    #[error("invalid {what}: {reason}")]
    Invalid { what: String, reason: String },
    #[error("unknown {kind} '{id}'")]
    UnknownId { kind: &'static str, id: String },
}

pub(crate) fn invalid(what: impl Into<String>, reason: impl Into<String>) -> ModelError {
    ModelError::Invalid { what: what.into(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bus {
    /// Shunt capacitance (pu·s); susceptance is `ω0·c_sh`.
    pub c_sh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlBranch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    /// Inductance (pu·s); reactance is `ω0·l`.
    pub l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZipLoad {
    pub bus: usize,
    pub p0: f64,
    pub q0: f64,
    /// Active fractions `(z, i, p)`.
    pub a: [f64; 3],
    /// Reactive fractions `(z, i, p)`.
    pub b: [f64; 3],
    pub v0: f64,
    /// Time constant with which the load admittance follows its ZIP target.
    pub t_load: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InductionMachine {
    pub bus: usize,
    pub x_s: f64,
    pub x_r: f64,
    pub x_m: f64,
    pub r_r: f64,
    pub r_s: f64,
    pub h: f64,
    pub t_mech: f64,
}

impl InductionMachine {
    /// Transient reactance `x_s + x_m·x_r/(x_m + x_r)`.
    pub fn x_transient(&self) -> f64 {
        self.x_s + self.x_m * self.x_r / (self.x_m + self.x_r)
    }

    pub fn x_open(&self) -> f64 {
        self.x_s + self.x_m
    }

    /// Open-circuit transient time constant.
    pub fn t0(&self, omega0: f64) -> f64 {
        (self.x_r + self.x_m) / (omega0 * self.r_r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LtcTransformer {
    pub from: usize,
    /// Regulated bus.
    pub to: usize,
    pub r_t: f64,
    pub l_t: f64,
    pub n_min: f64,
    pub n_max: f64,
    pub t_ltc: f64,
    pub v_ref: f64,
    pub d_band: f64,
    pub k_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSource {
    pub bus: usize,
    pub e_mag: f64,
    pub r_g: f64,
    pub l_g: f64,
}

/// How the grid source enters the equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    /// `l_g > 0`: current is a dynamic state.
    Dynamic,
    /// `l_g = 0`, `r_g > 0`: current is algebraic.
    Resistive,
    /// `l_g = r_g = 0`: the bus voltage is pinned to the EMF.
    Ideal,
}

impl GridSource {
    pub fn kind(&self) -> SourceKind {
        if self.l_g > 0.0 {
            SourceKind::Dynamic
        } else if self.r_g > 0.0 {
            SourceKind::Resistive
        } else {
            SourceKind::Ideal
        }
    }
}

/// Identifiers of every element, shared between clones of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Names {
    pub buses: Vec<String>,
    pub branches: Vec<String>,
    pub loads: Vec<String>,
    pub machines: Vec<String>,
    pub ltcs: Vec<String>,
    pub gfl: Vec<String>,
    pub gfm: Vec<String>,
}

fn find(list: &[String], id: &str, kind: &'static str) -> Result<usize, ModelError> {
    list.iter().position(|s| s == id).ok_or_else(|| ModelError::UnknownId { kind, id: id.to_string() })
}

impl Names {
    pub fn bus(&self, id: &str) -> Result<usize, ModelError> {
        find(&self.buses, id, "bus")
    }
    pub fn branch(&self, id: &str) -> Result<usize, ModelError> {
        find(&self.branches, id, "branch")
    }
    pub fn load(&self, id: &str) -> Result<usize, ModelError> {
        find(&self.loads, id, "load")
    }
    pub fn machine(&self, id: &str) -> Result<usize, ModelError> {
        find(&self.machines, id, "induction machine")
    }
    pub fn ltc(&self, id: &str) -> Result<usize, ModelError> {
        find(&self.ltcs, id, "ltc")
    }
    pub fn gfl(&self, id: &str) -> Result<usize, ModelError> {
        find(&self.gfl, id, "gfl converter")
    }
    pub fn gfm(&self, id: &str) -> Result<usize, ModelError> {
        find(&self.gfm, id, "gfm converter")
    }
}

/// The complete electrical model. Numeric parts are plain values so that
/// cloning one to apply a parameter is cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub omega0: f64,
    /// Grid-frequency offset (rad/s); the dq frame spins at `omega0 + dw`.
    pub dw: f64,
    /// Loading factor multiplying every load.
    pub lambda: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<RlBranch>,
    pub loads: Vec<ZipLoad>,
    pub machines: Vec<InductionMachine>,
    pub ltcs: Vec<LtcTransformer>,
    pub grid: GridSource,
    pub gfl: Vec<GflParams>,
    pub gfm: Vec<GfmDroopParams>,
    pub names: Arc<Names>,
}

impl NetworkModel {
    pub fn omega_frame(&self) -> f64 {
        self.omega0 + self.dw
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    /// Checks parameter invariants and connectivity.
    pub fn validate(&self) -> Result<(), ModelError> {
        let nb = self.buses.len();
        let n = &self.names;
        if nb == 0 {
            return Err(invalid("network", "no buses"));
        }
        if !(self.omega0 > 0.0) {
            return Err(invalid("base frequency", "must be positive"));
        }
        if !(self.lambda > 0.0) {
            return Err(invalid("loading factor", format!("{} must be > 0", self.lambda)));
        }
        for (i, b) in self.buses.iter().enumerate() {
            if !(b.c_sh > 0.0) {
                return Err(invalid(format!("bus {}", n.buses[i]), "shunt capacitance must be > 0"));
            }
        }
        let bus_ok = |i: usize| i < nb;
        for (i, br) in self.branches.iter().enumerate() {
            let id = &n.branches[i];
            if !bus_ok(br.from) || !bus_ok(br.to) {
                return Err(invalid(format!("branch {id}"), "bus index out of range"));
            }
            if br.from == br.to {
                return Err(invalid(format!("branch {id}"), "from and to buses coincide"));
            }
            if !(br.l > 0.0) || br.r < 0.0 {
                return Err(invalid(format!("branch {id}"), "requires l > 0 and r >= 0"));
            }
        }
        for (i, ld) in self.loads.iter().enumerate() {
            let id = &n.loads[i];
            for (name, f) in [("a", ld.a), ("b", ld.b)] {
                if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(invalid(format!("load {id}"), format!("{name} fractions must lie in [0,1] and sum to 1")));
                }
            }
            if !(ld.v0 > 0.0) || !(ld.t_load > 0.0) || !bus_ok(ld.bus) {
                return Err(invalid(format!("load {id}"), "requires v0 > 0, t_load > 0 and a valid bus"));
            }
        }
        for (i, m) in self.machines.iter().enumerate() {
            let id = &n.machines[i];
            if !(m.h > 0.0) || !(m.t0(self.omega0) > 0.0) || !(m.x_transient() > 0.0) || !bus_ok(m.bus) || m.r_s < 0.0 {
                return Err(invalid(format!("induction machine {id}"), "requires h > 0, t0' > 0, x' > 0"));
            }
        }
        for (i, t) in self.ltcs.iter().enumerate() {
            let id = &n.ltcs[i];
            if !(t.n_min < t.n_max) || !(t.t_ltc > 0.0) || !(t.l_t > 0.0) || !(t.k_s > 0.0) || t.d_band < 0.0 {
                return Err(invalid(format!("ltc {id}"), "requires n_min < n_max, t_ltc > 0, l_t > 0, k_s > 0"));
            }
            if !bus_ok(t.from) || !bus_ok(t.to) || t.from == t.to {
                return Err(invalid(format!("ltc {id}"), "invalid buses"));
            }
        }
        if !(self.grid.e_mag > 0.0) || self.grid.l_g < 0.0 || self.grid.r_g < 0.0 || !bus_ok(self.grid.bus) {
            return Err(invalid("grid source", "requires e_mag > 0, l_g >= 0, r_g >= 0"));
        }
        for (i, c) in self.gfl.iter().enumerate() {
            c.validate(&n.gfl[i])?;
            if !bus_ok(c.bus) {
                return Err(invalid(format!("gfl converter {}", n.gfl[i]), "invalid bus"));
            }
        }
        for (i, c) in self.gfm.iter().enumerate() {
            c.validate(&n.gfm[i])?;
            if !bus_ok(c.bus) {
                return Err(invalid(format!("gfm converter {}", n.gfm[i]), "invalid bus"));
            }
        }
        self.check_connected()
    }

    fn check_connected(&self) -> Result<(), ModelError> {
        let nb = self.buses.len();
        let mut adj = vec![Vec::new(); nb];
        for br in &self.branches {
            adj[br.from].push(br.to);
            adj[br.to].push(br.from);
        }
        for t in &self.ltcs {
            adj[t.from].push(t.to);
            adj[t.to].push(t.from);
        }
        let mut seen = vec![false; nb];
        let mut stack = vec![self.grid.bus];
        seen[self.grid.bus] = true;
        while let Some(b) = stack.pop() {
            for &o in &adj[b] {
                if !seen[o] {
                    seen[o] = true;
                    stack.push(o);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(ModelError::Disconnected(self.names.buses[i].clone())),
            None => Ok(()),
        }
    }
}

/// `J·z` for the coupling matrix `[[0, 1], [-1, 0]]` acting on `(d, q)`,
/// i.e. multiplication by `-j`.
pub fn rot_j(z: Complex64) -> Complex64 {
    Complex64::new(z.im, -z.re)
}
