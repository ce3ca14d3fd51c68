//! Converter models: a grid-following unit (SRF-PLL, dq PI current control,
//! Volt/VAR droop, virtual admittance, smooth current limit) behind an L
//! filter, and a minimal P/f–Q/V droop grid-forming unit.

mod gfl;
mod gfm;

use num_complex::Complex64;

use crate::netmodel::{invalid, ModelError};
use crate::smoothlim::SmoothLimiter;
use crate::val::ValMode;

pub use gfl::{current_reference, gfl_residual, pll_jacobian, pll_residual, GflResidual, PllResidual, ReferenceParts};
pub use gfm::{gfm_droop_residual, GfmResidual};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GflParams {
    pub bus: usize,
    /// Filter inductance (pu·s).
    pub l_f: f64,
    pub r_f: f64,
    pub kp_cc: f64,
    pub ki_cc: f64,
    pub kp_pll: f64,
    pub ki_pll: f64,
    pub p_ref: f64,
    pub kq: f64,
    pub v_ref: f64,
    pub q0: f64,
    pub limiter: SmoothLimiter,
    pub k_aw: f64,
    pub val: ValMode,
}

impl GflParams {
    pub fn i_max(&self) -> f64 {
        self.limiter.limit()
    }

    pub fn validate(&self, id: &str) -> Result<(), ModelError> {
        let gains = [self.kp_cc, self.ki_cc, self.kp_pll, self.ki_pll, self.k_aw];
        if !(self.l_f > 0.0) || self.r_f < 0.0 || gains.iter().any(|g| !(*g >= 0.0)) {
            return Err(invalid(format!("gfl converter {id}"), "requires l_f > 0, r_f >= 0 and non-negative gains"));
        }
        if let Some(g) = self.val.gains() {
            g.validate(id)?;
        }
        Ok(())
    }
}

/// Dynamic states of a grid-following converter. Currents are in the PLL
/// frame; `theta` is kept unwrapped.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GflState {
    pub theta: f64,
    pub eps: f64,
    pub i: Complex64,
    pub xi: Complex64,
    /// Virtual-branch current; only meaningful with a dynamic VAL.
    pub i_v: Complex64,
}

impl GflState {
    /// Angle wrapped to `(-π, π]` for reporting.
    pub fn theta_wrapped(&self) -> f64 {
        let w = self.theta.rem_euclid(2.0 * std::f64::consts::PI);
        if w > std::f64::consts::PI {
            w - 2.0 * std::f64::consts::PI
        } else {
            w
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GfmDroopParams {
    pub bus: usize,
    /// P/f droop slope (rad/s per pu).
    pub m_p: f64,
    /// Q/V droop slope (pu/pu).
    pub n_q: f64,
    pub v_set: f64,
    pub p_set: f64,
    pub q_set: f64,
    pub r_v: f64,
    pub l_v: f64,
    pub tau_p: f64,
    pub tau_q: f64,
}

impl GfmDroopParams {
    pub fn validate(&self, id: &str) -> Result<(), ModelError> {
        if !(self.m_p > 0.0) || self.n_q < 0.0 || !(self.l_v > 0.0) || !(self.tau_p > 0.0) || !(self.tau_q > 0.0) {
            return Err(invalid(
                format!("gfm converter {id}"),
                "requires m_p > 0, n_q >= 0, l_v > 0 and positive filter constants",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GfmState {
    pub theta: f64,
    pub p_f: f64,
    pub q_f: f64,
    pub i: Complex64,
}
