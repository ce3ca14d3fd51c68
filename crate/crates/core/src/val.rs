//! Virtual admittance loop for grid-following converters.
//!
//! The loop emulates an admittance `y = g_v + j·b_v` between a virtual source
//! `v_nom∠θ_pll` and the converter terminal, and adds the resulting current to
//! the converter reference ahead of the current limiter. The deviation is
//! measured in the PLL frame as `Δv = v_nom - v_pll`, so an undervoltage gives
//! a positive deviation and a positive conductance raises the injection.
//!
//! Two realisations are offered: a dynamic one (DVAL) that integrates a series
//! RL branch with the same fundamental-frequency impedance `1/y`, and a
//! quasi-stationary one (QVAL) that evaluates `y·Δv` algebraically.

use num_complex::Complex64;

use crate::netmodel::{invalid, rot_j, ModelError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValGains {
    pub g_v: f64,
    pub b_v: f64,
    pub v_nom: f64,
    pub g_min: f64,
    pub g_max: f64,
    pub b_min: f64,
    pub b_max: f64,
}

impl ValGains {
    pub fn admittance(&self) -> Complex64 {
        Complex64::new(self.g_v, self.b_v)
    }

    pub fn validate(&self, who: &str) -> Result<(), ModelError> {
        let finite = [self.g_min, self.g_max, self.b_min, self.b_max].iter().all(|x| x.is_finite());
        if !finite || self.g_min > self.g_max || self.b_min > self.b_max {
            return Err(invalid(format!("virtual admittance of {who}"), "gain box must be finite and non-empty"));
        }
        if !(self.g_min..=self.g_max).contains(&self.g_v) || !(self.b_min..=self.b_max).contains(&self.b_v) {
            return Err(invalid(format!("virtual admittance of {who}"), "gains outside their box"));
        }
        Ok(())
    }
}

/// Whether and how a converter runs its virtual admittance loop.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ValMode {
    #[default]
    Off,
    Dynamic(ValGains),
    Quasi(ValGains),
}

impl ValMode {
    pub fn gains(&self) -> Option<&ValGains> {
        match self {
            ValMode::Off => None,
            ValMode::Dynamic(g) | ValMode::Quasi(g) => Some(g),
        }
    }

    pub fn gains_mut(&mut self) -> Option<&mut ValGains> {
        match self {
            ValMode::Off => None,
            ValMode::Dynamic(g) | ValMode::Quasi(g) => Some(g),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DvalState {
    pub i_v: Complex64,
}

/// Series realisation `(r_eq, l_eq, σ)` of `1/y` at `omega0`; `σ = -1` for a
/// capacitive branch, which flips the sign of the rotation coupling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DvalRealization {
    pub r_eq: f64,
    pub l_eq: f64,
    pub sign: f64,
}

pub fn dval_realization(g: &ValGains, omega0: f64) -> Result<DvalRealization, ModelError> {
    let y = g.admittance();
    if y.norm() == 0.0 {
        return Err(invalid(
            "dynamic virtual admittance",
            "zero admittance has no series realisation; use the quasi-stationary loop",
        ));
    }
    let z = y.inv();
    Ok(DvalRealization { r_eq: z.re, l_eq: z.im.abs() / omega0, sign: if z.im < 0.0 { -1.0 } else { 1.0 } })
}

pub fn val_deviation(g: &ValGains, v_pll: Complex64) -> Complex64 {
    Complex64::new(g.v_nom, 0.0) - v_pll
}

/// Mass-form residual of the virtual branch plus the current correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DvalResidual {
    /// `l_eq·di_v/dt`.
    pub rate: Complex64,
    pub correction: Complex64,
}

/// `l_eq·di_v/dt = Δv - r_eq·i_v + σ·ω0·l_eq·J·i_v`.
pub fn dval_residual(g: &ValGains, s: &DvalState, v_pll: Complex64, omega0: f64) -> Result<DvalResidual, ModelError> {
    let re = dval_realization(g, omega0)?;
    let dv = val_deviation(g, v_pll);
    let rate = dv - re.r_eq * s.i_v + re.sign * omega0 * re.l_eq * rot_j(s.i_v);
    Ok(DvalResidual { rate, correction: s.i_v })
}

/// Quasi-stationary correction `y·Δv`.
pub fn qval_reference(g: &ValGains, v_pll: Complex64) -> Complex64 {
    g.admittance() * val_deviation(g, v_pll)
}

#[cfg(test)]
mod tests {
    use super::*;

    const W0: f64 = 100.0 * std::f64::consts::PI;

    fn gains(g: f64, b: f64) -> ValGains {
        ValGains { g_v: g, b_v: b, v_nom: 1.0, g_min: -5.0, g_max: 5.0, b_min: -5.0, b_max: 5.0 }
    }

    /// Steady DVAL state: solve the 2x2 real system `rate(i_v) = 0`.
    fn dval_steady(g: &ValGains, v: Complex64) -> Complex64 {
        let f = |i: Complex64| dval_residual(g, &DvalState { i_v: i }, v, W0).unwrap().rate;
        let f0 = f(Complex64::default());
        let fx = f(Complex64::new(1.0, 0.0)) - f0;
        let fy = f(Complex64::new(0.0, 1.0)) - f0;
        let det = fx.re * fy.im - fy.re * fx.im;
        let a = (-f0.re * fy.im + fy.re * f0.im) / det;
        let b = (-fx.re * f0.im + f0.re * fx.im) / det;
        Complex64::new(a, b)
    }

    #[test]
    fn no_deviation_no_correction() {
        let g = gains(0.3, -0.4);
        let v = Complex64::new(1.0, 0.0);
        assert_eq!(qval_reference(&g, v), Complex64::default());
        assert!(dval_steady(&g, v).norm() < 1e-15);
    }

    #[test]
    fn resistive_statics() {
        let g = gains(0.5, 0.0);
        let v = Complex64::new(0.9, 0.0);
        let i = dval_steady(&g, v);
        assert!((i - Complex64::new(0.05, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn dval_and_qval_statics_coincide() {
        let g = gains(0.3, -0.4);
        let v = Complex64::new(0.9, 0.0);
        let i = dval_steady(&g, v);
        assert!((i - Complex64::new(0.03, -0.04)).norm() < 1e-12);
        assert!((i.norm() - 0.05).abs() < 1e-12);
        assert!((qval_reference(&g, v) - i).norm() < 1e-12);
        // capacitive branch as well
        let g = gains(0.2, 0.7);
        let v = Complex64::new(0.95, 0.03);
        assert!((qval_reference(&g, v) - dval_steady(&g, v)).norm() < 1e-12);
    }

    #[test]
    fn susceptance_rotates_by_ninety_degrees() {
        let g = gains(0.0, 0.2);
        // Δv = j·0.05
        let v = Complex64::new(1.0, -0.05);
        let i = qval_reference(&g, v);
        assert!((i - Complex64::new(-0.01, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn zero_admittance_dynamic_is_rejected() {
        let g = gains(0.0, 0.0);
        assert!(dval_residual(&g, &DvalState::default(), Complex64::new(1.0, 0.0), W0).is_err());
    }

    #[test]
    fn box_violation_detected() {
        let mut g = gains(0.3, 0.0);
        g.g_max = 0.2;
        assert!(g.validate("C1").is_err());
    }
}
