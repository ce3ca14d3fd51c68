use num_complex::Complex64;

use super::{GflParams, GflState};
use crate::netmodel::{ModelError, V_FLOOR};
use crate::smoothlim::antiwindup_residual;
use crate::val::{dval_residual, qval_reference, DvalState, ValMode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PllResidual {
    pub theta_rate: f64,
    pub eps_rate: f64,
    pub omega_pll: f64,
    /// Quadrature voltage seen by the PLL.
    pub v_q: f64,
    /// Bus voltage expressed in the PLL frame.
    pub v_pll: Complex64,
}

/// SRF-PLL: `ω_pll = ω0 + kp·v_q + ε`, `dε/dt = ki·v_q`, `dθ/dt = ω_pll - ω_frame`.
pub fn pll_residual(p: &GflParams, s: &GflState, v_bus: Complex64, omega0: f64, omega_frame: f64) -> PllResidual {
    let v_pll = v_bus * Complex64::from_polar(1.0, -s.theta);
    let v_q = v_pll.im;
    let omega_pll = omega0 + p.kp_pll * v_q + s.eps;
    PllResidual { theta_rate: omega_pll - omega_frame, eps_rate: p.ki_pll * v_q, omega_pll, v_q, v_pll }
}

/// Partials of `(dθ/dt, dε/dt)` with respect to `(θ, ε, v_d, v_q)`.
pub fn pll_jacobian(p: &GflParams, s: &GflState, v_bus: Complex64) -> [[f64; 4]; 2] {
    let (sn, cs) = s.theta.sin_cos();
    // v_q^pll = -v_d·sinθ + v_q·cosθ
    let dvq = [-v_bus.re * cs - v_bus.im * sn, 0.0, -sn, cs];
    let theta_row = [p.kp_pll * dvq[0], 1.0, p.kp_pll * dvq[2], p.kp_pll * dvq[3]];
    let eps_row = [p.ki_pll * dvq[0], 0.0, p.ki_pll * dvq[2], p.ki_pll * dvq[3]];
    [theta_row, eps_row]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceParts {
    pub q_ref: f64,
    /// Power-derived reference plus VAL correction, before limiting.
    pub raw: Complex64,
    pub limited: Complex64,
}

fn reference_parts(p: &GflParams, v_pll: Complex64, correction: Complex64) -> ReferenceParts {
    let m = v_pll.norm();
    let q_ref = p.q0 + p.kq * (p.v_ref - m);
    let v_g = if m > V_FLOOR {
        v_pll
    } else if m > 0.0 {
        v_pll * (V_FLOOR / m)
    } else {
        Complex64::new(V_FLOOR, 0.0)
    };
    let raw = (Complex64::new(p.p_ref, q_ref) / v_g).conj() + correction;
    ReferenceParts { q_ref, raw, limited: p.limiter.sat_vector(raw) }
}

/// Limited current reference in the PLL frame for a terminal voltage `v_pll`
/// and a VAL correction.
pub fn current_reference(p: &GflParams, v_pll: Complex64, correction: Complex64) -> Result<ReferenceParts, ModelError> {
    let m = v_pll.norm();
    if m <= V_FLOOR {
        return Err(ModelError::DegenerateVoltage { bus: format!("#{}", p.bus), magnitude: m });
    }
    Ok(reference_parts(p, v_pll, correction))
}

/// Mass-form residuals of every converter state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GflResidual {
    pub theta: f64,
    pub eps: f64,
    /// `l_f·di/dt`.
    pub i: Complex64,
    pub xi: Complex64,
    /// `l_eq·di_v/dt`, zero unless the VAL is dynamic.
    pub i_v: Complex64,
    /// Current injected into the bus, network frame.
    pub injection: Complex64,
    /// Modulation voltage in the PLL frame.
    pub v_mod: Complex64,
    pub omega_pll: f64,
    pub v_q: f64,
    pub reference: ReferenceParts,
}

pub fn gfl_residual(
    p: &GflParams,
    s: &GflState,
    v_bus: Complex64,
    omega0: f64,
    omega_frame: f64,
) -> Result<GflResidual, ModelError> {
    let pll = pll_residual(p, s, v_bus, omega0, omega_frame);
    let v = pll.v_pll;
    let (correction, i_v) = match &p.val {
        ValMode::Off => (Complex64::default(), Complex64::default()),
        ValMode::Quasi(g) => (qval_reference(g, v), Complex64::default()),
        ValMode::Dynamic(g) => {
            let d = dval_residual(g, &DvalState { i_v: s.i_v }, v, omega0)?;
            (d.correction, d.rate)
        }
    };
    let reference = reference_parts(p, v, correction);
    let err = reference.limited - s.i;
    let u = p.kp_cc * err + s.xi;
    let jw_l = Complex64::new(0.0, pll.omega_pll * p.l_f);
    let v_mod = v + u + jw_l * s.i;
    let i_rate = v_mod - v - p.r_f * s.i - jw_l * s.i;
    let xi = Complex64::new(
        antiwindup_residual(p.ki_cc * err.re, reference.raw.re, reference.limited.re, p.k_aw),
        antiwindup_residual(p.ki_cc * err.im, reference.raw.im, reference.limited.im, p.k_aw),
    );
    Ok(GflResidual {
        theta: pll.theta_rate,
        eps: pll.eps_rate,
        i: i_rate,
        xi,
        i_v,
        injection: s.i * Complex64::from_polar(1.0, s.theta),
        v_mod,
        omega_pll: pll.omega_pll,
        v_q: pll.v_q,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothlim::SmoothLimiter;

    const W0: f64 = 100.0 * std::f64::consts::PI;

    pub(crate) fn params() -> GflParams {
        let l_f = 0.1 / W0;
        GflParams {
            bus: 0,
            l_f,
            r_f: 0.005,
            kp_cc: l_f * 1000.0,
            ki_cc: 0.005 * 1000.0,
            kp_pll: 40.0,
            ki_pll: 800.0,
            p_ref: 0.5,
            kq: 0.0,
            v_ref: 1.0,
            q0: 0.0,
            limiter: SmoothLimiter::new(1.2, 10.0).unwrap(),
            k_aw: 1.0,
            val: ValMode::Off,
        }
    }

    #[test]
    fn aligned_voltage_is_locked() {
        let p = params();
        let s = GflState { theta: 0.3, eps: 0.0, ..Default::default() };
        let r = pll_residual(&p, &s, Complex64::from_polar(0.97, 0.3), W0, W0);
        assert!(r.v_q.abs() < 1e-15);
        assert!(r.theta_rate.abs() < 1e-12);
        let s = GflState { eps: 0.7, ..s };
        let r = pll_residual(&p, &s, Complex64::from_polar(0.97, 0.3), W0, W0);
        assert!((r.theta_rate - 0.7).abs() < 1e-12);
    }

    #[test]
    fn rotated_voltage_projects_on_q() {
        let p = params();
        let r = pll_residual(&p, &GflState::default(), Complex64::from_polar(1.0, 0.1), W0, W0);
        assert!((r.v_q - 0.1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn droop_null_gives_active_current() {
        let p = params();
        let r = current_reference(&p, Complex64::new(1.0, 0.0), Complex64::default()).unwrap();
        assert_eq!(r.q_ref, 0.0);
        assert!((r.limited - Complex64::new(0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn droop_slope() {
        let p = GflParams { kq: 2.0, ..params() };
        let r = current_reference(&p, Complex64::new(0.95, 0.0), Complex64::default()).unwrap();
        assert!((r.q_ref - 0.1).abs() < 1e-12);
        // positive Q injection means a negative q-axis current
        assert!(r.limited.im < 0.0);
    }

    #[test]
    fn limiter_binds_on_large_reference() {
        let p = GflParams { p_ref: 3.0 * 1.2, ..params() };
        let r = current_reference(&p, Complex64::new(1.0, 0.0), Complex64::default()).unwrap();
        assert!((r.raw.norm() - 3.6).abs() < 1e-12);
        assert!(r.limited.norm() >= 0.9999 * 1.2 && r.limited.norm() <= 1.2);
    }

    #[test]
    fn degenerate_voltage_errors() {
        assert!(current_reference(&params(), Complex64::new(0.001, 0.0), Complex64::default()).is_err());
    }

    #[test]
    fn tracking_equilibrium() {
        let p = params();
        let v = Complex64::new(0.98, 0.0);
        let i_ref = current_reference(&p, v, Complex64::default()).unwrap().limited;
        let s = GflState { theta: 0.0, eps: 0.0, i: i_ref, xi: p.r_f * i_ref, i_v: Complex64::default() };
        let r = gfl_residual(&p, &s, v, W0, W0).unwrap();
        for x in [r.theta, r.eps, r.i.re, r.i.im, r.xi.re, r.xi.im] {
            assert!(x.abs() < 1e-14, "{r:?}");
        }
        let expect = v + p.r_f * i_ref + Complex64::new(0.0, W0 * p.l_f) * i_ref;
        assert!((r.v_mod - expect).norm() < 1e-14);
    }

    #[test]
    fn zero_gains_leave_a_passive_filter() {
        let p = GflParams { kp_cc: 0.0, ki_cc: 0.0, ..params() };
        let s = GflState { i: Complex64::new(0.2, -0.1), ..Default::default() };
        let r = gfl_residual(&p, &s, Complex64::new(1.0, 0.0), W0, W0).unwrap();
        assert!((r.i + p.r_f * s.i).norm() < 1e-15);
    }

    #[test]
    fn pll_jacobian_matches_differences() {
        let p = params();
        let s = GflState { theta: 0.2, eps: 0.3, ..Default::default() };
        let v = Complex64::new(0.95, 0.12);
        let an = pll_jacobian(&p, &s, v);
        let f = |th: f64, ep: f64, vd: f64, vq: f64| {
            let r = pll_residual(&p, &GflState { theta: th, eps: ep, ..s }, Complex64::new(vd, vq), W0, W0);
            [r.theta_rate, r.eps_rate]
        };
        let x = [s.theta, s.eps, v.re, v.im];
        for c in 0..4 {
            let h = 1e-6;
            let (mut a, mut b) = (x, x);
            a[c] += h;
            b[c] -= h;
            let (fa, fb) = (f(a[0], a[1], a[2], a[3]), f(b[0], b[1], b[2], b[3]));
            for r in 0..2 {
                let fd = (fa[r] - fb[r]) / (2.0 * h);
                assert!((fd - an[r][c]).abs() <= 1e-6 * an[r][c].abs().max(1.0), "{r},{c}");
            }
        }
    }
}
