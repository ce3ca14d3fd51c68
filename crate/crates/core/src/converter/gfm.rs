use num_complex::Complex64;

use super::{GfmDroopParams, GfmState};

/// Mass-form residuals of the droop-controlled grid-forming unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GfmResidual {
    pub theta: f64,
    /// `tau_p·dP_f/dt`.
    pub p_f: f64,
    /// `tau_q·dQ_f/dt`.
    pub q_f: f64,
    /// `l_v·di/dt` of the virtual output impedance.
    pub i: Complex64,
    pub injection: Complex64,
    /// Internal EMF magnitude from the Q/V law.
    pub e: f64,
    pub omega: f64,
}

/// `dθ/dt = ω0 - m_p·(P_f - p_set) - ω_frame`, `E = v_set - n_q·(Q_f - q_set)`,
/// and a voltage source `E∠θ` behind `r_v + j·ω·l_v`.
pub fn gfm_droop_residual(p: &GfmDroopParams, s: &GfmState, v_bus: Complex64, omega0: f64, omega_frame: f64) -> GfmResidual {
    let omega = omega0 - p.m_p * (s.p_f - p.p_set);
    let e = p.v_set - p.n_q * (s.q_f - p.q_set);
    let v_int = Complex64::from_polar(e, s.theta);
    let z = Complex64::new(p.r_v, omega_frame * p.l_v);
    let i_rate = v_int - v_bus - z * s.i;
    let pq = v_bus * s.i.conj();
    GfmResidual { theta: omega - omega_frame, p_f: pq.re - s.p_f, q_f: pq.im - s.q_f, i: i_rate, injection: s.i, e, omega }
}

#[cfg(test)]
mod tests {
    use super::*;

    const W0: f64 = 100.0 * std::f64::consts::PI;

    fn params() -> GfmDroopParams {
        GfmDroopParams {
            bus: 0,
            m_p: 0.02 * W0,
            n_q: 0.05,
            v_set: 1.0,
            p_set: 0.4,
            q_set: 0.1,
            r_v: 0.01,
            l_v: 0.1 / W0,
            tau_p: 0.02,
            tau_q: 0.02,
        }
    }

    #[test]
    fn droop_equilibrium() {
        let p = params();
        let s = GfmState { p_f: p.p_set, q_f: p.q_set, ..Default::default() };
        let r = gfm_droop_residual(&p, &s, Complex64::new(1.0, 0.0), W0, W0);
        assert_eq!(r.theta, 0.0);
        assert_eq!(r.e, p.v_set);
    }

    #[test]
    fn frequency_identity() {
        let p = params();
        let s = GfmState { p_f: 0.7, ..Default::default() };
        let r = gfm_droop_residual(&p, &s, Complex64::new(1.0, 0.0), W0, W0);
        assert!((r.omega - W0 + p.m_p * (s.p_f - p.p_set)).abs() < 1e-12);
    }
}
