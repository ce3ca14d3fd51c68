use num_complex::Complex64;

use super::InductionMachine;

/// Slip and transient EMF of a third-order induction machine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImState {
    pub slip: f64,
    pub e: Complex64,
}

/// Mass-form right-hand sides: `2h·ds/dt = slip`, `t0'·de'/dt = e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImResidual {
    pub slip: f64,
    pub e: Complex64,
    /// Stator current drawn from the bus.
    pub current: Complex64,
    pub torque: f64,
}

/// Stator current `(v - e')/(r_s + j·x')` drawn from the bus.
pub fn im_current(m: &InductionMachine, e: Complex64, v: Complex64) -> Complex64 {
    (v - e) / Complex64::new(m.r_s, m.x_transient())
}

/// Third-order model with stator transients neglected. `omega_frame` is the
/// synchronous speed the slip is measured against; `torque_scale` multiplies
/// the mechanical load (the loading factor).
pub fn im_residual(
    m: &InductionMachine,
    st: &ImState,
    v: Complex64,
    omega0: f64,
    omega_frame: f64,
    torque_scale: f64,
) -> ImResidual {
    let i = im_current(m, st.e, v);
    let t_e = (st.e * i.conj()).re;
    let t0 = m.t0(omega0);
    let j = Complex64::i();
    let de = -st.e + j * (m.x_open() - m.x_transient()) * i - j * omega_frame * st.slip * t0 * st.e;
    ImResidual { slip: torque_scale * m.t_mech - t_e, e: de, current: i, torque: t_e }
}
