use num_complex::Complex64;

use super::{ModelError, ZipLoad, V_FLOOR};

fn poly(f: &[f64; 3], r: f64) -> f64 {
    f[0] * r * r + f[1] * r + f[2]
}

/// Consumed `(P, Q)` at voltage magnitude `v`.
pub fn zip_powers(load: &ZipLoad, v: f64, lambda: f64) -> (f64, f64) {
    let r = v / load.v0;
    (lambda * load.p0 * poly(&load.a, r), lambda * load.q0 * poly(&load.b, r))
}

/// Consumed current (flowing out of the bus) for a bus voltage phasor.
pub fn zip_injection(load: &ZipLoad, v: Complex64, lambda: f64, bus: &str) -> Result<Complex64, ModelError> {
    let m = v.norm();
    if m <= V_FLOOR {
        return Err(ModelError::DegenerateVoltage { bus: bus.to_string(), magnitude: m });
    }
    let (p, q) = zip_powers(load, m, lambda);
    Ok((Complex64::new(p, q) / v).conj())
}

/// Admittance `G + jB` that consumes exactly the ZIP powers at `v`.
/// Below `V_FLOOR` the powers are evaluated at the floor, which freezes the
/// constant-power current along the present angle.
pub fn zip_admittance_target(load: &ZipLoad, v: f64, lambda: f64) -> Complex64 {
    let vm = v.max(V_FLOOR);
    let (p, q) = zip_powers(load, vm, lambda);
    // |i| = |S|/V_FLOOR once v drops below the floor
    Complex64::new(p, q) / (vm * v.max(f64::MIN_POSITIVE))
}
