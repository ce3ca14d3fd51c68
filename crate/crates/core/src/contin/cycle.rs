use std::f64::consts::PI;

use super::{spectrum_of, BifurcationRecord, ContinError, Continuable};
use crate::engine::{integrate, jacobian_fd, EngineError, IntegrateOptions, OMEGA_MIN};

/// Below this the oscillation counts as decayed.
const AMPLITUDE_FLOOR: f64 = 1e-6;
const KICK: f64 = 1e-3;

/// Amplitude (half peak-to-peak) of the observable after the transient,
/// simulated from a slightly perturbed equilibrium at `p_probe`.
///
/// The horizon covers at least 20 periods of the Hopf pair and long enough
/// for a perturbation of `1e-3` to grow or decay by `e^5` beyond its own
/// size at the current real part; only the second half is measured.
pub fn limit_cycle_amplitude<S: Continuable>(
    sys: &S,
    hb: &BifurcationRecord,
    p_probe: &[f64],
    observable: usize,
) -> Result<f64, ContinError> {
    let n = sys.dim();
    if observable >= n {
        return Err(ContinError::Invalid(format!("observable index {observable} outside a {n}-state system")));
    }
    let eq = sys.equilibrium(Some(&hb.x), p_probe)?;
    let jac = jacobian_fd(sys, &eq.x, p_probe)?;
    let mass = sys.mass(p_probe);
    let (spectrum, _) = spectrum_of(&jac, &mass)?;
    let reference = hb.eigenvalues.first().copied().unwrap_or_default();
    let pair = spectrum
        .as_ref()
        .and_then(|s| {
            s.eigenvalues
                .iter()
                .filter(|z| z.im > OMEGA_MIN)
                .min_by(|a, b| (a.im - reference.im).abs().total_cmp(&(b.im - reference.im).abs()))
                .copied()
        })
        .ok_or(EngineError::Eigen)?;
    let period = 2.0 * PI / pair.im;
    let sigma = pair.re.abs().max(1e-12);
    let horizon = (20.0 * period).max(2.0 * ((1.0 / KICK).ln() + 5.0) / sigma).min(5000.0 * period);
    let h = period / 200.0;
    let mut x0 = eq.x.clone();
    let mut sign = 1.0;
    for (i, v) in x0.iter_mut().enumerate() {
        if mass[i] > 0.0 {
            *v += sign * KICK * v.abs().max(1.0);
            sign = -sign;
        }
    }
    let traj = integrate(sys, &x0, p_probe, &IntegrateOptions::new(horizon, h))?;
    let half = traj.len() / 2;
    let (lo, hi) = traj.x[half..]
        .iter()
        .map(|r| r[observable])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let amp = 0.5 * (hi - lo);
    Ok(if amp < AMPLITUDE_FLOOR { 0.0 } else { amp })
}
