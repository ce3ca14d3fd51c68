//! Complex frequency `η = ρ + jω` of sampled phasors, the PLL's internal
//! frequency, and a split of a converter's internal-voltage frequency into a
//! synchronization part and a regulation part.
//!
//! With `v = V·e^{jφ}` in a frame spinning at `ω_f`, `ρ = d(ln V)/dt` and
//! `ω = ω_f + dφ/dt`. Derivatives use three-point Lagrange differences
//! (exact for quadratics, second order on any grid), so the operator is
//! linear and block contributions add up to the total to rounding.

use num_complex::Complex64;
use thiserror::Error;

use crate::engine::{EngineError, Trajectory};
use crate::netmodel::V_FLOOR;
use crate::report::{fmt_f64, Csv};
use crate::system::GridSystem;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CfError {
    #[error("voltage magnitude {magnitude:.3e} at t = {time:.6} s is below the floor")]
    BelowFloor { time: f64, magnitude: f64 },
    #[error("need at least 3 samples with increasing time stamps")]
    BadSamples,
    #[error("unknown converter '{0}'")]
    UnknownConverter(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfSeries {
    pub t: Vec<f64>,
    /// Instantaneous bandwidth (1/s).
    pub rho: Vec<f64>,
    /// Instantaneous angular frequency (rad/s).
    pub omega: Vec<f64>,
    pub source: String,
}

/// Three-point Lagrange derivative at every sample, one-sided at the ends.
pub fn derivative(t: &[f64], f: &[f64]) -> Vec<f64> {
    let n = t.len();
    let d3 = |i0: usize, at: usize| {
        let (x0, x1, x2) = (t[i0], t[i0 + 1], t[i0 + 2]);
        let x = t[at];
        // the weights sum to zero, so write them against f[i0] to keep
        // constants exact
        let l1 = (2.0 * x - x0 - x2) / ((x1 - x0) * (x1 - x2));
        let l2 = (2.0 * x - x0 - x1) / ((x2 - x0) * (x2 - x1));
        l1 * (f[i0 + 1] - f[i0]) + l2 * (f[i0 + 2] - f[i0])
    };
    (0..n)
        .map(|i| match i {
            0 => d3(0, 0),
            _ if i == n - 1 => d3(n - 3, n - 1),
            _ => d3(i - 1, i),
        })
        .collect()
}

/// Centred moving average; the window shrinks at the ends.
fn smooth(v: &[f64], w: usize) -> Vec<f64> {
    if w <= 1 {
        return v.to_vec();
    }
    let half = w / 2;
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(v.len() - 1);
            v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

fn unwrap(angles: impl Iterator<Item = f64>) -> Vec<f64> {
    let tau = 2.0 * std::f64::consts::PI;
    let mut out: Vec<f64> = Vec::new();
    for a in angles {
        let v = match out.last() {
            Some(&prev) => a + tau * ((prev - a) / tau).round(),
            None => a,
        };
        out.push(v);
    }
    out
}

fn check_samples(t: &[f64]) -> Result<(), CfError> {
    if t.len() < 3 || t.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(CfError::BadSamples);
    }
    Ok(())
}

/// Complex frequency of a sampled phasor in a frame rotating at
/// `omega_frame`, with an optional moving-average window of `smoothing`
/// samples.
pub fn cf_from_trajectory(
    t: &[f64],
    v: &[Complex64],
    omega_frame: f64,
    smoothing: usize,
    source: &str,
) -> Result<CfSeries, CfError> {
    check_samples(t)?;
    if let Some((i, z)) = v.iter().enumerate().find(|(_, z)| !(z.norm() > V_FLOOR)) {
        return Err(CfError::BelowFloor { time: t[i], magnitude: z.norm() });
    }
    let ln_v: Vec<f64> = v.iter().map(|z| z.norm().ln()).collect();
    let phi = unwrap(v.iter().map(|z| z.arg()));
    Ok(from_parts(t, &ln_v, &phi, omega_frame, smoothing, source))
}

fn from_parts(t: &[f64], ln_v: &[f64], phi: &[f64], omega_frame: f64, smoothing: usize, source: &str) -> CfSeries {
    let rho = smooth(&derivative(t, ln_v), smoothing);
    let omega = smooth(&derivative(t, phi), smoothing).into_iter().map(|w| omega_frame + w).collect();
    CfSeries { t: t.to_vec(), rho, omega, source: source.to_string() }
}

/// `ω̂ = ω0 + kp·v_q + ε` of grid-following converter `k`, sample by sample.
pub fn pll_internal_frequency(sys: &GridSystem, traj: &Trajectory, p: &[f64], k: usize) -> Result<Vec<f64>, CfError> {
    traj.x.iter().map(|x| Ok(sys.gfl_outputs(x, p, k)?.omega_pll)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfDecomposition {
    pub total: CfSeries,
    /// Synchronization block, then regulation block.
    pub blocks: Vec<CfSeries>,
}

impl CfDecomposition {
    /// Largest pointwise gap between the block sum and the total.
    pub fn additivity_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.total.t.len() {
            let rho: f64 = self.blocks.iter().map(|b| b.rho[i]).sum();
            let omega: f64 = self.blocks.iter().map(|b| b.omega[i]).sum();
            worst = worst.max((rho - self.total.rho[i]).abs()).max((omega - self.total.omega[i]).abs());
        }
        worst
    }
}

/// Splits the complex frequency of a converter's internal voltage.
///
/// A grid-following unit's internal voltage is `m·e^{jθ}` with `m` the
/// modulation voltage in the PLL frame: the synchronization block is
/// `j(ω_f + dθ/dt)` and the regulation block is the complex frequency of `m`
/// in its own frame. A droop grid-forming unit has internal voltage `E·e^{jθ}`:
/// synchronization `j(ω_f + dθ/dt)`, regulation `d(ln E)/dt`.
pub fn decompose_converter_cf(
    sys: &GridSystem,
    traj: &Trajectory,
    p: &[f64],
    converter: &str,
    smoothing: usize,
) -> Result<CfDecomposition, CfError> {
    check_samples(&traj.t)?;
    let m = sys.model_at(p).map_err(EngineError::from)?;
    let w_f = m.omega_frame();
    let names = &m.names;
    let (theta, ln_mag, arg): (Vec<f64>, Vec<f64>, Vec<f64>) = if let Some(k) = names.gfl.iter().position(|n| n == converter) {
        let mut theta = Vec::with_capacity(traj.len());
        let mut mods = Vec::with_capacity(traj.len());
        for (i, x) in traj.x.iter().enumerate() {
            let r = sys.gfl_outputs(x, p, k)?;
            if !(r.v_mod.norm() > V_FLOOR) {
                return Err(CfError::BelowFloor { time: traj.t[i], magnitude: r.v_mod.norm() });
            }
            theta.push(sys.gfl_state(x, k).theta);
            mods.push(r.v_mod);
        }
        let ln = mods.iter().map(|z| z.norm().ln()).collect();
        (theta, ln, unwrap(mods.iter().map(|z| z.arg())))
    } else if let Some(k) = names.gfm.iter().position(|n| n == converter) {
        let mut theta = Vec::with_capacity(traj.len());
        let mut ln = Vec::with_capacity(traj.len());
        for (i, x) in traj.x.iter().enumerate() {
            let e = sys.gfm_outputs(x, p, k)?.e;
            if !(e > V_FLOOR) {
                return Err(CfError::BelowFloor { time: traj.t[i], magnitude: e });
            }
            theta.push(sys.gfm_state(x, k).theta);
            ln.push(e.ln());
        }
        let zeros = vec![0.0; theta.len()];
        (theta, ln, zeros)
    } else {
        return Err(CfError::UnknownConverter(converter.to_string()));
    };
    let t = &traj.t;
    let total_phi: Vec<f64> = theta.iter().zip(&arg).map(|(a, b)| a + b).collect();
    let total = from_parts(t, &ln_mag, &total_phi, w_f, smoothing, &format!("{converter}.total"));
    let zeros = vec![0.0; t.len()];
    let sync = from_parts(t, &zeros, &theta, w_f, smoothing, &format!("{converter}.sync"));
    let reg = from_parts(t, &ln_mag, &arg, 0.0, smoothing, &format!("{converter}.regulation"));
    Ok(CfDecomposition { total, blocks: vec![sync, reg] })
}

/// Long-format table `(t, rho, omega, block)` of several series.
pub fn cf_csv(series: &[&CfSeries]) -> Csv {
    let mut csv = Csv::new(&["t", "rho", "omega", "block"]);
    for s in series {
        for i in 0..s.t.len() {
            csv.row(&[fmt_f64(s.t[i]), fmt_f64(s.rho[i]), fmt_f64(s.omega[i]), s.source.clone()]);
        }
    }
    csv
}

#[cfg(test)]
mod tests {
    use super::*;

    const W0: f64 = 100.0 * std::f64::consts::PI;

    fn grid(n: usize, h: f64) -> Vec<f64> {
        (0..n).map(|i| i as f64 * h).collect()
    }

    #[test]
    fn constant_phasor() {
        let t = grid(50, 1e-4);
        let v = vec![Complex64::from_polar(0.97, 0.3); 50];
        let s = cf_from_trajectory(&t, &v, W0, 1, "v").unwrap();
        assert!(s.rho.iter().all(|r| *r == 0.0));
        assert!(s.omega.iter().all(|w| *w == W0));
    }

    #[test]
    fn exponential_magnitude() {
        let sigma = -3.5;
        let t = grid(200, 1e-4);
        let v: Vec<Complex64> = t.iter().map(|t| Complex64::from_polar((sigma * t).exp(), 1.0)).collect();
        let s = cf_from_trajectory(&t, &v, W0, 1, "v").unwrap();
        assert!(s.rho.iter().all(|r| (r - sigma).abs() < 1e-6));
    }

    #[test]
    fn chirp_is_exact_for_quadratic_phase() {
        let a = 40.0;
        for h in [1e-3, 1e-4] {
            let t = grid(100, h);
            let v: Vec<Complex64> = t.iter().map(|t| Complex64::from_polar(1.0, 0.5 * a * t * t)).collect();
            let s = cf_from_trajectory(&t, &v, W0, 1, "v").unwrap();
            for (ti, w) in t.iter().zip(&s.omega) {
                assert!((w - (W0 + a * ti)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn unwrap_handles_many_turns() {
        let t = grid(1000, 1e-3);
        let v: Vec<Complex64> = t.iter().map(|t| Complex64::from_polar(1.0, 60.0 * t)).collect();
        let s = cf_from_trajectory(&t, &v, 0.0, 1, "v").unwrap();
        assert!(s.omega.iter().all(|w| (w - 60.0).abs() < 1e-8));
    }

    #[test]
    fn floor_is_enforced() {
        let t = grid(5, 1e-3);
        let mut v = vec![Complex64::new(1.0, 0.0); 5];
        v[3] = Complex64::new(1e-9, 0.0);
        assert!(matches!(cf_from_trajectory(&t, &v, W0, 1, "v"), Err(CfError::BelowFloor { .. })));
        assert!(matches!(cf_from_trajectory(&t[..2], &v[..2], W0, 1, "v"), Err(CfError::BadSamples)));
    }

    #[test]
    fn smoothing_keeps_constants() {
        let v = vec![2.0; 7];
        assert_eq!(smooth(&v, 3), v);
        assert_eq!(smooth(&[0.0, 3.0, 0.0], 3), vec![1.5, 1.0, 1.5]);
    }
}
