//! Smooth replacements for hard limits.
//!
//! Every function here is at least C¹ so that equilibria stay well defined for
//! Newton and continuation even when a device sits on one of its limits.
//!
//! The magnitude limiter blends `tanh` with a p-norm: for a normalised input
//! `u = |x| / limit` it returns `tanh(u^p)^(1/p)` with `p = k⁴`. At `k = 1`
//! this is the plain `tanh(u)` curve; as `k` grows it hugs the ideal clip
//! `min(u, 1)`, with a worst-case gap of roughly `0.27·k⁻⁴·limit` located at
//! the corner `|x| = limit`. Below the corner it is the identity to machine
//! precision, so an unsaturated current reference passes through untouched.

use num_complex::Complex64;

/// Default limiter sharpness.
pub const DEFAULT_SHARPNESS: f64 = 10.0;

/// `ln(tanh(z)/z)` evaluated without cancellation for small and large `z`.
fn log_tanh_ratio(z: f64) -> f64 {
    if z < 1e-4 {
        -z * z / 3.0
    } else if z > 20.0 {
        -z.ln()
    } else {
        (z.tanh() / z).ln()
    }
}

fn sech2(z: f64) -> f64 {
    if z > 20.0 {
        4.0 * (-2.0 * z).exp()
    } else {
        let c = z.cosh();
        1.0 / (c * c)
    }
}

/// Magnitude saturation with a smooth corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothLimiter {
    limit: f64,
    k: f64,
}

impl SmoothLimiter {
    /// Returns `None` unless `limit > 0` and `k >= 1`.
    pub fn new(limit: f64, k: f64) -> Option<Self> {
        (limit > 0.0 && limit.is_finite() && k >= 1.0 && k.is_finite()).then_some(Self { limit, k })
    }

    pub fn limit(&self) -> f64 {
        self.limit
    }

    pub fn sharpness(&self) -> f64 {
        self.k
    }

    fn exponent(&self) -> f64 {
        self.k.powi(4)
    }

    /// Normalised shape on `u >= 0`: value and slope.
    fn shape(&self, u: f64) -> (f64, f64) {
        if u <= 0.0 {
            return (0.0, 1.0);
        }
        let p = self.exponent();
        let lw = p * u.ln();
        if lw < -700.0 {
            return (u, 1.0);
        }
        let z = lw.min(700.0).exp();
        let g = log_tanh_ratio(z);
        // tanh(z) rounds to 1 here; keep the value exact so it stays monotone
        let value = if z > 20.0 { 1.0 } else { u * (g / p).exp() };
        let slope = sech2(z) * (-(p - 1.0) / p * g).exp();
        (value.min(1.0), slope)
    }

    /// Scalar saturation; odd, increasing and bounded by `limit`.
    pub fn sat(&self, x: f64) -> f64 {
        let (f, _) = self.shape(x.abs() / self.limit);
        x.signum() * self.limit * f
    }

    /// Derivative of [`sat`](Self::sat).
    pub fn sat_slope(&self, x: f64) -> f64 {
        self.shape(x.abs() / self.limit).1
    }

    /// Scales a vector so its magnitude becomes `sat(|x|)`; the angle is kept.
    pub fn sat_vector(&self, x: Complex64) -> Complex64 {
        let m = x.norm();
        if m == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        x * (self.sat(m) / m)
    }

    /// `|x| / limit`; crosses 1 when the argument reaches rated capacity.
    pub fn activity(&self, x: f64) -> f64 {
        x.abs() / self.limit
    }
}

/// Hard clip used as the reference for the smooth limiter.
pub fn hard_clip(limit: f64, x: f64) -> f64 {
    x.clamp(-limit, limit)
}

/// Smooth deadband `e - d·tanh(k·e/d)`.
///
/// Outside the band this approaches `e - d·sign(e)`. Its nonzero roots sit at
/// `±d·tanh(k)`-ish, which is where a regulator driven by it comes to rest.
pub fn smooth_deadband(d: f64, k: f64, e: f64) -> f64 {
    if d <= 0.0 {
        return e;
    }
    e - d * (k * e / d).tanh()
}

/// Rate multiplier in `[0, 1]` that shuts motion off toward the limit being
/// pushed against. The logistic edge is centred `2/k` inside the limit so the
/// multiplier is already below `4e-4` at the limit itself.
pub fn rate_window(n: f64, n_min: f64, n_max: f64, k: f64, direction: f64) -> f64 {
    let gap = if direction >= 0.0 { n_max - n } else { n - n_min };
    0.5 * (1.0 + (2.0 * k * gap - 4.0).tanh())
}

/// Back-calculation anti-windup: `e + k_aw·(u_sat - u)`.
pub fn antiwindup_residual(e: f64, u: f64, u_sat: f64, k_aw: f64) -> f64 {
    e + k_aw * (u_sat - u)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lim(l: f64, k: f64) -> SmoothLimiter {
        SmoothLimiter::new(l, k).unwrap()
    }

    #[test]
    fn sat_examples() {
        assert_eq!(lim(1.0, 1.0).sat(0.0), 0.0);
        assert!((lim(1.0, 1.0).sat(1.0) - 1f64.tanh()).abs() < 1e-15);
        let v = lim(1.0, 10.0).sat(1.0);
        assert!((0.9999..1.0).contains(&v), "{v}");
    }

    #[test]
    fn invalid_limiters_rejected() {
        assert!(SmoothLimiter::new(0.0, 10.0).is_none());
        assert!(SmoothLimiter::new(1.0, 0.5).is_none());
        assert!(SmoothLimiter::new(f64::INFINITY, 2.0).is_none());
    }

    #[test]
    fn identity_below_corner() {
        let l = lim(1.2, 10.0);
        for x in [0.01, 0.3, 0.9, 1.1] {
            assert!((l.sat(x) - x).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn sat_vector_examples() {
        let l = lim(1.2, 5.0);
        let y = l.sat_vector(Complex64::new(3.0, 4.0));
        let m = y.norm();
        assert!((m - 1.2).abs() < 1e-9);
        assert!((y.re / m - 0.6).abs() < 1e-12 && (y.im / m - 0.8).abs() < 1e-12);
        assert_eq!(l.sat_vector(Complex64::new(0.0, 0.0)), Complex64::new(0.0, 0.0));
        let d = l.sat_vector(Complex64::new(7.0, 0.0));
        assert_eq!(d.im, 0.0);
    }

    #[test]
    fn slope_matches_central_difference() {
        for k in [1.0, 2.0, 5.0] {
            let l = lim(1.0, k);
            for &x in &[-2.0, -0.7, 0.2, 0.8, 1.3, 2.5] {
                let h = 1e-6;
                let fd = (l.sat(x + h) - l.sat(x - h)) / (2.0 * h);
                let an = l.sat_slope(x);
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "k={k} x={x} fd={fd} an={an}");
            }
        }
    }

    #[test]
    fn deadband_examples() {
        assert_eq!(smooth_deadband(0.01, 50.0, 0.0), 0.0);
        let d = 0.01;
        let e = 10.0 * d;
        let v = smooth_deadband(d, 50.0, e);
        assert!(((v - (e - d)) / (e - d)).abs() < 0.02);
        for i in 0..50 {
            let e = -0.05 + 0.002 * i as f64;
            assert_eq!(smooth_deadband(d, 50.0, -e), -smooth_deadband(d, 50.0, e));
        }
    }

    #[test]
    fn rate_window_examples() {
        assert!(rate_window(1.0, 0.9, 1.1, 50.0, 1.0) >= 0.999);
        assert!(rate_window(1.0, 0.9, 1.1, 50.0, -1.0) >= 0.999);
        let at = rate_window(1.1, 0.9, 1.1, 50.0, 1.0);
        assert!(at <= 0.5);
        assert!(rate_window(1.11, 0.9, 1.1, 50.0, 1.0) < at);
        assert!(rate_window(1.1, 0.9, 1.1, 50.0, -1.0) >= 0.999);
    }

    #[test]
    fn antiwindup_examples() {
        assert_eq!(antiwindup_residual(0.3, 1.0, 1.0, 1.0), 0.3);
        assert!(antiwindup_residual(0.0, 2.0, 1.0, 1.0) < 0.0);
    }

    /// PI loop on a first-order plant `ẏ = -y + sat(u)` with a step target
    /// the plant cannot reach; back-calculation keeps the integrator lower.
    #[test]
    fn antiwindup_limits_integrator_peak() {
        let run = |k_aw: f64| {
            let l = lim(1.0, 10.0);
            let (kp, ki, h) = (2.0, 5.0, 1e-3);
            let (mut y, mut xi, mut peak) = (0.0f64, 0.0f64, 0.0f64);
            for step in 0..10_000 {
                let r = if step < 5000 { 2.0 } else { 0.0 };
                let e = r - y;
                let u = kp * e + xi;
                let us = l.sat(u);
                xi += h * antiwindup_residual(ki * e, u, us, k_aw);
                y += h * (-y + us);
                peak = peak.max(xi);
            }
            peak
        };
        assert!(run(1.0) < run(0.0));
    }
}
