use super::LtcTransformer;
use crate::smoothlim::{rate_window, smooth_deadband};

/// Tap rate `dn/dt` for tap position `n` and regulated-bus magnitude `v_reg`.
pub fn ltc_residual(t: &LtcTransformer, n: f64, v_reg: f64) -> f64 {
    let push = smooth_deadband(t.d_band, t.k_s, t.v_ref - v_reg);
    push * rate_window(n, t.n_min, t.n_max, t.k_s, push) / t.t_ltc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ltc() -> LtcTransformer {
        LtcTransformer {
            from: 0,
            to: 1,
            r_t: 0.0,
            l_t: 1e-4,
            n_min: 0.9,
            n_max: 1.1,
            t_ltc: 30.0,
            v_ref: 1.0,
            d_band: 0.01,
            k_s: 50.0,
        }
    }

    #[test]
    fn centre_of_band_is_at_rest() {
        assert_eq!(ltc_residual(&ltc(), 1.02, 1.0), 0.0);
    }

    #[test]
    fn low_voltage_raises_tap() {
        let t = ltc();
        assert!(ltc_residual(&t, 1.0, t.v_ref - 2.0 * t.d_band) > 0.0);
    }

    #[test]
    fn window_stops_motion_at_upper_limit() {
        let t = ltc();
        let v = t.v_ref - 3.0 * t.d_band;
        let interior = ltc_residual(&t, 1.0, v);
        let at_limit = ltc_residual(&t, t.n_max, v);
        assert!(at_limit.abs() < interior.abs() * 1e-3);
        // moving away from the limit is not suppressed
        let back = ltc_residual(&t, t.n_max, t.v_ref + 3.0 * t.d_band);
        assert!(back < 0.0 && back.abs() > 0.999 * interior.abs());
    }

    #[test]
    fn rest_points_sit_at_band_edges() {
        let t = ltc();
        // bisection on the deadband for the positive rest point
        let (mut lo, mut hi) = (0.5 * t.d_band, 2.0 * t.d_band);
        let f = |e: f64| smooth_deadband(t.d_band, t.k_s, e);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid
            } else {
                lo = mid
            }
        }
        assert!(lo <= t.d_band + 3.0 / t.k_s);
        assert!(ltc_residual(&t, 1.0, t.v_ref - lo).abs() < 1e-12);
    }
}
