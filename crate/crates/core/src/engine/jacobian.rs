use nalgebra::DMatrix;

use super::{DaeSystem, EngineError};

fn step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Central-difference Jacobian `∂F/∂x` with steps `1e-6·max(1, |x_i|)`.
pub fn jacobian_fd(sys: &dyn DaeSystem, x: &[f64], p: &[f64]) -> Result<DMatrix<f64>, EngineError> {
    let n = sys.dim();
    let mut jac = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for j in 0..n {
        let h = step(x[j]);
        xp[j] = x[j] + h;
        let up = xp[j];
        sys.residual(&xp, p, &mut fp)?;
        xp[j] = x[j] - h;
        let h2 = up - xp[j];
        sys.residual(&xp, p, &mut fm)?;
        xp[j] = x[j];
        for i in 0..n {
            let d = (fp[i] - fm[i]) / h2;
            if !d.is_finite() {
                return Err(EngineError::NonFinite { equation: i, state: Some(j) });
            }
            jac[(i, j)] = d;
        }
    }
    Ok(jac)
}

/// Central-difference derivative `∂F/∂p_k`.
pub fn param_derivative_fd(sys: &dyn DaeSystem, x: &[f64], p: &[f64], k: usize) -> Result<Vec<f64>, EngineError> {
    let n = sys.dim();
    let h = step(p[k]);
    let mut pp = p.to_vec();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    pp[k] = p[k] + h;
    let up = pp[k];
    sys.residual(x, &pp, &mut fp)?;
    pp[k] = p[k] - h;
    let h2 = up - pp[k];
    sys.residual(x, &pp, &mut fm)?;
    let d: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / h2).collect();
    if let Some(i) = d.iter().position(|v| !v.is_finite()) {
        return Err(EngineError::NonFinite { equation: i, state: None });
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::FnSystem;

    #[test]
    fn linear_system_is_exact() {
        let a = [[1.0, -2.0, 0.5], [0.0, 3.0, -1.0], [4.0, 0.25, -0.75]];
        let sys = FnSystem::ode(3, &[], move |x, _, out| {
            for i in 0..3 {
                out[i] = (0..3).map(|j| a[i][j] * x[j]).sum();
            }
        });
        let jac = jacobian_fd(&sys, &[0.3, -0.7, 0.2], &[]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((jac[(i, j)] - a[i][j]).abs() < 1e-9, "{i} {j} {}", jac[(i, j)] - a[i][j]);
            }
        }
    }

    #[test]
    fn non_finite_entry_is_reported() {
        let sys = FnSystem::ode(2, &[], |x, _, out| {
            out[0] = x[0];
            out[1] = if x[1] > 0.0 { f64::NAN } else { 0.0 };
        });
        let err = jacobian_fd(&sys, &[1.0, 0.0], &[]).unwrap_err();
        assert_eq!(err, EngineError::NonFinite { equation: 1, state: Some(1) });
    }
}
