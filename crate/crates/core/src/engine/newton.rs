use nalgebra::{DMatrix, DVector};

use super::{argmax_abs, inf_norm, jacobian_fd, DaeSystem, EngineError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub backtrack: f64,
    pub min_damping: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 50, backtrack: 0.5, min_damping: 2f64.powi(-20) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

fn weighted_sq(v: &[f64], w: &[f64]) -> f64 {
    v.iter().zip(w).map(|(x, s)| (x * s) * (x * s)).sum()
}

/// Row weights `1/max_j |J_ij|`, so the line-search merit does not favour
/// equations that merely carry large gains.
fn row_weights(jac: &DMatrix<f64>) -> Vec<f64> {
    jac.row_iter()
        .map(|r| {
            let m = r.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            if m > 0.0 {
                1.0 / m
            } else {
                1.0
            }
        })
        .collect()
}

/// Damped Newton on `F(x, p) = 0` with step halving on a row-equilibrated
/// merit.
pub fn newton_equilibrium(
    sys: &dyn DaeSystem,
    x0: &[f64],
    p: &[f64],
    opts: &NewtonOptions,
) -> Result<EquilibriumSolution, EngineError> {
    let mut x = x0.to_vec();
    let mut f = sys.eval(&x, p)?;
    let mut iterations = 0;
    loop {
        let res = inf_norm(&f);
        if res <= opts.tol {
            return Ok(EquilibriumSolution { x, p: p.to_vec(), residual: res, iterations });
        }
        if iterations >= opts.max_iter {
            return Err(EngineError::NonConvergence { residual: res, worst: argmax_abs(&f), iterations });
        }
        iterations += 1;
        let jac = jacobian_fd(sys, &x, p)?;
        let w = row_weights(&jac);
        let rhs = -DVector::from_column_slice(&f);
        let dx = jac.lu().solve(&rhs).ok_or(EngineError::Singular("equilibrium Newton"))?;
        if dx.iter().any(|v| !v.is_finite()) {
            return Err(EngineError::Singular("equilibrium Newton"));
        }
        let merit = weighted_sq(&f, &w);
        let mut alpha = 1.0;
        loop {
            let trial: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, d)| a + alpha * d).collect();
            if let Ok(ft) = sys.eval(&trial, p) {
                if weighted_sq(&ft, &w) < (1.0 - 1e-4 * alpha) * merit || inf_norm(&ft) <= opts.tol {
                    x = trial;
                    f = ft;
                    break;
                }
            }
            alpha *= opts.backtrack;
            if alpha < opts.min_damping {
                return Err(EngineError::NonConvergence { residual: res, worst: argmax_abs(&f), iterations });
            }
        }
    }
}

/// Pseudo-transient continuation: backward-Euler steps `M·(x - x_k)/Δt = F(x)`
/// with `Δt` grown as the residual falls, finished by plain Newton.
///
/// Slower than Newton but far less sensitive to the initial guess, since
/// every step follows the damped dynamics toward an attracting equilibrium.
pub fn pseudo_transient(
    sys: &dyn DaeSystem,
    x0: &[f64],
    p: &[f64],
    opts: &NewtonOptions,
) -> Result<EquilibriumSolution, EngineError> {
    let n = sys.dim();
    let mass = sys.mass(p);
    let mut x = x0.to_vec();
    let mut f = sys.eval(&x, p)?;
    let mut res = inf_norm(&f);
    let mut dt = 1e-4;
    for _ in 0..400 {
        if res <= 1e-6 || dt > 1e8 {
            break;
        }
        let mut y = x.clone();
        let mut ok = false;
        for _ in 0..8 {
            let fy = match sys.eval(&y, p) {
                Ok(v) => v,
                Err(_) => break,
            };
            let r: Vec<f64> = (0..n).map(|i| mass[i] * (y[i] - x[i]) / dt - fy[i]).collect();
            if inf_norm(&r) <= 1e-10 * (1.0 + inf_norm(&fy)) {
                ok = true;
                break;
            }
            let jac = jacobian_fd(sys, &y, p)?;
            let g = DMatrix::from_fn(n, n, |i, j| if i == j { mass[i] / dt } else { 0.0 }) - jac;
            let Some(dy) = g.lu().solve(&(-DVector::from_column_slice(&r))) else { break };
            for i in 0..n {
                y[i] += dy[i];
            }
            if inf_norm(dy.as_slice()) <= 1e-12 * (1.0 + inf_norm(&y)) {
                ok = sys.eval(&y, p).is_ok();
                break;
            }
        }
        if !ok {
            dt *= 0.25;
            if dt < 1e-10 {
                break;
            }
            continue;
        }
        let fy = sys.eval(&y, p)?;
        let ry = inf_norm(&fy);
        let growth = if ry > 0.0 { (res / ry).clamp(0.5, 10.0) } else { 10.0 };
        dt *= growth.max(1.2);
        x = y;
        f = fy;
        res = ry;
    }
    let _ = f;
    newton_equilibrium(sys, &x, p, opts)
}
