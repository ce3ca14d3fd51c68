use nalgebra::{DMatrix, DVector, LU};

use super::{inf_norm, jacobian_fd, DaeSystem, EngineError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrateOptions {
    pub h: f64,
    pub t_end: f64,
    /// Newton tolerance on the step residual (∞-norm).
    pub tol: f64,
    pub max_iter: usize,
}

impl IntegrateOptions {
    pub fn new(t_end: f64, h: f64) -> Self {
        Self { h, t_end, tol: 1e-10, max_iter: 25 }
    }
}

/// Time-stamped states, one row per step including the initial condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.x.iter().map(|r| r[k]).collect()
    }

    pub fn last(&self) -> &[f64] {
        self.x.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

struct StepMatrix {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl StepMatrix {
    fn build(sys: &dyn DaeSystem, x: &[f64], p: &[f64], mass: &[f64], h: f64) -> Result<Self, EngineError> {
        let jac = jacobian_fd(sys, x, p)?;
        let n = mass.len();
        let g = DMatrix::from_fn(n, n, |i, j| {
            if mass[i] > 0.0 {
                let d = if i == j { mass[i] / h } else { 0.0 };
                d - 0.5 * jac[(i, j)]
            } else {
                jac[(i, j)]
            }
        });
        Ok(Self { lu: g.lu() })
    }
}

/// Fixed-step trapezoidal integration of `M·ẋ = F(x, p)`; algebraic rows are
/// enforced at every step. Each step is solved by a Newton iteration whose
/// matrix is reused across steps and refreshed when convergence slows.
pub fn integrate(sys: &dyn DaeSystem, x0: &[f64], p: &[f64], opts: &IntegrateOptions) -> Result<Trajectory, EngineError> {
    if !(opts.h > 0.0) {
        return Err(EngineError::StepFailure { time: 0.0, reason: "step size must be positive".into() });
    }
    let n = sys.dim();
    let mass = sys.mass(p);
    let h = opts.h;
    let steps = (opts.t_end / h).round().max(0.0) as usize;
    let mut traj = Trajectory { t: Vec::with_capacity(steps + 1), x: Vec::with_capacity(steps + 1) };
    let mut x = x0.to_vec();
    let mut f_old = sys.eval(&x, p)?;
    traj.t.push(0.0);
    traj.x.push(x.clone());
    let mut mat: Option<StepMatrix> = None;
    let mut r = vec![0.0; n];
    for k in 1..=steps {
        let t = k as f64 * h;
        let mut y = x.clone();
        let mut refreshed = false;
        let mut converged = false;
        let mut f_new = f_old.clone();
        'attempt: for _ in 0..2 {
            if mat.is_none() {
                mat = Some(StepMatrix::build(sys, &y, p, &mass, h)?);
                refreshed = true;
            }
            let m = mat.as_ref().expect("step matrix present");
            let mut prev = f64::INFINITY;
            for _ in 0..opts.max_iter {
                sys.residual(&y, p, &mut f_new)?;
                for i in 0..n {
                    r[i] = if mass[i] > 0.0 { mass[i] * (y[i] - x[i]) / h - 0.5 * (f_new[i] + f_old[i]) } else { f_new[i] };
                }
                let norm = inf_norm(&r);
                if !norm.is_finite() {
                    break;
                }
                if norm <= opts.tol {
                    converged = true;
                    break 'attempt;
                }
                if norm > 0.5 * prev && !refreshed {
                    break;
                }
                prev = norm;
                let dy =
                    m.lu.solve(&(-DVector::from_column_slice(&r)))
                        .ok_or(EngineError::StepFailure { time: t, reason: "singular step matrix".into() })?;
                for i in 0..n {
                    y[i] += dy[i];
                }
            }
            if refreshed {
                break;
            }
            // slow or failed convergence with a stale matrix: rebuild at the
            // last accepted state and retry the step
            y = x.clone();
            mat = None;
        }
        if !converged {
            return Err(EngineError::StepFailure { time: t, reason: "Newton iteration did not converge".into() });
        }
        x = y;
        f_old = f_new;
        traj.t.push(t);
        traj.x.push(x.clone());
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::FnSystem;

    #[test]
    fn exponential_decay() {
        let sys = FnSystem::ode(1, &[], |x, _, out| out[0] = -x[0]);
        let tr = integrate(&sys, &[1.0], &[], &IntegrateOptions::new(1.0, 1e-3)).unwrap();
        assert_eq!(tr.len(), 1001);
        assert!((tr.last()[0] - (-1f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn oscillator_energy_is_conserved() {
        let w = 2.0 * std::f64::consts::PI;
        let sys = FnSystem::ode(2, &[], move |x, _, out| {
            out[0] = w * x[1];
            out[1] = -w * x[0];
        });
        let tr = integrate(&sys, &[1.0, 0.0], &[], &IntegrateOptions::new(100.0, 1e-2)).unwrap();
        let e0 = 1.0;
        let last = tr.last();
        let e = last[0] * last[0] + last[1] * last[1];
        assert!(((e - e0) / e0).abs() < 1e-6);
    }

    #[test]
    fn equilibrium_stays_put() {
        let sys = FnSystem::ode(2, &[], |x, _, out| {
            out[0] = 1.0 - x[0] * x[1];
            out[1] = x[0] - x[1];
        });
        let tr = integrate(&sys, &[1.0, 1.0], &[], &IntegrateOptions::new(1.0, 1e-2)).unwrap();
        for row in &tr.x {
            assert!((row[0] - 1.0).abs() < 1e-9 && (row[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn algebraic_rows_hold_each_step() {
        // ẋ = -y, 0 = y - x  => x = e^{-t}
        let sys = FnSystem::new(vec![1.0, 0.0], &[], |x, _, out| {
            out[0] = -x[1];
            out[1] = x[1] - x[0];
        });
        let tr = integrate(&sys, &[1.0, 1.0], &[], &IntegrateOptions::new(1.0, 1e-3)).unwrap();
        for row in &tr.x {
            assert!((row[1] - row[0]).abs() < 1e-10);
        }
        assert!((tr.last()[0] - (-1f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn bad_step_rejected() {
        let sys = FnSystem::ode(1, &[], |x, _, out| out[0] = -x[0]);
        assert!(integrate(&sys, &[1.0], &[], &IntegrateOptions::new(1.0, 0.0)).is_err());
    }
}
