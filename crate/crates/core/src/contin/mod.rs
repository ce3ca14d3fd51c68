//! Pseudo-arclength continuation of equilibria in one parameter, with
//! bifurcation detection, localization, two-parameter boundaries and
//! post-Hopf amplitude estimates.

mod boundary;
mod cycle;
mod detect;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::engine::{
    eigenvalues, inf_norm, jacobian_fd, newton_equilibrium, param_derivative_fd, reduce_jacobian, DaeSystem, EngineError,
    EquilibriumSolution, FnSystem, NewtonOptions, SpectrumReport,
};
use crate::report::{fmt_f64, Csv};
use crate::scenario::ContinuationSpec;
use crate::system::GridSystem;

pub use boundary::{boundary_csv, trace_boundary_2d, Boundary2D, BoundaryRow};
pub use cycle::limit_cycle_amplitude;
pub use detect::{
    bifurcations_csv, classify_bifurcations, detect_bifurcations, locate_bifurcation, BifurcationKind, BifurcationRecord,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContinError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("start point is not an equilibrium (|F|inf = {0:.3e})")]
    NotConverged(f64),
    #[error("test function has the same sign at both bracket ends ({0:.3e}, {1:.3e})")]
    NoSignChange(f64, f64),
    #[error("{0}")]
    Invalid(String),
}

/// A system that can be followed along a parameter.
pub trait Continuable: DaeSystem {
    /// Equilibrium near `x0`, or from the system's own starting guess.
    fn equilibrium(&self, x0: Option<&[f64]>, p: &[f64]) -> Result<EquilibriumSolution, EngineError>;

    /// Limiter activities (argument over rated value); empty when the system
    /// has no limiters.
    fn activity(&self, _x: &[f64], _p: &[f64]) -> Result<Vec<f64>, EngineError> {
        Ok(Vec::new())
    }
}

impl Continuable for FnSystem {
    fn equilibrium(&self, x0: Option<&[f64]>, p: &[f64]) -> Result<EquilibriumSolution, EngineError> {
        newton_equilibrium(self, x0.unwrap_or(self.guess()), p, &NewtonOptions::default())
    }
}

impl Continuable for GridSystem {
    fn equilibrium(&self, x0: Option<&[f64]>, p: &[f64]) -> Result<EquilibriumSolution, EngineError> {
        self.solve_equilibrium(x0, p)
    }

    fn activity(&self, x: &[f64], p: &[f64]) -> Result<Vec<f64>, EngineError> {
        self.limiter_activity(x, p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationSettings {
    /// Initial arclength step.
    pub h0: f64,
    pub h_min: f64,
    pub h_max: f64,
    /// Step budget.
    pub max_steps: usize,
    pub p_min: f64,
    pub p_max: f64,
    /// After a turning point, stop once the parameter is back to this
    /// fraction of its largest excursion from the start.
    pub stop_fraction: f64,
    /// Residual tolerance of every accepted point.
    pub tol: f64,
    pub max_corrector: usize,
    /// Initial direction of the parameter, `+1` or `-1`.
    pub direction: f64,
}

impl Default for ContinuationSettings {
    fn default() -> Self {
        Self {
            h0: 0.01,
            h_min: 1e-5,
            h_max: 0.05,
            max_steps: 2000,
            p_min: 0.0,
            p_max: 10.0,
            stop_fraction: 0.5,
            tol: 1e-9,
            max_corrector: 8,
            direction: 1.0,
        }
    }
}

impl From<&ContinuationSpec> for ContinuationSettings {
    fn from(s: &ContinuationSpec) -> Self {
        Self {
            h0: s.h0,
            h_min: s.h_min,
            h_max: s.h_max,
            max_steps: s.max_steps,
            p_min: s.p_min,
            p_max: s.p_max,
            stop_fraction: s.stop_fraction,
            ..Self::default()
        }
    }
}

impl ContinuationSettings {
    fn validate(&self) -> Result<(), ContinError> {
        let ok = self.h_min > 0.0
            && self.h_min <= self.h_max
            && self.h0 > 0.0
            && self.p_min < self.p_max
            && self.tol > 0.0
            && self.direction != 0.0
            && (0.0..=1.0).contains(&self.stop_fraction);
        if ok {
            Ok(())
        } else {
            Err(ContinError::Invalid(
                "continuation settings need 0 < h_min <= h_max, h0 > 0, p_min < p_max and stop_fraction in [0, 1]".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchPoint {
    pub x: Vec<f64>,
    pub lambda: f64,
    /// Accumulated arclength.
    pub s: f64,
    /// `None` when the algebraic block is singular.
    pub spectrum: Option<SpectrumReport>,
    pub algebraic_condition: Option<f64>,
    pub activity: Vec<f64>,
    /// Parameter component of the unit tangent.
    pub dlambda_ds: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    ParamBound,
    /// Turned back past the requested fraction of the excursion.
    Returned,
    Budget,
    /// The corrector failed at the minimum step.
    StepFailure(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub param: String,
    pub index: usize,
    /// Full parameter vector at the start.
    pub p: Vec<f64>,
    pub points: Vec<BranchPoint>,
    pub termination: Termination,
}

impl Branch {
    /// Parameter vector at a given value of the continuation parameter.
    pub fn params_at(&self, lambda: f64) -> Vec<f64> {
        let mut p = self.p.clone();
        p[self.index] = lambda;
        p
    }

    pub fn max_lambda(&self) -> f64 {
        self.points.iter().map(|q| q.lambda).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Branch table: arclength, parameter, rightmost real part, then every
    /// state.
    pub fn to_csv(&self, state_names: &[String]) -> Csv {
        let mut header = vec!["s".to_string(), self.param.clone(), "rightmost_re".to_string()];
        header.extend(state_names.iter().cloned());
        let mut csv = Csv::new(&header);
        for q in &self.points {
            let mut row = vec![fmt_f64(q.s), fmt_f64(q.lambda)];
            row.push(q.spectrum.as_ref().map_or_else(|| "nan".to_string(), |s| fmt_f64(s.rightmost_re)));
            row.extend(q.x.iter().map(|v| fmt_f64(*v)));
            csv.row(&row);
        }
        csv
    }
}

/// Local data at a point `y = (x, λ)`: Jacobian blocks and the unit tangent.
pub(crate) struct Local {
    pub jac: DMatrix<f64>,
    pub tangent: Vec<f64>,
}

pub(crate) fn with_param(p: &[f64], k: usize, v: f64) -> Vec<f64> {
    let mut q = p.to_vec();
    q[k] = v;
    q
}

/// Bordered matrix `[J f_λ; rᵀ]`.
fn bordered(jac: &DMatrix<f64>, f_l: &[f64], r: &[f64]) -> DMatrix<f64> {
    let n = jac.nrows();
    DMatrix::from_fn(n + 1, n + 1, |i, j| match (i < n, j < n) {
        (true, true) => jac[(i, j)],
        (true, false) => f_l[i],
        (false, _) => r[j],
    })
}

pub(crate) fn local<S: Continuable>(sys: &S, y: &[f64], p: &[f64], k: usize, reference: &[f64]) -> Result<Local, EngineError> {
    let n = sys.dim();
    let q = with_param(p, k, y[n]);
    let jac = jacobian_fd(sys, &y[..n], &q)?;
    let f_l = param_derivative_fd(sys, &y[..n], &q, k)?;
    let mut rhs = DVector::zeros(n + 1);
    rhs[n] = 1.0;
    let t = bordered(&jac, &f_l, reference).lu().solve(&rhs).ok_or(EngineError::Singular("branch tangent"))?;
    let norm = t.norm();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(EngineError::Singular("branch tangent"));
    }
    let sign = if t.dot(&DVector::from_column_slice(reference)) < 0.0 { -1.0 } else { 1.0 };
    Ok(Local { jac, tangent: t.iter().map(|v| sign * v / norm).collect() })
}

pub(crate) fn spectrum_of(jac: &DMatrix<f64>, mass: &[f64]) -> Result<(Option<SpectrumReport>, Option<f64>), EngineError> {
    match reduce_jacobian(jac, mass) {
        Ok(r) => Ok((Some(eigenvalues(&r.a)?), r.algebraic_condition)),
        Err(EngineError::SingularAlgebraic { condition }) => Ok((None, Some(condition))),
        Err(e) => Err(e),
    }
}

/// Newton on `F(x, λ) = 0` together with the hyperplane `rᵀ(y - y_pred) = 0`.
/// Returns the corrected point and the iteration count.
pub(crate) fn correct<S: Continuable>(
    sys: &S,
    y_pred: &[f64],
    p: &[f64],
    k: usize,
    r: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize, f64), EngineError> {
    let n = sys.dim();
    let mut y = y_pred.to_vec();
    for it in 0..=max_iter {
        let q = with_param(p, k, y[n]);
        let f = sys.eval(&y[..n], &q)?;
        let arc: f64 = r.iter().zip(y.iter().zip(y_pred)).map(|(a, (b, c))| a * (b - c)).sum();
        let res = inf_norm(&f);
        if res <= tol && arc.abs() <= tol {
            return Ok((y, it, res));
        }
        if it == max_iter {
            return Err(EngineError::NonConvergence { residual: res, worst: crate::engine::argmax_abs(&f), iterations: it });
        }
        let jac = jacobian_fd(sys, &y[..n], &q)?;
        let f_l = param_derivative_fd(sys, &y[..n], &q, k)?;
        let rhs = -DVector::from_iterator(n + 1, f.iter().copied().chain(std::iter::once(arc)));
        let dy = bordered(&jac, &f_l, r).lu().solve(&rhs).ok_or(EngineError::Singular("corrector"))?;
        if dy.iter().any(|v| !v.is_finite()) {
            return Err(EngineError::Singular("corrector"));
        }
        for i in 0..=n {
            y[i] += dy[i];
        }
    }
    unreachable!("loop returns on its last iteration")
}

fn make_point<S: Continuable>(
    sys: &S,
    y: &[f64],
    p: &[f64],
    k: usize,
    s: f64,
    loc: &Local,
    residual: f64,
) -> Result<BranchPoint, EngineError> {
    let n = sys.dim();
    let q = with_param(p, k, y[n]);
    let (spectrum, algebraic_condition) = spectrum_of(&loc.jac, &sys.mass(&q))?;
    Ok(BranchPoint {
        x: y[..n].to_vec(),
        lambda: y[n],
        s,
        spectrum,
        algebraic_condition,
        activity: sys.activity(&y[..n], &q)?,
        dlambda_ds: loc.tangent[n],
        residual,
    })
}

/// Follows the equilibrium branch through `start` as `param` varies.
///
/// Tangent predictor and a pseudo-arclength Newton corrector on
/// the bordered system. The step is halved whenever the corrector fails and
/// grown by 1.3 after three consecutive easy steps, within `[h_min, h_max]`.
/// Folds are traversed, so the parameter may decrease along the branch.
pub fn continue_branch<S: Continuable>(
    sys: &S,
    start: &EquilibriumSolution,
    param: &str,
    settings: &ContinuationSettings,
) -> Result<Branch, ContinError> {
    settings.validate()?;
    let k = sys.param_index(param)?;
    let n = sys.dim();
    let p = start.p.clone();
    let res0 = inf_norm(&sys.eval(&start.x, &p)?);
    if res0 > settings.tol.max(1e-6) {
        return Err(ContinError::NotConverged(res0));
    }
    let dir = settings.direction.signum();
    let mut y: Vec<f64> = start.x.iter().copied().chain(std::iter::once(p[k])).collect();
    let mut e = vec![0.0; n + 1];
    e[n] = dir;
    let mut loc = local(sys, &y, &p, k, &e)?;
    let mut points = vec![make_point(sys, &y, &p, k, 0.0, &loc, res0)?];
    let lambda0 = p[k];
    let mut peak = 0.0f64;
    let mut turned = false;
    let mut h = settings.h0.clamp(settings.h_min, settings.h_max);
    let mut easy = 0;
    let mut s = 0.0;
    let termination = loop {
        if points.len() > settings.max_steps {
            break Termination::Budget;
        }
        let t = loc.tangent.clone();
        let y_pred: Vec<f64> = y.iter().zip(&t).map(|(a, b)| a + h * b).collect();
        let attempt = correct(sys, &y_pred, &p, k, &t, settings.tol, settings.max_corrector).and_then(|(yn, it, res)| {
            let dist = yn.iter().zip(&y_pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dist > h {
                return Err(EngineError::Singular("corrector left the trust region"));
            }
            let ln = local(sys, &yn, &p, k, &t)?;
            if ln.tangent.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>() < 0.5 {
                return Err(EngineError::Singular("tangent turned too sharply"));
            }
            Ok((yn, it, res, ln))
        });
        let (yn, it, res, ln) = match attempt {
            Ok(v) => v,
            Err(err) => {
                h *= 0.5;
                easy = 0;
                if h < settings.h_min {
                    break Termination::StepFailure(format!(
                        "corrector failed at {param} = {:.6} with the minimum step: {err}",
                        y[n]
                    ));
                }
                continue;
            }
        };
        s += yn.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        points.push(make_point(sys, &yn, &p, k, s, &ln, res)?);
        y = yn;
        loc = ln;
        if it <= 3 {
            easy += 1;
            if easy >= 3 {
                h = (h * 1.3).min(settings.h_max);
                easy = 0;
            }
        } else {
            easy = 0;
        }
        let lambda = y[n];
        if lambda < settings.p_min || lambda > settings.p_max {
            break Termination::ParamBound;
        }
        let excursion = dir * (lambda - lambda0);
        peak = peak.max(excursion);
        if dir * loc.tangent[n] < 0.0 {
            turned = true;
        }
        if turned && excursion <= settings.stop_fraction * peak {
            break Termination::Returned;
        }
    };
    Ok(Branch { param: param.to_string(), index: k, p, points, termination })
}
