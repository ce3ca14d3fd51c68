//! Generic machinery for systems written as `M·ẋ = F(x, p)` with a diagonal
//! mass matrix whose zero entries mark algebraic equations.

mod integrate;
mod jacobian;
mod linear;
mod newton;

use thiserror::Error;

use crate::netmodel::ModelError;

pub use integrate::{integrate, IntegrateOptions, Trajectory};
pub use jacobian::{jacobian_fd, param_derivative_fd};
pub use linear::{eigenvalues, reduce_jacobian, reduced_state_matrix, ReducedMatrix, SpectrumReport, OMEGA_MIN};
pub use newton::{newton_equilibrium, pseudo_transient, EquilibriumSolution, NewtonOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("Newton did not converge after {iterations} iterations: |F|inf = {residual:.3e}, worst equation {worst}")]
    NonConvergence { residual: f64, worst: usize, iterations: usize },
    #[error("singular Jacobian ({0})")]
    Singular(&'static str),
    #[error("non-finite value in equation {equation}{}", .state.map(|s| format!(" w.r.t. state {s}")).unwrap_or_default())]
    NonFinite { equation: usize, state: Option<usize> },
    #[error("step failed at t = {time:.6} s ({reason}); try a smaller step")]
    StepFailure { time: f64, reason: String },
    #[error("eigenvalue iteration did not converge")]
    Eigen,
    #[error("algebraic block is singular (condition estimate {condition:.3e}); singularity-induced bifurcation candidate")]
    SingularAlgebraic { condition: f64 },
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A system `M·ẋ = F(x, p)`.
///
/// Residual evaluation must be deterministic and free of side effects, so
/// several evaluations may run concurrently on distinct state vectors.
pub trait DaeSystem: Sync {
    fn dim(&self) -> usize;

    /// Diagonal of the mass matrix; entries are either zero or positive.
    fn mass(&self, p: &[f64]) -> Vec<f64>;

    fn param_names(&self) -> &[String];

    fn residual(&self, x: &[f64], p: &[f64], out: &mut [f64]) -> Result<(), EngineError>;

    fn state_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x{i}")).collect()
    }

    fn param_index(&self, name: &str) -> Result<usize, EngineError> {
        self.param_names().iter().position(|n| n == name).ok_or_else(|| EngineError::UnknownParam(name.to_string()))
    }

    fn eval(&self, x: &[f64], p: &[f64]) -> Result<Vec<f64>, EngineError> {
        let mut out = vec![0.0; self.dim()];
        self.residual(x, p, &mut out)?;
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(EngineError::NonFinite { equation: i, state: None });
        }
        Ok(out)
    }
}

type ResidualFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;

/// A system defined by a closure; handy for normal forms and tests.
pub struct FnSystem {
    mass: Vec<f64>,
    params: Vec<String>,
    f: Box<ResidualFn>,
    guess: Vec<f64>,
}

impl FnSystem {
    pub fn new<F>(mass: Vec<f64>, params: &[&str], f: F) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        let guess = vec![0.0; mass.len()];
        Self { mass, params: params.iter().map(|s| s.to_string()).collect(), f: Box::new(f), guess }
    }

    /// Sets the starting point used when no initial state is supplied.
    pub fn with_guess(mut self, guess: Vec<f64>) -> Self {
        assert_eq!(guess.len(), self.mass.len(), "guess length must match the dimension");
        self.guess = guess;
        self
    }

    pub fn guess(&self) -> &[f64] {
        &self.guess
    }

    /// Pure ODE `ẋ = F(x, p)`.
    pub fn ode<F>(dim: usize, params: &[&str], f: F) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self::new(vec![1.0; dim], params, f)
    }
}

impl DaeSystem for FnSystem {
    fn dim(&self) -> usize {
        self.mass.len()
    }

    fn mass(&self, _p: &[f64]) -> Vec<f64> {
        self.mass.clone()
    }

    fn param_names(&self) -> &[String] {
        &self.params
    }

    fn residual(&self, x: &[f64], p: &[f64], out: &mut [f64]) -> Result<(), EngineError> {
        (self.f)(x, p, out);
        Ok(())
    }
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub(crate) fn argmax_abs(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, -1.0), |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) }).0
}
