use nalgebra::{DMatrix, Schur};
use num_complex::Complex64;

use super::{jacobian_fd, DaeSystem, EngineError};

/// Imaginary parts below this (rad/s) count as real eigenvalues.
pub const OMEGA_MIN: f64 = 1e-3;

const SIB_CONDITION: f64 = 1e12;

/// State matrix over the dynamic states after eliminating algebraic ones.
#[derive(Debug, Clone)]
pub struct ReducedMatrix {
    pub a: DMatrix<f64>,
    pub dynamic: Vec<usize>,
    /// 2-norm condition estimate of the algebraic block, if there is one.
    pub algebraic_condition: Option<f64>,
}

fn condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `A = M_d⁻¹·(f_x - f_y·g_y⁻¹·g_x)`.
pub fn reduced_state_matrix(sys: &dyn DaeSystem, x: &[f64], p: &[f64]) -> Result<ReducedMatrix, EngineError> {
    let jac = jacobian_fd(sys, x, p)?;
    reduce_jacobian(&jac, &sys.mass(p))
}

/// Same reduction starting from an already computed Jacobian.
pub fn reduce_jacobian(jac: &DMatrix<f64>, mass: &[f64]) -> Result<ReducedMatrix, EngineError> {
    let dynamic: Vec<usize> = (0..mass.len()).filter(|&i| mass[i] > 0.0).collect();
    let algebraic: Vec<usize> = (0..mass.len()).filter(|&i| mass[i] == 0.0).collect();
    let sub = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |r, c| jac[(rows[r], cols[c])]);
    let mut a = sub(&dynamic, &dynamic);
    let mut algebraic_condition = None;
    if !algebraic.is_empty() {
        let gy = sub(&algebraic, &algebraic);
        let cond = condition(&gy);
        algebraic_condition = Some(cond);
        if cond > SIB_CONDITION {
            return Err(EngineError::SingularAlgebraic { condition: cond });
        }
        let gx = sub(&algebraic, &dynamic);
        let fy = sub(&dynamic, &algebraic);
        let sol = gy.lu().solve(&gx).ok_or(EngineError::SingularAlgebraic { condition: cond })?;
        a -= fy * sol;
    }
    for (r, &i) in dynamic.iter().enumerate() {
        let inv = 1.0 / mass[i];
        a.row_mut(r).scale_mut(inv);
    }
    Ok(ReducedMatrix { a, dynamic, algebraic_condition })
}

/// Eigenvalues sorted by descending real part, with a summary of the
/// dominant oscillatory pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<Complex64>,
    pub rightmost_re: f64,
    /// `(damping ratio, frequency in Hz)` of the rightmost complex pair.
    pub dominant: Option<(f64, f64)>,
}

impl SpectrumReport {
    pub fn unstable_real(&self) -> usize {
        self.eigenvalues.iter().filter(|z| z.re > 0.0 && z.im.abs() <= OMEGA_MIN).count()
    }

    /// Number of unstable complex eigenvalues (both members of each pair).
    pub fn unstable_complex(&self) -> usize {
        self.eigenvalues.iter().filter(|z| z.re > 0.0 && z.im.abs() > OMEGA_MIN).count()
    }

    pub fn unstable(&self) -> usize {
        self.eigenvalues.iter().filter(|z| z.re > 0.0).count()
    }

    /// Rightmost complex eigenvalue with positive imaginary part.
    pub fn rightmost_pair(&self) -> Option<Complex64> {
        self.eigenvalues.iter().find(|z| z.im > OMEGA_MIN).copied()
    }

    /// Real eigenvalue closest to the imaginary axis.
    pub fn critical_real(&self) -> Option<f64> {
        self.eigenvalues.iter().filter(|z| z.im.abs() <= OMEGA_MIN).map(|z| z.re).min_by(|a, b| a.abs().total_cmp(&b.abs()))
    }
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Result<SpectrumReport, EngineError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(EngineError::NonFinite { equation: 0, state: None });
    }
    let mut eig: Vec<Complex64> = if m.nrows() == 0 {
        Vec::new()
    } else {
        let schur = Schur::try_new(m.clone(), f64::EPSILON, 100_000).ok_or(EngineError::Eigen)?;
        schur.complex_eigenvalues().iter().copied().collect()
    };
    eig.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    let rightmost_re = eig.first().map_or(f64::NEG_INFINITY, |z| z.re);
    let dominant = eig.iter().find(|z| z.im > OMEGA_MIN).map(|z| (-z.re / z.norm(), z.im / (2.0 * std::f64::consts::PI)));
    Ok(SpectrumReport { eigenvalues: eig, rightmost_re, dominant })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::FnSystem;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn diagonal_matrix() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-3.0, 1.0, -0.5]));
        let s = eigenvalues(&m).unwrap();
        let re: Vec<f64> = s.eigenvalues.iter().map(|z| z.re).collect();
        assert_eq!(re, vec![1.0, -0.5, -3.0]);
        assert_eq!(s.rightmost_re, 1.0);
    }

    #[test]
    fn damped_rotation() {
        let m = DMatrix::from_row_slice(2, 2, &[-1.0, 5.0, -5.0, -1.0]);
        let s = eigenvalues(&m).unwrap();
        assert!(close(s.eigenvalues[0], Complex64::new(-1.0, 5.0), 1e-12));
        assert!(close(s.eigenvalues[1], Complex64::new(-1.0, -5.0), 1e-12));
        let (zeta, f) = s.dominant.unwrap();
        assert!((zeta - 1.0 / 26f64.sqrt()).abs() < 1e-12);
        assert!((f - 5.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-12);
    }

    #[test]
    fn companion_matrix_roots() {
        // (s+1)(s²+0.2s+4) = s³ + 1.2s² + 4.2s + 4
        let m = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -4.0, -4.2, -1.2]);
        let s = eigenvalues(&m).unwrap();
        let w = (4.0f64 - 0.01).sqrt();
        assert!(close(s.eigenvalues[0], Complex64::new(-0.1, w), 1e-10));
        assert!(close(s.eigenvalues[1], Complex64::new(-0.1, -w), 1e-10));
        assert!(close(s.eigenvalues[2], Complex64::new(-1.0, 0.0), 1e-10));
    }

    #[test]
    fn scalar_decay() {
        let sys = FnSystem::ode(1, &["a"], |x, p, out| out[0] = -p[0] * x[0]);
        let r = reduced_state_matrix(&sys, &[0.0], &[2.5]).unwrap();
        assert!((r.a[(0, 0)] + 2.5).abs() < 1e-9);
    }

    #[test]
    fn all_dynamic_is_mass_scaled_jacobian() {
        let sys = FnSystem::new(vec![2.0, 0.5], &[], |x, _, out| {
            out[0] = -x[0] + 3.0 * x[1];
            out[1] = x[0] - 4.0 * x[1];
        });
        let r = reduced_state_matrix(&sys, &[0.1, 0.2], &[]).unwrap();
        let expect = [[-0.5, 1.5], [2.0, -8.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((r.a[(i, j)] - expect[i][j]).abs() < 1e-9);
            }
        }
        assert!(r.algebraic_condition.is_none());
    }

    #[test]
    fn algebraic_elimination() {
        // ẋ = -x + y, 0 = x - 2y  =>  ẋ = -x/2
        let sys = FnSystem::new(vec![1.0, 0.0], &[], |x, _, out| {
            out[0] = -x[0] + x[1];
            out[1] = x[0] - 2.0 * x[1];
        });
        let r = reduced_state_matrix(&sys, &[0.0, 0.0], &[]).unwrap();
        assert_eq!(r.a.nrows(), 1);
        assert!((r.a[(0, 0)] + 0.5).abs() < 1e-9);
    }

    #[test]
    fn singular_algebraic_block() {
        let sys = FnSystem::new(vec![1.0, 0.0], &[], |x, _, out| {
            out[0] = -x[0] + x[1];
            out[1] = x[0];
        });
        assert!(matches!(reduced_state_matrix(&sys, &[0.0, 0.0], &[]), Err(EngineError::SingularAlgebraic { .. })));
    }
}
