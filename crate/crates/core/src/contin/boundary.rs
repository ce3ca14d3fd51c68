use rayon::prelude::*;

use super::{
    continue_branch, detect_bifurcations, with_param, BifurcationRecord, ContinError, Continuable, ContinuationSettings,
};
use crate::report::{fmt_f64, Csv};

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryRow {
    /// Value of the second parameter.
    pub value: f64,
    /// First bifurcation met along the branch, if any.
    pub first: Option<BifurcationRecord>,
    /// Why the row could not be computed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Boundary2D {
    pub param1: String,
    pub param2: String,
    pub rows: Vec<BoundaryRow>,
}

fn row<S: Continuable>(
    sys: &S,
    p: &[f64],
    param1: &str,
    settings: &ContinuationSettings,
) -> Result<Option<BifurcationRecord>, ContinError> {
    let start = sys.equilibrium(None, p)?;
    let branch = continue_branch(sys, &start, param1, settings)?;
    Ok(detect_bifurcations(sys, &branch).into_iter().next())
}

/// For every value of `param2`, continues `param1` from the base equilibrium
/// and records the first bifurcation. Rows are independent and computed in
/// parallel; a failing row is reported in place.
pub fn trace_boundary_2d<S: Continuable>(
    sys: &S,
    p0: &[f64],
    param1: &str,
    param2: &str,
    grid: &[f64],
    settings: &ContinuationSettings,
) -> Result<Boundary2D, ContinError> {
    if grid.iter().any(|v| !v.is_finite()) || grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(ContinError::Invalid("boundary grid must be finite and sorted".into()));
    }
    sys.param_index(param1)?;
    let j = sys.param_index(param2)?;
    let rows = grid
        .par_iter()
        .map(|&value| {
            let p = with_param(p0, j, value);
            match row(sys, &p, param1, settings) {
                Ok(first) => BoundaryRow { value, first, error: None },
                Err(e) => BoundaryRow { value, first: None, error: Some(e.to_string()) },
            }
        })
        .collect();
    Ok(Boundary2D { param1: param1.into(), param2: param2.into(), rows })
}

/// Boundary table `(param2, lambda, kind)`; rows without a bifurcation carry
/// `nan` and `none`, failed rows `error`.
pub fn boundary_csv(b: &Boundary2D) -> Csv {
    let mut csv = Csv::new(&[b.param2.as_str(), "lambda", "kind"]);
    for r in &b.rows {
        let (lambda, kind) = match (&r.first, &r.error) {
            (Some(rec), _) => (fmt_f64(rec.lambda), rec.kind.label()),
            (None, Some(_)) => ("nan".to_string(), "error"),
            (None, None) => ("nan".to_string(), "none"),
        };
        csv.row(&[fmt_f64(r.value), lambda, kind.to_string()]);
    }
    csv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contin::BifurcationKind;
    use crate::engine::FnSystem;

    #[test]
    fn shifted_folds() {
        // ẋ = μ - c - x²: fold at μ = c
        let sys = FnSystem::ode(1, &["mu", "c"], |x, p, out| out[0] = p[0] - p[1] - x[0] * x[0]).with_guess(vec![2.0]);
        let settings = ContinuationSettings { direction: -1.0, p_min: -5.0, ..Default::default() };
        let b = trace_boundary_2d(&sys, &[3.0, 0.0], "mu", "c", &[-0.5, 0.0, 0.5], &settings).unwrap();
        for r in &b.rows {
            let rec = r.first.as_ref().unwrap();
            assert_eq!(rec.kind, BifurcationKind::Snb);
            assert!((rec.lambda - r.value).abs() < 1e-8);
        }
        assert_eq!(boundary_csv(&b).as_str().lines().count(), 4);
    }

    #[test]
    fn empty_and_unsorted_grids() {
        let sys = FnSystem::ode(1, &["mu", "c"], |x, p, out| out[0] = p[0] - p[1] - x[0]);
        let s = ContinuationSettings::default();
        assert!(trace_boundary_2d(&sys, &[0.0, 0.0], "mu", "c", &[], &s).unwrap().rows.is_empty());
        assert!(trace_boundary_2d(&sys, &[0.0, 0.0], "mu", "c", &[1.0, 0.0], &s).is_err());
    }

    #[test]
    fn failing_row_is_recorded() {
        // no equilibrium when c > 1 for the starting μ = 1
        let sys = FnSystem::ode(1, &["mu", "c"], |x, p, out| out[0] = p[0] - p[1] - x[0] * x[0]).with_guess(vec![0.5]);
        let settings = ContinuationSettings { direction: -1.0, p_min: -5.0, ..Default::default() };
        let b = trace_boundary_2d(&sys, &[1.0, 0.0], "mu", "c", &[0.0, 2.0], &settings).unwrap();
        assert!(b.rows[0].first.is_some());
        assert!(b.rows[1].error.is_some());
    }
}
