use num_complex::Complex64;

use super::{correct, local, spectrum_of, with_param, Branch, BranchPoint, ContinError, Continuable};
use crate::engine::{EngineError, SpectrumReport, OMEGA_MIN};
use crate::report::{fmt_f64, Csv};

const SIB_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BifurcationKind {
    /// Saddle-node.
    Snb,
    /// Hopf.
    Hopf,
    /// Limit-induced: a limiter reaches rated capacity as stability changes.
    Lib,
    /// Singularity-induced candidate: the algebraic block loses rank.
    Sib,
}

impl BifurcationKind {
    pub fn label(self) -> &'static str {
        match self {
            BifurcationKind::Snb => "SNB",
            BifurcationKind::Hopf => "HB",
            BifurcationKind::Lib => "LIB",
            BifurcationKind::Sib => "SIB",
        }
    }
}

impl std::fmt::Display for BifurcationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BifurcationRecord {
    pub kind: BifurcationKind,
    pub lambda: f64,
    pub x: Vec<f64>,
    pub s: f64,
    /// Eigenvalue(s) crossing the imaginary axis; for a Hopf point the member
    /// with positive imaginary part.
    pub eigenvalues: Vec<Complex64>,
    /// Width in the parameter of the final bracket.
    pub tolerance: f64,
    /// Index `i` of the bracketing branch interval `[i, i + 1]`.
    pub interval: usize,
    /// Limiter responsible for a LIB.
    pub limiter: Option<usize>,
}

fn crosses(a: f64, b: f64) -> bool {
    (a < 0.0) != (b < 0.0)
}

fn spectra(pts: &[BranchPoint], i: usize) -> Option<(&SpectrumReport, &SpectrumReport)> {
    Some((pts[i].spectrum.as_ref()?, pts[i + 1].spectrum.as_ref()?))
}

fn near(v: &[usize], i: usize) -> Option<usize> {
    v.iter().copied().find(|&j| j + 1 >= i && j <= i + 1)
}

fn interpolate(a: &BranchPoint, b: &BranchPoint, ga: f64, gb: f64) -> (f64, Vec<f64>, f64) {
    let w = if ga != gb { (ga / (ga - gb)).clamp(0.0, 1.0) } else { 0.5 };
    let x = a.x.iter().zip(&b.x).map(|(u, v)| u + w * (v - u)).collect();
    (a.lambda + w * (b.lambda - a.lambda), x, a.s + w * (b.s - a.s))
}

/// Complex eigenvalue (positive imaginary part) nearest to `reference`.
fn tracked_pair(s: &SpectrumReport, reference: Complex64) -> Option<Complex64> {
    s.eigenvalues
        .iter()
        .filter(|z| z.im > OMEGA_MIN)
        .min_by(|a, b| (**a - reference).norm().total_cmp(&(**b - reference).norm()))
        .copied()
}

/// The pair that crosses in interval `i`: the unstable pair nearest the
/// axis at whichever end has more unstable complex eigenvalues.
fn crossing_pair(pts: &[BranchPoint], i: usize) -> Option<Complex64> {
    let (sa, sb) = spectra(pts, i)?;
    let s = if sb.unstable_complex() > sa.unstable_complex() { sb } else { sa };
    s.eigenvalues
        .iter()
        .filter(|w| w.im > OMEGA_MIN && w.re > 0.0)
        .min_by(|a, b| a.re.total_cmp(&b.re))
        .copied()
        .or_else(|| s.rightmost_pair())
}

fn critical_real(s: &SpectrumReport) -> Option<Complex64> {
    s.critical_real().map(|r| Complex64::new(r, 0.0))
}

/// Scans consecutive branch points for qualitative changes.
///
/// * SNB: the count of unstable real eigenvalues changes and `dλ/ds` changes
///   sign within one interval of it.
/// * HB: the count of unstable complex eigenvalues changes.
/// * LIB: a limiter activity crosses 1 within one interval of a change in
///   the number of unstable eigenvalues; that stability change is then
///   attributed to the limit instead of being reported as SNB or HB.
/// * SIB: the algebraic block condition estimate rises above 1e12.
///
/// Records carry linearly interpolated estimates; use
/// [`locate_bifurcation`] to refine them.
pub fn classify_bifurcations(branch: &Branch) -> Vec<BifurcationRecord> {
    let pts = &branch.points;
    let mut out = Vec::new();
    if pts.len() < 2 {
        return out;
    }
    let last = pts.len() - 1;
    let mut stab = Vec::new();
    let mut real = Vec::new();
    let mut cplx = Vec::new();
    let mut turn = Vec::new();
    for i in 0..last {
        if crosses(pts[i].dlambda_ds, pts[i + 1].dlambda_ds) {
            turn.push(i);
        }
        if let Some((sa, sb)) = spectra(pts, i) {
            if sa.unstable() != sb.unstable() {
                stab.push(i);
            }
            if sa.unstable_real() != sb.unstable_real() {
                real.push(i);
            }
            if sa.unstable_complex() != sb.unstable_complex() {
                cplx.push(i);
            }
        }
    }

    let mut explained = Vec::new();
    for i in 0..last {
        let (a, b) = (&pts[i], &pts[i + 1]);
        for k in 0..a.activity.len().min(b.activity.len()) {
            let (ga, gb) = (a.activity[k] - 1.0, b.activity[k] - 1.0);
            if !crosses(ga, gb) {
                continue;
            }
            if let Some(j) = near(&stab, i) {
                explained.push(j);
                let (lambda, x, s) = interpolate(a, b, ga, gb);
                let eig = spectra(pts, j)
                    .and_then(|(sa, _)| if cplx.contains(&j) { crossing_pair(pts, j) } else { critical_real(sa) })
                    .into_iter()
                    .collect();
                out.push(BifurcationRecord {
                    kind: BifurcationKind::Lib,
                    lambda,
                    x,
                    s,
                    eigenvalues: eig,
                    tolerance: (b.lambda - a.lambda).abs(),
                    interval: i,
                    limiter: Some(k),
                });
            }
        }
    }

    for &j in &turn {
        let Some(i) = near(&real, j) else { continue };
        if explained.contains(&i) {
            continue;
        }
        let (a, b) = (&pts[j], &pts[j + 1]);
        let (lambda, x, s) = interpolate(a, b, a.dlambda_ds, b.dlambda_ds);
        let eig = pts[i].spectrum.as_ref().and_then(critical_real).into_iter().collect();
        out.push(BifurcationRecord {
            kind: BifurcationKind::Snb,
            lambda,
            x,
            s,
            eigenvalues: eig,
            tolerance: (b.lambda - a.lambda).abs(),
            interval: j,
            limiter: None,
        });
    }

    for &i in &cplx {
        if explained.contains(&i) {
            continue;
        }
        let (a, b) = (&pts[i], &pts[i + 1]);
        let z = crossing_pair(pts, i);
        let (ga, gb) = match (z, spectra(pts, i)) {
            (Some(z), Some((sa, sb))) => (tracked_pair(sa, z).map_or(-1.0, |w| w.re), tracked_pair(sb, z).map_or(1.0, |w| w.re)),
            _ => (-1.0, 1.0),
        };
        let (lambda, x, s) = interpolate(a, b, ga, gb);
        out.push(BifurcationRecord {
            kind: BifurcationKind::Hopf,
            lambda,
            x,
            s,
            eigenvalues: z.into_iter().collect(),
            tolerance: (b.lambda - a.lambda).abs(),
            interval: i,
            limiter: None,
        });
    }

    for i in 0..last {
        let ca = pts[i].algebraic_condition.unwrap_or(0.0);
        let cb = pts[i + 1].algebraic_condition.unwrap_or(0.0);
        if ca <= SIB_CONDITION && cb > SIB_CONDITION {
            let b = &pts[i + 1];
            out.push(BifurcationRecord {
                kind: BifurcationKind::Sib,
                lambda: b.lambda,
                x: b.x.clone(),
                s: b.s,
                eigenvalues: Vec::new(),
                tolerance: (b.lambda - pts[i].lambda).abs(),
                interval: i,
                limiter: None,
            });
        }
    }

    out.sort_by(|a, b| a.interval.cmp(&b.interval).then(a.kind.cmp(&b.kind)));
    out
}

struct Probe {
    y: Vec<f64>,
    g: f64,
    spectrum: Option<SpectrumReport>,
}

/// Evaluates the kind's test function at the point of the branch through
/// the hyperplane `d·(y - y_pred) = 0`.
fn probe<S: Continuable>(
    sys: &S,
    branch: &Branch,
    y_pred: &[f64],
    d: &[f64],
    kind: BifurcationKind,
    limiter: Option<usize>,
    track: &mut Option<Complex64>,
) -> Result<Probe, EngineError> {
    let n = sys.dim();
    let (y, _, _) = correct(sys, y_pred, &branch.p, branch.index, d, 1e-10, 12)?;
    let loc = local(sys, &y, &branch.p, branch.index, d)?;
    let q = with_param(&branch.p, branch.index, y[n]);
    let (spectrum, cond) = spectrum_of(&loc.jac, &sys.mass(&q))?;
    let g = match kind {
        BifurcationKind::Snb => loc.tangent[n],
        BifurcationKind::Hopf => {
            let s = spectrum.as_ref().ok_or(EngineError::SingularAlgebraic { condition: cond.unwrap_or(f64::INFINITY) })?;
            let z = match track {
                Some(r) => tracked_pair(s, *r),
                None => s.rightmost_pair(),
            }
            .ok_or(EngineError::Eigen)?;
            *track = Some(z);
            z.re
        }
        BifurcationKind::Lib => {
            let k = limiter.unwrap_or(0);
            let a = sys.activity(&y[..n], &q)?;
            a.get(k).copied().ok_or(EngineError::Singular("limiter index out of range"))? - 1.0
        }
        BifurcationKind::Sib => cond.map_or(0.0, |c| c.log10() - SIB_CONDITION.log10()),
    };
    Ok(Probe { y, g, spectrum })
}

/// Refines a bifurcation between branch points `interval` and
/// `interval + 1` by an Illinois (modified regula falsi) search along the
/// chord, re-solving the equilibrium on every probe.
pub fn locate_bifurcation<S: Continuable>(
    sys: &S,
    branch: &Branch,
    interval: usize,
    kind: BifurcationKind,
    limiter: Option<usize>,
) -> Result<BifurcationRecord, ContinError> {
    let pts = &branch.points;
    if interval + 1 >= pts.len() {
        return Err(ContinError::Invalid(format!("bracket {interval} is outside the branch")));
    }
    let n = sys.dim();
    let ya: Vec<f64> = pts[interval].x.iter().copied().chain([pts[interval].lambda]).collect();
    let yb: Vec<f64> = pts[interval + 1].x.iter().copied().chain([pts[interval + 1].lambda]).collect();
    let d: Vec<f64> = yb.iter().zip(&ya).map(|(b, a)| b - a).collect();
    let len = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    let at = |theta: f64| -> Vec<f64> { ya.iter().zip(&d).map(|(a, v)| a + theta * v).collect() };

    let mut track = None;
    if kind == BifurcationKind::Hopf {
        track = crossing_pair(pts, interval);
    }
    let mut pa = probe(sys, branch, &ya, &d, kind, limiter, &mut track)?;
    let mut pb = probe(sys, branch, &yb, &d, kind, limiter, &mut track)?;
    if !crosses(pa.g, pb.g) {
        return Err(ContinError::NoSignChange(pa.g, pb.g));
    }
    let (mut ta, mut tb) = (0.0, 1.0);
    let (mut ga, mut gb) = (pa.g, pb.g);
    let mut side = 0;
    for _ in 0..100 {
        let width = (tb - ta) * len;
        let dl = (pa.y[n] - pb.y[n]).abs();
        if width <= 1e-10 * len.max(1.0) || (dl <= 1e-12 * pa.y[n].abs().max(1.0) && kind != BifurcationKind::Snb) {
            break;
        }
        let mut t = (ta * gb - tb * ga) / (gb - ga);
        if !(t > ta && t < tb) {
            t = 0.5 * (ta + tb);
        }
        let pm = probe(sys, branch, &at(t), &d, kind, limiter, &mut track)?;
        if pm.g == 0.0 {
            pa = Probe { y: pm.y.clone(), g: 0.0, spectrum: pm.spectrum.clone() };
            pb = pm;
            break;
        }
        if crosses(pm.g, gb) {
            ta = t;
            ga = pm.g;
            pa = pm;
            if side == 1 {
                gb *= 0.5;
            }
            side = 1;
        } else {
            tb = t;
            gb = pm.g;
            pb = pm;
            if side == -1 {
                ga *= 0.5;
            }
            side = -1;
        }
    }
    let tolerance = (pa.y[n] - pb.y[n]).abs();
    let best = if pa.g.abs() <= pb.g.abs() { &pa } else { &pb };
    let eigenvalues = match (&best.spectrum, kind) {
        (Some(_), BifurcationKind::Hopf) => track.into_iter().collect(),
        (Some(s), _) => s.critical_real().map(|r| Complex64::new(r, 0.0)).into_iter().collect(),
        (None, _) => Vec::new(),
    };
    let theta = if best.y == pa.y { ta } else { tb };
    Ok(BifurcationRecord {
        kind,
        lambda: best.y[n],
        x: best.y[..n].to_vec(),
        s: pts[interval].s + theta * (pts[interval + 1].s - pts[interval].s),
        eigenvalues,
        tolerance,
        interval,
        limiter,
    })
}

/// Classifies the branch and refines every record; a record whose
/// refinement fails is kept with its interpolated estimate.
pub fn detect_bifurcations<S: Continuable>(sys: &S, branch: &Branch) -> Vec<BifurcationRecord> {
    classify_bifurcations(branch)
        .into_iter()
        .map(|r| locate_bifurcation(sys, branch, r.interval, r.kind, r.limiter).unwrap_or(r))
        .collect()
}

/// Bifurcation table: kind, critical parameter, crossing eigenvalue and the
/// localization tolerance.
pub fn bifurcations_csv(records: &[BifurcationRecord]) -> Csv {
    let mut csv = Csv::new(&["kind", "lambda", "eig_re", "eig_im", "tolerance"]);
    for r in records {
        let z = r.eigenvalues.first().copied().unwrap_or_default();
        csv.row(&[r.kind.label().to_string(), fmt_f64(r.lambda), fmt_f64(z.re), fmt_f64(z.im), fmt_f64(r.tolerance)]);
    }
    csv
}
