//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion; exits nonzero if any fails.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adnlab::cfreq::{cf_from_trajectory, decompose_converter_cf, pll_internal_frequency};
use adnlab::contin::{
    continue_branch, detect_bifurcations, limit_cycle_amplitude, trace_boundary_2d, BifurcationKind, Continuable,
    ContinuationSettings,
};
use adnlab::converter::pll_jacobian;
use adnlab::engine::{eigenvalues, jacobian_fd, reduced_state_matrix, DaeSystem, FnSystem};
use adnlab::run::{run, Command, RunOptions};
use adnlab::scenario::{load_scenario, Scenario, ValKind};
use adnlab::secondary::{run_recursive, SecondaryController, SecondaryStop};
use adnlab::smoothlim::{hard_clip, SmoothLimiter};
use adnlab::system::GridSystem;
use nalgebra::DMatrix;
use num_complex::Complex64;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn scenario(name: &str) -> Scenario {
    load_scenario(scenario_path(name)).expect("bundled scenario loads")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// First bifurcation on the `lambda` branch of a scenario.
fn first_bifurcation(sc: &Scenario) -> Result<(BifurcationKind, f64), String> {
    let sys = GridSystem::new(sc.to_model().map_err(e2s)?, &["lambda"]).map_err(e2s)?;
    let p = sys.base_params().to_vec();
    let start = sys.solve_equilibrium(None, &p).map_err(e2s)?;
    let settings = ContinuationSettings::from(&sc.analysis.continuation);
    let branch = continue_branch(&sys, &start, "lambda", &settings).map_err(e2s)?;
    let rec = detect_bifurcations(&sys, &branch).into_iter().next().ok_or("no bifurcation on the branch")?;
    Ok((rec.kind, rec.lambda))
}

fn analytic_nose() -> Check {
    let started = Instant::now();
    let sc = scenario("two_bus_sweep.json");
    let p0 = sc.loads[0].p0;
    let (kind, lambda) = first_bifurcation(&sc)?;
    ensure(kind == BifurcationKind::Snb, || format!("first bifurcation is {kind}"))?;
    ensure((lambda * p0 - 1.0).abs() <= 5e-3, || format!("nose at {lambda}"))?;

    let sys = GridSystem::new(sc.to_model().map_err(e2s)?, &["lambda", "branch.L12.x"]).map_err(e2s)?;
    let b = sc.analysis.boundary.as_ref().ok_or("sweep scenario has no boundary block")?;
    let settings = ContinuationSettings::from(&sc.analysis.continuation);
    let sweep = trace_boundary_2d(&sys, sys.base_params(), "lambda", "branch.L12.x", &b.grid, &settings).map_err(e2s)?;
    let mut worst: f64 = 0.0;
    for r in &sweep.rows {
        let rec = r.first.as_ref().ok_or_else(|| format!("X = {}: {:?}", r.value, r.error))?;
        let exact = 1.0 / (2.0 * r.value);
        worst = worst.max((rec.lambda * p0 - exact).abs() / exact);
    }
    ensure(worst <= 0.01, || format!("sweep relative error {worst:.2e}"))?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1} s"))?;
    Ok(format!("lambda* = {lambda:.8}, sweep error {worst:.1e}, {secs:.2} s"))
}

fn normal_forms() -> Check {
    let fold = FnSystem::ode(1, &["mu"], |x, p, out| out[0] = p[0] - x[0] * x[0]).with_guess(vec![1.0]);
    let start = fold.equilibrium(Some(&[1.0]), &[1.0]).map_err(e2s)?;
    let settings = ContinuationSettings { direction: -1.0, p_min: -1.0, p_max: 2.0, ..Default::default() };
    let branch = continue_branch(&fold, &start, "mu", &settings).map_err(e2s)?;
    let snb = detect_bifurcations(&fold, &branch).into_iter().next().ok_or("fold not found")?;
    ensure(snb.kind == BifurcationKind::Snb && snb.lambda.abs() <= 1e-8, || format!("fold {} at {:e}", snb.kind, snb.lambda))?;

    let hopf = FnSystem::ode(2, &["mu"], |x, p, out| {
        let r2 = x[0] * x[0] + x[1] * x[1];
        out[0] = p[0] * x[0] - x[1] - x[0] * r2;
        out[1] = x[0] + p[0] * x[1] - x[1] * r2;
    });
    let start = hopf.equilibrium(Some(&[0.0, 0.0]), &[-0.5]).map_err(e2s)?;
    let settings = ContinuationSettings { p_min: -1.0, p_max: 0.5, ..Default::default() };
    let branch = continue_branch(&hopf, &start, "mu", &settings).map_err(e2s)?;
    let hb = detect_bifurcations(&hopf, &branch).into_iter().next().ok_or("Hopf not found")?;
    ensure(hb.kind == BifurcationKind::Hopf && hb.lambda.abs() <= 1e-8, || format!("Hopf {} at {:e}", hb.kind, hb.lambda))?;
    let amp = limit_cycle_amplitude(&hopf, &hb, &[0.04], 0).map_err(e2s)?;
    let exact = 0.04f64.sqrt();
    ensure((amp - exact).abs() <= 0.05 * exact, || format!("amplitude {amp}"))?;
    Ok(format!("fold at {:.1e}, Hopf at {:.1e}, amplitude {amp:.4}", snb.lambda, hb.lambda))
}

fn smooth_limit() -> Check {
    let limit = 1.5;
    let grid: Vec<f64> = (0..=60_000).map(|i| -3.0 * limit + 6.0 * limit * i as f64 / 60_000.0).collect();
    let mut errors = Vec::new();
    for k in [1.0, 2.0, 5.0, 10.0, 20.0, 50.0] {
        let lim = SmoothLimiter::new(limit, k).ok_or("limiter rejected")?;
        errors.push(grid.iter().map(|&x| (hard_clip(limit, x) - lim.sat(x)).abs()).fold(0.0, f64::max));
    }
    ensure(errors.windows(2).all(|w| w[1] <= w[0]), || format!("errors not monotone: {errors:?}"))?;
    let last = *errors.last().unwrap();
    ensure(last < 1e-4 * limit, || format!("error at k = 50 is {last:e}"))?;
    let lim = SmoothLimiter::new(limit, 10.0).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..360 {
        let z = Complex64::from_polar(0.1 + 0.05 * i as f64, i as f64 * PI / 180.0 - PI + 0.01);
        let s = lim.sat_vector(z);
        worst = worst.max((s / z).arg().abs());
    }
    ensure(worst <= 1e-12, || format!("angle error {worst:e}"))?;
    Ok(format!("error at k = 50: {last:.2e}, angle error {worst:.1e}"))
}

fn linearization() -> Check {
    let mut sc = scenario("gfl_feeder.json");
    sc.gfl[0].kq = 0.0;
    let sys = GridSystem::new(sc.to_model().map_err(e2s)?, &[]).map_err(e2s)?;
    let eq = sys.solve_equilibrium(None, &[]).map_err(e2s)?;
    let r = reduced_state_matrix(&sys, &eq.x, &[]).map_err(e2s)?;
    let spec = eigenvalues(&r.a).map_err(e2s)?;
    let sigma = spec.rightmost_re;
    ensure(sigma < 0.0 && spec.eigenvalues[0].im == 0.0, || format!("rightmost eigenvalue {}", spec.eigenvalues[0]))?;

    // perturb along the rightmost eigenvector and fit the decay of the
    // difference to the unperturbed run
    let n = r.a.nrows();
    let svd = (&r.a - DMatrix::identity(n, n) * sigma).svd(false, true);
    let vt = svd.v_t.ok_or("svd failed")?;
    let imin = svd.singular_values.iamin();
    let mut x0 = eq.x.clone();
    for (j, &i) in r.dynamic.iter().enumerate() {
        x0[i] += 1e-4 * vt[(imin, j)];
    }
    let pert = sys.simulate(&x0, &[], 0.8, 1e-4).map_err(e2s)?;
    let base = sys.simulate(&eq.x, &[], 0.8, 1e-4).map_err(e2s)?;
    let (mut ts, mut ls) = (Vec::new(), Vec::new());
    for i in (0..pert.len()).step_by(50) {
        if pert.t[i] < 0.1 {
            continue;
        }
        let d: f64 = r.dynamic.iter().map(|&k| (pert.x[i][k] - base.x[i][k]).powi(2)).sum::<f64>().sqrt();
        ts.push(pert.t[i]);
        ls.push(d.ln());
    }
    let m = ts.len() as f64;
    let (tm, lm) = (ts.iter().sum::<f64>() / m, ls.iter().sum::<f64>() / m);
    let fit =
        ts.iter().zip(&ls).map(|(t, l)| (t - tm) * (l - lm)).sum::<f64>() / ts.iter().map(|t| (t - tm).powi(2)).sum::<f64>();
    let rel = (fit - sigma).abs() / sigma.abs();
    ensure(rel <= 0.05, || format!("fitted {fit} vs eigenvalue {sigma}"))?;

    // PLL rows of the finite-difference Jacobian against the analytic partials
    let jac = jacobian_fd(&sys, &eq.x, &[]).map_err(e2s)?;
    let o = sys.gfl_offset(0);
    let b = sys.model().gfl[0].bus;
    let vb = sys.bus_offset(b);
    let an = pll_jacobian(&sys.model().gfl[0], &sys.gfl_state(&eq.x, 0), sys.bus_voltage(&eq.x, b));
    let cols = [o, o + 1, vb, vb + 1];
    let mut pll_err: f64 = 0.0;
    for (row, an_row) in an.iter().enumerate() {
        let scale = an_row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (c, &col) in cols.iter().enumerate() {
            pll_err = pll_err.max((jac[(o + row, col)] - an_row[c]).abs() / scale);
        }
    }
    ensure(pll_err <= 1e-5, || format!("PLL rows differ by {pll_err:e}"))?;

    let lim = SmoothLimiter::new(1.2, 10.0).unwrap();
    let mut sat_err: f64 = 0.0;
    for i in 0..200 {
        let x = -3.0 + 0.0301 * i as f64;
        let h = 1e-6;
        let fd = (lim.sat(x + h) - lim.sat(x - h)) / (2.0 * h);
        sat_err = sat_err.max((fd - lim.sat_slope(x)).abs() / lim.sat_slope(x).abs().max(1e-3));
    }
    ensure(sat_err <= 1e-5, || format!("sat slope differs by {sat_err:e}"))?;
    Ok(format!("fit {fit:.4} vs {sigma:.4} ({:.2}%), PLL rows {pll_err:.1e}, sat {sat_err:.1e}", 100.0 * rel))
}

fn reactive_support() -> Check {
    let mut sc = scenario("gfl_feeder.json");
    sc.gfl[0].kq = 0.0;
    let (k0, l0) = first_bifurcation(&sc)?;
    sc.gfl[0].kq = 2.0;
    let (k2, l2) = first_bifurcation(&sc)?;
    ensure(l2 > l0, || format!("kq = 2 gives {l2}, kq = 0 gives {l0}"))?;
    Ok(format!("kq = 0: {k0} at {l0:.5}; kq = 2: {k2} at {l2:.5}"))
}

fn dval_qval() -> Check {
    let mut worst: f64 = 0.0;
    for lambda in [0.6, 0.8, 1.0, 1.2, 1.4] {
        let mut solved = Vec::new();
        for mode in [ValKind::Quasi, ValKind::Dynamic] {
            let mut sc = scenario("val_feeder.json");
            sc.lambda = lambda;
            sc.gfl[0].val.mode = mode;
            sc.gfl[0].val.b_v = -1.5;
            let sys = GridSystem::new(sc.to_model().map_err(e2s)?, &[]).map_err(e2s)?;
            // start each solve away from the power-flow guess
            let mut guess = sys.initial_guess(&[]).map_err(e2s)?;
            for (i, v) in guess.iter_mut().enumerate() {
                *v += if i % 2 == 0 { 0.02 } else { -0.02 };
            }
            let eq = sys.solve_equilibrium(Some(&guess), &[]).map_err(e2s)?;
            solved.push((sys.state_names(), eq.x));
        }
        let (q, d) = (&solved[0], &solved[1]);
        for (name, v) in q.0.iter().zip(&q.1) {
            let j = d.0.iter().position(|m| m == name).ok_or_else(|| format!("state {name} missing"))?;
            worst = worst.max((v - d.1[j]).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("equilibria differ by {worst:e}"))?;
    Ok(format!("largest state difference {worst:.1e} pu over 5 loadings"))
}

fn val_support() -> Check {
    let mut lines = Vec::new();
    for r in [0.1, 0.2, 0.3, 0.4, 0.5] {
        let mut out = Vec::new();
        for mode in [ValKind::Off, ValKind::Quasi] {
            let mut sc = scenario("val_feeder.json");
            sc.branches[0].r = r;
            sc.gfl[0].val.mode = mode;
            let sys = GridSystem::new(sc.to_model().map_err(e2s)?, &[]).map_err(e2s)?;
            let eq = sys.solve_equilibrium(None, &[]).map_err(e2s)?;
            let dev = (1.0 - sys.bus_voltage(&eq.x, 1).norm()).abs();
            let (_, lambda) = first_bifurcation(&sc)?;
            out.push((dev, lambda));
        }
        let ((d_off, l_off), (d_val, l_val)) = (out[0], out[1]);
        ensure(d_val < d_off && l_val > l_off, || {
            format!("r = {r}: deviation {d_val:.4} vs {d_off:.4}, margin {l_val:.4} vs {l_off:.4}")
        })?;
        lines.push(format!("{l_off:.2}->{l_val:.2}"));
    }
    Ok(format!("margins over r = 0.1..0.5: {}", lines.join(", ")))
}

fn secondary() -> Check {
    let started = Instant::now();
    let sc = scenario("feeder4_secondary.json");
    let ctrl = SecondaryController::from_scenario(&sc).map_err(e2s)?;
    let h = run_recursive(&ctrl, &ctrl.initial_gains()).map_err(e2s)?;
    let first = &h.records[0];
    let last = h.last();
    ensure((first.max_deviation - 0.05).abs() < 0.005, || format!("initial deviation {}", first.max_deviation))?;
    ensure(h.stop == SecondaryStop::Converged && last.max_deviation <= 0.01, || {
        format!("{:?} at {}", h.stop, last.max_deviation)
    })?;
    ensure(h.records.len() <= 20, || format!("{} iterations", h.records.len()))?;
    ensure(h.records.windows(2).all(|w| w[1].objective <= w[0].objective), || "objective increased".into())?;
    for rec in &h.records {
        for (g, (lo, hi)) in rec.gains.iter().zip(&ctrl.boxes) {
            ensure(lo <= g && g <= hi, || format!("gain {g} outside [{lo}, {hi}]"))?;
        }
    }
    let buses = &ctrl.system().model().names.buses;
    let idx = |id: &str| buses.iter().position(|b| b == id).unwrap();
    let (b3, b4) = (idx("B3"), idx("B4"));
    let (v3, v4) = (first.snapshot.voltages[b3], first.snapshot.voltages[b4]);
    ensure(v3 < 1.0 && v4 > 1.0, || format!("not a mixed case: v3 = {v3}, v4 = {v4}"))?;
    let (w3, w4) = (last.snapshot.voltages[b3], last.snapshot.voltages[b4]);
    ensure((w3 - 1.0).abs() < (v3 - 1.0).abs() && (w4 - 1.0).abs() < (v4 - 1.0).abs(), || format!("v3 {w3}, v4 {w4}"))?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "deviation {:.4} -> {:.4} in {} iterations; B3 {v3:.3} -> {w3:.3}, B4 {v4:.3} -> {w4:.3}",
        first.max_deviation,
        last.max_deviation,
        h.records.len()
    ))
}

fn grid_step(name: &str) -> Result<(GridSystem, Vec<f64>, adnlab::engine::Trajectory), String> {
    let sc = scenario(name);
    let sys = GridSystem::new(sc.to_model().map_err(e2s)?, &["grid.dw"]).map_err(e2s)?;
    let eq = sys.solve_equilibrium(None, &[0.0]).map_err(e2s)?;
    let p = vec![0.5];
    let traj = sys.simulate(&eq.x, &p, 1.5, 1e-4).map_err(e2s)?;
    Ok((sys, p, traj))
}

fn complex_frequency() -> Check {
    let w0 = 100.0 * PI;
    let t: Vec<f64> = (0..200).map(|i| i as f64 * 1e-4).collect();
    let steady = cf_from_trajectory(&t, &vec![Complex64::from_polar(0.95, 0.4); t.len()], w0, 1, "v").map_err(e2s)?;
    let flat = steady.rho.iter().map(|r| r.abs()).chain(steady.omega.iter().map(|w| (w - w0).abs())).fold(0.0, f64::max);
    ensure(flat <= 1e-9, || format!("steady phasor error {flat:e}"))?;

    // cubic phase: the three-point rule is second order
    let chirp_err = |h: f64| -> Result<f64, String> {
        let t: Vec<f64> = (0..=(0.1 / h).round() as usize).map(|i| i as f64 * h).collect();
        let v: Vec<Complex64> = t.iter().map(|t| Complex64::from_polar(1.0, 300.0 * t * t * t)).collect();
        let s = cf_from_trajectory(&t, &v, 0.0, 1, "v").map_err(e2s)?;
        Ok(t.iter().zip(&s.omega).map(|(t, w)| (w - 900.0 * t * t).abs()).fold(0.0, f64::max))
    };
    let (e1, e2) = (chirp_err(1e-3)?, chirp_err(5e-4)?);
    ensure(e1 / e2 > 3.5, || format!("chirp errors {e1:e}, {e2:e}"))?;

    let mut additivity: f64 = 0.0;
    for (name, conv) in [("gfl_feeder.json", "C1"), ("gfm_feeder.json", "G1")] {
        let (sys, p, traj) = grid_step(name)?;
        let d = decompose_converter_cf(&sys, &traj, &p, conv, 1).map_err(e2s)?;
        additivity = additivity.max(d.additivity_residual());
    }
    ensure(additivity < 1e-6, || format!("additivity residual {additivity:e}"))?;

    let (sys, p, traj) = grid_step("gfl_feeder.json")?;
    let b = sys.model().gfl[0].bus;
    let v: Vec<Complex64> = traj.x.iter().map(|x| sys.bus_voltage(x, b)).collect();
    let bus = cf_from_trajectory(&traj.t, &v, sys.model_at(&p).map_err(e2s)?.omega_frame(), 1, "bus").map_err(e2s)?;
    let pll = pll_internal_frequency(&sys, &traj, &p, 0).map_err(e2s)?;
    let gap: Vec<f64> = pll.iter().zip(&bus.omega).map(|(a, b)| (a - b).abs()).collect();
    let transient = gap.iter().take(gap.len() / 10).fold(0.0f64, |a, g| a.max(*g));
    let settled = *gap.last().unwrap();
    ensure(transient > 1e-2, || format!("PLL tracks the bus exactly during the step ({transient:e})"))?;
    ensure(settled <= 1e-4, || format!("PLL settles {settled:e} rad/s away"))?;
    Ok(format!(
        "steady {flat:.0e}, chirp order {:.2}, additivity {additivity:.1e}, PLL gap {transient:.2} -> {settled:.1e} rad/s",
        (e1 / e2).log2()
    ))
}

fn determinism() -> Check {
    let jobs = [
        ("two_bus.json", Command::Equilibrium),
        ("two_bus.json", Command::Continue),
        ("two_bus_sweep.json", Command::Boundary2d),
        ("gfl_feeder.json", Command::Continue),
        ("gfl_feeder.json", Command::Simulate),
        ("gfl_feeder.json", Command::Cf),
        ("gfm_feeder.json", Command::Cf),
        ("val_feeder.json", Command::Continue),
        ("feeder4_secondary.json", Command::Secondary),
    ];
    let opts = RunOptions { steps: Some(3000), quiet: true, ..Default::default() };
    let mut files = 0;
    for (name, cmd) in jobs {
        let sc = scenario(name);
        let dirs = [tempfile::tempdir().map_err(e2s)?, tempfile::tempdir().map_err(e2s)?];
        let manifests: Vec<_> = dirs.iter().map(|d| run(cmd, &sc, d.path(), &opts)).collect::<Result<_, _>>().map_err(e2s)?;
        for out in &manifests[0].outputs {
            let a = std::fs::read(dirs[0].path().join(&out.file)).map_err(e2s)?;
            let b = std::fs::read(dirs[1].path().join(&out.file)).map_err(e2s)?;
            ensure(!a.is_empty() && a == b, || format!("{name} {}: {} differs", cmd.name(), out.file))?;
            files += 1;
        }
        ensure(manifests[0].outputs == manifests[1].outputs, || format!("{name} {}: manifests differ", cmd.name()))?;
    }
    Ok(format!("{files} CSV files identical across repeated runs"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("analytic nose point", analytic_nose),
        ("bifurcation normal forms", normal_forms),
        ("smooth-limit convergence", smooth_limit),
        ("linearization consistency", linearization),
        ("reactive support widens margins", reactive_support),
        ("DVAL/QVAL steady-state equivalence", dval_qval),
        ("VAL voltage support", val_support),
        ("secondary controller end to end", secondary),
        ("complex frequency", complex_frequency),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (title, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2}. {title}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2}. {title}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
