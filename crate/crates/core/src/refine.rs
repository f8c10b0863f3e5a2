//! Time reallocation and anisotropic re-fitting of an optimized trajectory.
//!
//! A trajectory whose derivative control points break the limits is
//! stretched in time by the limits-exceeding ratio, re-initialized by a
//! boundary-constrained least-squares fit and then re-optimized against a
//! fitness term that tolerates displacement along the reference tangent
//! more than across it.

use thiserror::Error;

use crate::bspline::{self, BoundaryStates, SplineError, UniformBSpline};
use crate::objective::{pack_free, pack_grad, total_refine_cost, unpack_free, FitError, FitTarget, PenaltyConfig};
use crate::solver::{lbfgs_minimize, SolveStatus, SolverOptions};
use crate::Vec3;

/// Slack allowed when auditing derivative limits.
pub const LIMIT_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReallocationResult {
    pub r_e: f64,
    pub dt_new: f64,
}

/// Largest of `|V/v_m|`, `sqrt|A/a_m|`, `cbrt|J/j_m|` over every derivative
/// control point and axis, and 1.
pub fn limits_exceed_ratio(spline: &UniformBSpline, cfg: &PenaltyConfig) -> f64 {
    let mut r: f64 = 1.0;
    let limits = [cfg.v_max, cfg.a_max, cfg.j_max];
    for (k, lim) in limits.iter().enumerate() {
        let order = k + 1;
        if order > spline.degree() {
            break;
        }
        let Ok(d) = spline.derivative_ctrl_points(order) else { break };
        for p in d.ctrl_pts() {
            for ax in 0..3 {
                let ratio = (p[ax] / lim).abs();
                let root = match order {
                    1 => ratio,
                    2 => ratio.sqrt(),
                    _ => ratio.cbrt(),
                };
                r = r.max(root);
            }
        }
    }
    r
}

/// `dt' = r_e * dt`.
pub fn reallocate_time(spline: &UniformBSpline, r_e: f64) -> f64 {
    spline.dt() * r_e.max(1.0)
}

pub fn reallocation(spline: &UniformBSpline, cfg: &PenaltyConfig) -> ReallocationResult {
    let r_e = limits_exceed_ratio(spline, cfg);
    ReallocationResult {
        r_e,
        dt_new: reallocate_time(spline, r_e),
    }
}

/// Largest excess of any derivative control point over its limit (zero when
/// all are within limits).
pub fn max_limit_excess(spline: &UniformBSpline, cfg: &PenaltyConfig) -> f64 {
    let limits = [cfg.v_max, cfg.a_max, cfg.j_max];
    let mut worst: f64 = 0.0;
    for (k, lim) in limits.iter().enumerate() {
        let Ok(d) = spline.derivative_ctrl_points(k + 1) else { break };
        for p in d.ctrl_pts() {
            worst = worst.max(p.amax() - lim);
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOptions {
    /// Least-squares samples per control point.
    pub lsq_samples_per_ctrl: usize,
    /// Fitness samples per knot span.
    pub fit_subdivisions: usize,
    /// Re-runs with a longer knot span when the output still breaks limits.
    pub max_attempts: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            lsq_samples_per_ctrl: 2,
            fit_subdivisions: 1,
            max_attempts: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineStatus {
    /// Already within limits; returned unchanged.
    Unchanged,
    /// Re-optimized and within limits.
    Refined,
    /// Optimization did not produce a feasible result; the least-squares
    /// initialization is returned and it is feasible.
    LeastSquaresOnly,
    /// Nothing feasible was found; the last candidate is returned.
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub spline: UniformBSpline,
    pub status: RefineStatus,
    pub reallocation: ReallocationResult,
    pub attempts: usize,
    pub function_evaluations: usize,
    pub solve_status: Option<SolveStatus>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("cubic (or higher) spline required")]
    Degree,
}

/// Position, velocity and acceleration at both ends of `spline`.
pub fn boundary_of(spline: &UniformBSpline) -> Result<BoundaryStates, SplineError> {
    Ok(BoundaryStates {
        start: spline.state(spline.t0())?,
        end: spline.state(spline.t_end())?,
    })
}

/// Shape-preserving least-squares initialization with knot span `dt_new`:
/// samples of `reference` at normalized times, exact boundary states.
pub fn stretched_fit(
    reference: &UniformBSpline,
    dt_new: f64,
    boundary: &BoundaryStates,
    samples_per_ctrl: usize,
) -> Result<UniformBSpline, SplineError> {
    let n = reference.len();
    let count = (samples_per_ctrl.max(1) * n).max(2);
    let (t0, dur) = (reference.t0(), reference.duration());
    let dur_new = reference.span_count() as f64 * dt_new;
    let mut samples = Vec::with_capacity(count);
    for k in 0..count {
        let a = k as f64 / (count - 1) as f64;
        samples.push((t0 + a * dur_new, reference.evaluate(t0 + a * dur, 0)?));
    }
    bspline::boundary_constrained_lsq_fit(&samples, n, dt_new, t0, reference.degree(), boundary)
}

/// Reallocates time and re-fits `phi_s` so that every derivative control
/// point is within its limit. Boundary states of `phi_s` are kept exactly.
pub fn refine_trajectory(
    phi_s: &UniformBSpline,
    cfg: &PenaltyConfig,
    solver: &SolverOptions,
    opts: &RefineOptions,
) -> Result<RefineOutcome, RefineError> {
    let p = phi_s.degree();
    if p < 3 {
        return Err(RefineError::Degree);
    }
    let realloc = reallocation(phi_s, cfg);
    if realloc.r_e <= 1.0 {
        return Ok(RefineOutcome {
            spline: phi_s.clone(),
            status: RefineStatus::Unchanged,
            reallocation: realloc,
            attempts: 0,
            function_evaluations: 0,
            solve_status: None,
        });
    }
    let boundary = boundary_of(phi_s)?;
    let n = phi_s.len();
    let mut dt_new = realloc.dt_new;
    let mut evals = 0;
    let mut last: Option<(UniformBSpline, Option<SolveStatus>)> = None;
    for attempt in 1..=opts.max_attempts.max(1) {
        let init = stretched_fit(phi_s, dt_new, &boundary, opts.lsq_samples_per_ctrl)?;
        let target = FitTarget::new(phi_s, dt_new, opts.fit_subdivisions)?;
        let mut q = init.ctrl_pts().to_vec();
        let mut candidate = init.clone();
        let mut status = None;
        if n > 2 * p {
            let x0 = pack_free(&q, p);
            let mut work = q.clone();
            let mut obj = |x: &[f64], g: &mut [f64]| {
                unpack_free(x, &mut work, p);
                let cg = total_refine_cost(&work, dt_new, &target, p, cfg);
                pack_grad(&cg.grad, p, g);
                cg.value
            };
            match lbfgs_minimize(&mut obj, &x0, solver) {
                Ok(rep) => {
                    evals += rep.function_evaluations;
                    status = Some(rep.status);
                    if rep.x.iter().all(|v| v.is_finite()) {
                        unpack_free(&rep.x, &mut q, p);
                        candidate = init.with_ctrl_pts(q.clone())?;
                    }
                }
                Err(e) => log::warn!("refinement solve failed: {e}"),
            }
        }
        if max_limit_excess(&candidate, cfg) <= LIMIT_SLACK {
            return Ok(RefineOutcome {
                spline: candidate,
                status: RefineStatus::Refined,
                reallocation: ReallocationResult { r_e: dt_new / phi_s.dt(), dt_new },
                attempts: attempt,
                function_evaluations: evals,
                solve_status: status,
            });
        }
        if max_limit_excess(&init, cfg) <= LIMIT_SLACK {
            return Ok(RefineOutcome {
                spline: init,
                status: RefineStatus::LeastSquaresOnly,
                reallocation: ReallocationResult { r_e: dt_new / phi_s.dt(), dt_new },
                attempts: attempt,
                function_evaluations: evals,
                solve_status: status,
            });
        }
        let grow = limits_exceed_ratio(&candidate, cfg).max(1.05);
        dt_new *= grow;
        last = Some((candidate, status));
    }
    let (spline, status) = last.expect("at least one attempt");
    Ok(RefineOutcome {
        reallocation: ReallocationResult { r_e: spline.dt() / phi_s.dt(), dt_new: spline.dt() },
        spline,
        status: RefineStatus::Failed,
        attempts: opts.max_attempts.max(1),
        function_evaluations: evals,
        solve_status: status,
    })
}

/// `phi_s` stretched by its own ratio. Same shape, within limits by the
/// power law, but boundary velocity and acceleration are scaled too.
pub fn stretched_copy(phi_s: &UniformBSpline, cfg: &PenaltyConfig) -> Result<UniformBSpline, SplineError> {
    let r = limits_exceed_ratio(phi_s, cfg);
    phi_s.with_dt(reallocate_time(phi_s, r))
}

/// True when both ends are at rest, so time stretching keeps them.
pub fn boundary_at_rest(spline: &UniformBSpline, tol: f64) -> bool {
    let Ok(b) = boundary_of(spline) else { return false };
    [b.start[1], b.start[2], b.end[1], b.end[2]].iter().all(|v: &Vec3| v.norm() <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    fn cfg() -> PenaltyConfig {
        PenaltyConfig {
            v_max: 1.0,
            a_max: 2.0,
            j_max: 4.0,
            ..Default::default()
        }
    }

    #[test]
    fn ratio_arithmetic() {
        let c = PenaltyConfig { v_max: 1.0, a_max: 1.0, j_max: 1.0, ..Default::default() };
        // V = (1.5,0,0) constant: ratio 1.5
        let q: Vec<Vec3> = (0..6).map(|i| v(1.5 * i as f64, 0.0, 0.0)).collect();
        let s = UniformBSpline::new(3, 1.0, 0.0, q).unwrap();
        assert!((limits_exceed_ratio(&s, &c) - 1.5).abs() < 1e-12);
        let q = vec![v(0.0, 0.0, 0.0), v(0.0, 0.0, 0.0), v(0.0, 0.0, 0.0), v(0.0, 0.0, 0.0)];
        let s = UniformBSpline::new(3, 1.0, 0.0, q).unwrap();
        assert_eq!(limits_exceed_ratio(&s, &c), 1.0);
        // A = (0, 4) and J = (4) with a_m = j_m = 1: max(sqrt 4, cbrt 4, V/10)
        let c = PenaltyConfig { v_max: 10.0, a_max: 1.0, j_max: 1.0, ..Default::default() };
        let q = vec![v(0.0, 0.0, 0.0), v(0.0, 0.0, 0.0), v(0.0, 0.0, 0.0), v(4.0, 0.0, 0.0)];
        let s = UniformBSpline::new(3, 1.0, 0.0, q).unwrap();
        assert!((limits_exceed_ratio(&s, &c) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_example_values() {
        // max |V/v_m| = 1.5, max |A/a_m| = 4, max |J/j_m| = 8 gives 2
        let r: f64 = [1.5f64, 4.0f64.sqrt(), 8.0f64.cbrt(), 1.0].into_iter().fold(0.0, f64::max);
        assert_eq!(r, 2.0);
        let s = UniformBSpline::new(3, 0.1, 0.0, vec![v(0.0, 0.0, 0.0); 5]).unwrap();
        assert_eq!(reallocate_time(&s, 1.0), 0.1);
        assert!((reallocate_time(&s, 2.0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn power_law_gives_unit_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let q: Vec<Vec3> = (0..10)
                .map(|_| v(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
                .collect();
            let s = UniformBSpline::new(3, rng.gen_range(0.05..0.5), 0.0, q).unwrap();
            let r = reallocation(&s, &cfg());
            let s2 = s.with_dt(r.dt_new).unwrap();
            assert!((limits_exceed_ratio(&s2, &cfg()) - 1.0).abs() < 1e-9);
            assert!(max_limit_excess(&s2, &cfg()) < 1e-9);
        }
    }

    #[test]
    fn ratio_invariant_under_axis_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = PenaltyConfig { v_max: 1.0, a_max: 1.0, j_max: 1.0, ..Default::default() };
        for _ in 0..20 {
            let q: Vec<Vec3> = (0..8)
                .map(|_| v(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
                .collect();
            let perm: Vec<Vec3> = q.iter().map(|p| v(p.z, p.x, p.y)).collect();
            let a = UniformBSpline::new(3, 0.3, 0.0, q).unwrap();
            let b = UniformBSpline::new(3, 0.3, 0.0, perm).unwrap();
            assert_eq!(limits_exceed_ratio(&a, &c), limits_exceed_ratio(&b, &c));
        }
    }

    fn wiggly(dt: f64) -> UniformBSpline {
        let mut q = vec![v(0.0, 0.0, 1.0); 3];
        for i in 1..12 {
            let x = i as f64 * 0.3;
            q.push(v(x, 0.3 * (x * 2.0).sin(), 1.0));
        }
        let end = *q.last().unwrap();
        q.extend([end, end]);
        UniformBSpline::new(3, dt, 0.0, q).unwrap()
    }

    #[test]
    fn feasible_input_is_a_fixed_point() {
        let s = wiggly(2.0);
        assert_eq!(limits_exceed_ratio(&s, &cfg()), 1.0);
        let out = refine_trajectory(&s, &cfg(), &SolverOptions::default(), &RefineOptions::default()).unwrap();
        assert_eq!(out.status, RefineStatus::Unchanged);
        for t in s.sample_times(0.05) {
            assert!((out.spline.evaluate(t, 0).unwrap() - s.evaluate(t, 0).unwrap()).norm() < 1e-3);
        }
    }

    #[test]
    fn violated_limits_become_feasible() {
        let s = wiggly(0.1);
        let c = cfg();
        assert!(limits_exceed_ratio(&s, &c) > 2.0);
        let out = refine_trajectory(&s, &c, &SolverOptions::default(), &RefineOptions::default()).unwrap();
        assert!(matches!(out.status, RefineStatus::Refined | RefineStatus::LeastSquaresOnly));
        assert!(max_limit_excess(&out.spline, &c) <= LIMIT_SLACK);
        assert!(limits_exceed_ratio(&out.spline, &c) <= 1.0 + 1e-6);
        // boundary states untouched
        let (b0, b1) = (boundary_of(&s).unwrap(), boundary_of(&out.spline).unwrap());
        for k in 0..3 {
            assert!((b0.start[k] - b1.start[k]).norm() < 1e-9);
            assert!((b0.end[k] - b1.end[k]).norm() < 1e-9);
        }
        // stays close to the original shape across the tangent
        let dur_ratio = out.spline.duration() / s.duration();
        for k in 0..=100 {
            let a = k as f64 / 100.0;
            let pf = out.spline.evaluate(a * out.spline.duration(), 0).unwrap();
            let ps = s.evaluate(a * s.duration(), 0).unwrap();
            let u = s.evaluate(a * s.duration(), 1).unwrap();
            if u.norm() > 1e-6 {
                let (_, dr) = crate::objective::anisotropic_split(pf - ps, u.normalize());
                assert!(dr < c.s_f, "radial deviation {dr} at {a}");
            }
        }
        assert!(dur_ratio >= 1.0);
    }

    #[test]
    fn stretched_fit_of_exact_stretch_reproduces_shape() {
        let s = wiggly(0.2);
        let r = 1.7;
        let stretched = s.with_dt(0.2 * r).unwrap();
        let b = boundary_of(&stretched).unwrap();
        let fit = stretched_fit(&s, 0.2 * r, &b, 2).unwrap();
        for (a, b) in fit.ctrl_pts().iter().zip(stretched.ctrl_pts()) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn rest_detection() {
        assert!(boundary_at_rest(&wiggly(0.3), 1e-9));
        let q: Vec<Vec3> = (0..6).map(|i| v(i as f64, 0.0, 0.0)).collect();
        let s = UniformBSpline::new(3, 1.0, 0.0, q).unwrap();
        assert!(!boundary_at_rest(&s, 1e-9));
    }
}
