//! Random forest maps, receding-horizon runs and the CSV report.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::bspline::UniformBSpline;
use crate::config::Config;
use crate::gridmap::{GridError, Obstacle, OccupancyGrid};
use crate::planner::{PlanStatus, Planner, RobotState, SolverKind};
use crate::refine;
use crate::Vec3;

/// Kept free of obstacles around start and goal (m).
pub const CLEARANCE_RADIUS: f64 = 0.5;
pub const MIN_OBSTACLE_RADIUS: f64 = 0.1;
pub const MAX_OBSTACLE_RADIUS: f64 = 0.4;
/// Distance at which the robot counts as arrived (m).
pub const GOAL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("density must be finite and >= 0, got {0}")]
    Density(f64),
    #[error("could not place obstacles clear of start and goal")]
    Crowded,
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub runs: usize,
    /// Obstacles per square metre of floor.
    pub density: f64,
    pub seed: u64,
    pub arena: [f64; 3],
    pub start: Vec3,
    pub goal: Vec3,
    pub solver: SolverKind,
    pub config: Config,
    /// Zero `opt_ms` in the report so that identical seeds give identical bytes.
    pub record_timing: bool,
    pub threads: usize,
    /// Give up a run after this much simulated time (s).
    pub max_flight_time: f64,
    /// See [`Planner::init_dt_scale`].
    pub init_dt_scale: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            runs: 100,
            density: 0.5,
            seed: 0,
            arena: [20.0, 10.0, 3.0],
            start: Vec3::new(2.5, 5.0, 1.0),
            goal: Vec3::new(17.5, 5.0, 1.0),
            solver: SolverKind::Lbfgs,
            config: Config::default(),
            record_timing: true,
            threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            max_flight_time: 60.0,
            init_dt_scale: 1.0,
        }
    }
}

/// Vertical cylinders spanning the arena height, their count Poisson
/// distributed with mean `density * area`, none within
/// [`CLEARANCE_RADIUS`] of the start or goal column.
pub fn random_obstacles(spec: &BenchmarkSpec, seed: u64) -> Result<Vec<Obstacle>, BenchError> {
    if !(spec.density >= 0.0) || !spec.density.is_finite() {
        return Err(BenchError::Density(spec.density));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [w, h, top] = spec.arena;
    let mean = spec.density * w * h;
    let count = if mean > 0.0 {
        Poisson::new(mean).expect("positive mean").sample(&mut rng) as usize
    } else {
        0
    };
    let keep_clear = |x: f64, y: f64, r: f64| {
        [spec.start, spec.goal]
            .iter()
            .all(|c| ((x - c.x).powi(2) + (y - c.y).powi(2)).sqrt() > CLEARANCE_RADIUS + r)
    };
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * (count + 1) {
            return Err(BenchError::Crowded);
        }
        let x = rng.gen_range(0.0..w);
        let y = rng.gen_range(0.0..h);
        let radius = rng.gen_range(MIN_OBSTACLE_RADIUS..MAX_OBSTACLE_RADIUS);
        if keep_clear(x, y, radius) {
            out.push(Obstacle::Cylinder {
                x,
                y,
                radius,
                z_min: 0.0,
                z_max: top,
            });
        }
    }
    Ok(out)
}

/// Grid over the arena holding [`random_obstacles`]; space outside the
/// arena counts as blocked.
pub fn gen_random_map(spec: &BenchmarkSpec, seed: u64) -> Result<OccupancyGrid, BenchError> {
    let obstacles = random_obstacles(spec, seed)?;
    let res = spec.config.planner.resolution;
    let dims = spec.arena.map(|d| (d / res).round().max(1.0) as usize);
    let mut grid = OccupancyGrid::build(&obstacles, res, Vec3::zeros(), dims, spec.config.planner.inflation)?;
    grid.unknown_is_occupied = true;
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunMetrics {
    pub success: bool,
    pub flight_time: f64,
    pub length: f64,
    /// Integral of squared jerk.
    pub energy: f64,
    /// Mean optimize time per plan (ms).
    pub optimize_ms: f64,
    /// Mean objective evaluations of the obstacle-avoidance stage, over the
    /// plans in which that stage ran.
    pub function_evaluations: f64,
    pub v_avg: f64,
    pub v_max: f64,
}

const GAUSS4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
];

/// Subintervals per knot span for arc length quadrature.
const LENGTH_SUBDIVISIONS: usize = 8;

/// `(length, energy, max speed)` of `spline` restricted to `[a, b]`.
fn integrate(spline: &UniformBSpline, a: f64, b: f64) -> (f64, f64, f64) {
    let (mut length, mut energy, mut vmax) = (0.0, 0.0, 0.0f64);
    if b <= a {
        return (0.0, 0.0, 0.0);
    }
    let dt = spline.dt();
    let first = ((a - spline.t0()) / dt).floor().max(0.0) as usize;
    let mut k = first;
    loop {
        let lo = (spline.t0() + k as f64 * dt).max(a);
        let hi = (spline.t0() + (k + 1) as f64 * dt).min(b);
        if lo >= b {
            break;
        }
        if hi > lo {
            let sub = (hi - lo) / LENGTH_SUBDIVISIONS as f64;
            for s in 0..LENGTH_SUBDIVISIONS {
                let (sa, sb) = (lo + sub * s as f64, lo + sub * (s + 1) as f64);
                let (mid, half) = (0.5 * (sa + sb), 0.5 * (sb - sa));
                for (x, w) in GAUSS4 {
                    let t = mid + half * x;
                    let v = spline.evaluate(t, 1).expect("in domain").norm();
                    let j = spline.evaluate(t, 3).expect("in domain").norm_squared();
                    length += w * half * v;
                    energy += w * half * j;
                    vmax = vmax.max(v);
                }
            }
        }
        k += 1;
    }
    (length, energy, vmax)
}

/// Duration, length, energy and speed statistics of a whole trajectory.
pub fn metrics(spline: &UniformBSpline) -> RunMetrics {
    metrics_over(&[(spline.clone(), spline.t0(), spline.t_end())])
}

/// As [`metrics`] for a flown sequence of `(trajectory, from, to)` pieces.
pub fn metrics_over(pieces: &[(UniformBSpline, f64, f64)]) -> RunMetrics {
    let mut m = RunMetrics::default();
    for (s, a, b) in pieces {
        let (l, e, v) = integrate(s, *a, *b);
        m.flight_time += b - a;
        m.length += l;
        m.energy += e;
        m.v_max = m.v_max.max(v);
    }
    m.v_avg = if m.flight_time > 0.0 { m.length / m.flight_time } else { 0.0 };
    m
}

/// One receding-horizon flight.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub metrics: RunMetrics,
    /// Every trajectory the planner emitted with a non-failed status.
    pub emitted: Vec<UniformBSpline>,
    pub plans: usize,
    pub failed_plans: usize,
    pub statuses: Vec<PlanStatus>,
    pub reason: Option<String>,
}

/// Flies from start to goal on a perfect tracker, replanning every
/// `replan_period` until the goal is reached, planning fails at rest, or
/// `max_flight_time` passes.
pub fn run_single(spec: &BenchmarkSpec, grid: &OccupancyGrid, seed: u64) -> RunRecord {
    let mut cfg = spec.config.clone();
    cfg.planner.solver = spec.solver;
    let period = cfg.planner.replan_period;
    let mut planner = Planner::new(cfg.clone());
    planner.init_dt_scale = spec.init_dt_scale;
    let mut rec = RunRecord {
        seed,
        metrics: RunMetrics::default(),
        emitted: Vec::new(),
        plans: 0,
        failed_plans: 0,
        statuses: Vec::new(),
        reason: None,
    };
    let mut pieces: Vec<(UniformBSpline, f64, f64)> = Vec::new();
    let mut t = 0.0;
    let mut state = RobotState::at_rest(spec.start);
    let mut current: Option<UniformBSpline> = None;
    let (mut opt_ms, mut evals, mut eval_plans) = (0.0, 0.0, 0usize);
    let done = loop {
        if t > spec.max_flight_time {
            rec.reason = Some("flight time limit".into());
            break false;
        }
        let out = planner.plan(t, &state, spec.goal, grid);
        rec.plans += 1;
        rec.statuses.push(out.status);
        opt_ms += out.stats.optimize_ms;
        if out.stats.rebound_iterations > 0 {
            evals += out.stats.rebound_evaluations as f64;
            eval_plans += 1;
        }
        match out.trajectory {
            Some(traj) => {
                if refine::max_limit_excess(&traj, &cfg.penalty) > refine::LIMIT_SLACK {
                    rec.reason = Some("emitted trajectory violates limits".into());
                    break false;
                }
                rec.emitted.push(traj.clone());
                current = Some(traj);
            }
            None => {
                rec.failed_plans += 1;
                let moving = current.as_ref().is_some_and(|c| t < c.t_end());
                if !moving {
                    rec.reason = out.message.or(Some("planning failed at rest".into()));
                    break false;
                }
            }
        }
        let traj = current.as_ref().expect("a trajectory is active");
        let end = traj.evaluate(traj.t_end(), 0).expect("in domain");
        let arrives = (end - spec.goal).norm() < GOAL_TOLERANCE;
        if arrives && traj.t_end() <= t + period {
            pieces.push((traj.clone(), t, traj.t_end()));
            break true;
        }
        let next = (t + period).min(traj.t_end().max(t));
        if next > t {
            pieces.push((traj.clone(), t, next));
        }
        state = RobotState::on(traj, next).expect("in domain");
        if next >= traj.t_end() {
            state.vel = Vec3::zeros();
            state.acc = Vec3::zeros();
        }
        t = if next > t { next } else { t + period };
    };
    let mut m = metrics_over(&pieces);
    m.success = done;
    m.optimize_ms = if spec.record_timing { opt_ms / rec.plans.max(1) as f64 } else { 0.0 };
    m.function_evaluations = if eval_plans > 0 { evals / eval_plans as f64 } else { 0.0 };
    rec.metrics = m;
    rec
}

/// Runs `spec.runs` flights on maps seeded `seed, seed + 1, ...`.
pub fn run_benchmark(spec: &BenchmarkSpec) -> Result<Vec<RunRecord>, BenchError> {
    let seeds: Vec<u64> = (0..spec.runs as u64).map(|i| spec.seed.wrapping_add(i)).collect();
    let threads = spec.threads.clamp(1, seeds.len().max(1));
    let chunks: Vec<Vec<u64>> = (0..threads)
        .map(|k| seeds.iter().copied().skip(k).step_by(threads).collect())
        .collect();
    let results: Vec<Result<Vec<RunRecord>, BenchError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|&seed| {
                            let grid = gen_random_map(spec, seed)?;
                            Ok(run_single(spec, &grid, seed))
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
    });
    let mut all = Vec::with_capacity(seeds.len());
    for r in results {
        all.extend(r?);
    }
    all.sort_by_key(|r| r.seed);
    Ok(all)
}

pub const CSV_HEADER: &str = "seed,success,t_flight,length,energy,opt_ms,func_evals,v_avg,v_max";

fn row(out: &mut String, label: &str, success: &str, m: &RunMetrics) {
    writeln!(
        out,
        "{label},{success},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        m.flight_time, m.length, m.energy, m.optimize_ms, m.function_evaluations, m.v_avg, m.v_max
    )
    .expect("write to string");
}

/// Success rate and min/avg/max of each column over successful runs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Summary {
    pub runs: usize,
    pub success_rate: f64,
    pub min: RunMetrics,
    pub avg: RunMetrics,
    pub max: RunMetrics,
}

pub fn summarize(records: &[RunRecord]) -> Summary {
    let ok: Vec<&RunMetrics> = records.iter().map(|r| &r.metrics).filter(|m| m.success).collect();
    let mut s = Summary {
        runs: records.len(),
        success_rate: if records.is_empty() { 0.0 } else { ok.len() as f64 / records.len() as f64 },
        ..Default::default()
    };
    if ok.is_empty() {
        return s;
    }
    let cols = |m: &RunMetrics| {
        [m.flight_time, m.length, m.energy, m.optimize_ms, m.function_evaluations, m.v_avg, m.v_max]
    };
    let set = |m: &mut RunMetrics, c: [f64; 7]| {
        [m.flight_time, m.length, m.energy, m.optimize_ms, m.function_evaluations, m.v_avg, m.v_max] = c;
        m.success = true;
    };
    let mut lo = [f64::INFINITY; 7];
    let mut hi = [f64::NEG_INFINITY; 7];
    let mut sum = [0.0; 7];
    for m in &ok {
        for (k, v) in cols(m).into_iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
            sum[k] += v;
        }
    }
    set(&mut s.min, lo);
    set(&mut s.max, hi);
    set(&mut s.avg, sum.map(|v| v / ok.len() as f64));
    s
}

/// Per-run rows, then `min`, `avg` and `max` rows whose success column is
/// the success rate.
pub fn report_csv(records: &[RunRecord]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        row(&mut out, &r.seed.to_string(), if r.metrics.success { "1" } else { "0" }, &r.metrics);
    }
    let s = summarize(records);
    let rate = format!("{:.4}", s.success_rate);
    row(&mut out, "min", &rate, &s.min);
    row(&mut out, "avg", &rate, &s.avg);
    row(&mut out, "max", &rate, &s.max);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(density: f64) -> BenchmarkSpec {
        BenchmarkSpec {
            runs: 4,
            density,
            arena: [10.0, 6.0, 3.0],
            start: Vec3::new(1.5, 3.0, 1.0),
            goal: Vec3::new(8.5, 3.0, 1.0),
            threads: 2,
            record_timing: false,
            ..BenchmarkSpec::default()
        }
    }

    #[test]
    fn zero_density_is_empty() {
        let spec = small(0.0);
        assert!(random_obstacles(&spec, 3).unwrap().is_empty());
        assert_eq!(gen_random_map(&spec, 3).unwrap().occupied_count(), 0);
    }

    #[test]
    fn same_seed_same_map() {
        let spec = small(0.5);
        assert_eq!(gen_random_map(&spec, 9).unwrap(), gen_random_map(&spec, 9).unwrap());
        assert_ne!(random_obstacles(&spec, 9).unwrap(), random_obstacles(&spec, 10).unwrap());
    }

    #[test]
    fn measured_density_matches_request() {
        let spec = BenchmarkSpec::default();
        let area = spec.arena[0] * spec.arena[1];
        let total: usize = (0..100).map(|s| random_obstacles(&spec, s).unwrap().len()).sum();
        let measured = total as f64 / (100.0 * area);
        assert!((measured / spec.density - 1.0).abs() < 0.1, "{measured}");
    }

    #[test]
    fn clearance_discs_are_free() {
        let spec = BenchmarkSpec { density: 2.0, ..BenchmarkSpec::default() };
        for seed in 0..20 {
            for o in random_obstacles(&spec, seed).unwrap() {
                let Obstacle::Cylinder { x, y, radius, .. } = o else { panic!() };
                for c in [spec.start, spec.goal] {
                    assert!(((x - c.x).powi(2) + (y - c.y).powi(2)).sqrt() > CLEARANCE_RADIUS + radius);
                }
            }
        }
    }

    #[test]
    fn crowded_arena_is_an_error() {
        let spec = BenchmarkSpec {
            arena: [0.8, 0.8, 1.0],
            start: Vec3::new(0.4, 0.4, 0.5),
            goal: Vec3::new(0.4, 0.4, 0.5),
            density: 50.0,
            ..BenchmarkSpec::default()
        };
        assert!(matches!(random_obstacles(&spec, 0), Err(BenchError::Crowded)));
    }

    #[test]
    fn straight_line_metrics() {
        let pts: Vec<Vec3> = (0..12).map(|i| Vec3::new(0.5 * i as f64 - 0.5, 0.0, 0.0)).collect();
        let s = UniformBSpline::new(3, 0.25, 0.0, pts).unwrap();
        let m = metrics(&s);
        assert!(m.energy.abs() < 1e-12);
        let a = s.evaluate(s.t0(), 0).unwrap();
        let b = s.evaluate(s.t_end(), 0).unwrap();
        assert!((m.length - (b - a).norm()).abs() < 1e-9);
        assert!((m.flight_time - s.duration()).abs() < 1e-12);
        assert!((m.v_max - 2.0).abs() < 1e-9 && (m.v_avg - 2.0).abs() < 1e-9);
    }

    #[test]
    fn energy_matches_jerk_control_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let pts: Vec<Vec3> = (0..10)
                .map(|_| Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
                .collect();
            let s = UniformBSpline::new(3, rng.gen_range(0.1..0.6), 0.0, pts).unwrap();
            let j = s.derivative_ctrl_points(3).unwrap();
            let closed: f64 = j.ctrl_pts().iter().map(|v| v.norm_squared() * s.dt()).sum();
            let m = metrics(&s);
            assert!((m.energy - closed).abs() <= 1e-6 * closed);
        }
    }

    #[test]
    fn empty_maps_always_succeed() {
        let spec = small(0.0);
        let recs = run_benchmark(&spec).unwrap();
        assert!(recs.iter().all(|r| r.metrics.success), "{:?}", recs.iter().map(|r| &r.reason).collect::<Vec<_>>());
        let d = (spec.goal - spec.start).norm();
        for r in &recs {
            assert!(r.metrics.length >= d - 1e-6);
        }
    }

    #[test]
    fn report_is_deterministic() {
        let spec = small(0.3);
        let a = report_csv(&run_benchmark(&spec).unwrap());
        let b = report_csv(&run_benchmark(&BenchmarkSpec { threads: 1, ..spec }).unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with(CSV_HEADER));
        assert_eq!(a.lines().count(), 1 + 4 + 3);
    }
}
