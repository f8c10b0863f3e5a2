//! The planning loop: initialize, push control points out of obstacles while
//! discovering new ones, reallocate time when limits are broken, and verify
//! a clearance pipe around the result.

use std::cell::RefCell;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bspline::{self, BoundaryStates, SplineError, UniformBSpline};
use crate::config::Config;
use crate::gridmap::{Occupancy, OccupancyGrid};
use crate::objective::{pack_free, pack_grad, total_rebound_cost, unpack_free, PenaltyConfig};
use crate::rebound::{self, ControlPointCtx, PVPair, Witness};
use crate::refine::{self, RefineOptions, RefineStatus};
use crate::solver::{self, SolveReport, SolveStatus, SolverError, SolverOptions};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReboundMode {
    /// Solve to convergence, then rediscover obstacles and restart.
    #[default]
    Restarted,
    /// Rediscover obstacles after every solver iteration.
    PerStep,
}

impl ReboundMode {
    pub fn name(self) -> &'static str {
        match self {
            ReboundMode::Restarted => "restarted",
            ReboundMode::PerStep => "per_step",
        }
    }
}

impl FromStr for ReboundMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "restarted" => Ok(ReboundMode::Restarted),
            "per_step" => Ok(ReboundMode::PerStep),
            _ => Err(format!("rebound_mode = {s:?} (expected restarted or per_step)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverKind {
    #[default]
    Lbfgs,
    Bb,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Lbfgs => "lbfgs",
            SolverKind::Bb => "bb",
        }
    }
}

impl FromStr for SolverKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lbfgs" => Ok(SolverKind::Lbfgs),
            "bb" => Ok(SolverKind::Bb),
            _ => Err(format!("solver = {s:?} (expected lbfgs or bb)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub horizon: f64,
    pub ctrl_pt_spacing: f64,
    pub degree: usize,
    pub pipe_radius: f64,
    pub replan_period: f64,
    pub max_rebound_iterations: usize,
    pub rebound_mode: ReboundMode,
    /// Solver for the obstacle-avoidance stage.
    pub solver: SolverKind,
    pub fit_subdivisions: usize,
    /// Grid resolution used when building maps from files.
    pub resolution: f64,
    pub inflation: f64,
    pub unknown_is_occupied: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 7.0,
            ctrl_pt_spacing: 0.3,
            degree: 3,
            pipe_radius: 0.1,
            replan_period: 0.5,
            max_rebound_iterations: 20,
            rebound_mode: ReboundMode::Restarted,
            solver: SolverKind::Lbfgs,
            fit_subdivisions: 1,
            resolution: 0.1,
            inflation: 0.1,
            unknown_is_occupied: false,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.ctrl_pt_spacing > 0.0 && self.horizon > self.ctrl_pt_spacing) {
            return Err("need horizon > ctrl_pt_spacing > 0".into());
        }
        if self.degree != 3 {
            return Err("only cubic splines (degree = 3) are supported".into());
        }
        if !(self.pipe_radius >= 0.0) || !(self.replan_period > 0.0) {
            return Err("pipe_radius must be >= 0 and replan_period > 0".into());
        }
        if !(self.resolution > 0.0) || !(self.inflation >= 0.0) {
            return Err("resolution must be > 0 and inflation >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub pos: Vec3,
    pub vel: Vec3,
    pub acc: Vec3,
}

impl RobotState {
    pub fn at_rest(pos: Vec3) -> Self {
        Self {
            pos,
            vel: Vec3::zeros(),
            acc: Vec3::zeros(),
        }
    }

    pub fn on(spline: &UniformBSpline, t: f64) -> Result<Self, SplineError> {
        let t = t.clamp(spline.t0(), spline.t_end());
        let [pos, vel, acc] = spline.state(t)?;
        Ok(Self { pos, vel, acc })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Ok,
    Refined,
    Fallback,
    Failed,
}

impl PlanStatus {
    pub fn is_success(self) -> bool {
        self != PlanStatus::Failed
    }

    pub fn name(self) -> &'static str {
        match self {
            PlanStatus::Ok => "ok",
            PlanStatus::Refined => "refined",
            PlanStatus::Fallback => "fallback",
            PlanStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlanStats {
    pub rebound_iterations: usize,
    pub pairs_added: usize,
    pub search_failures: usize,
    /// Objective evaluations of the obstacle-avoidance stage.
    pub rebound_evaluations: usize,
    pub refine_evaluations: usize,
    pub collision_boosts: usize,
    /// The straight initial guess failed and a grid-path guess was used.
    pub guided: bool,
    pub r_e: f64,
    /// Wall time from initialization to the final pipe check (ms).
    pub optimize_ms: f64,
    pub total_ms: f64,
}

/// Pairs of one control point at one iteration, for debug dumps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRecord {
    pub iteration: usize,
    pub index: usize,
    pub pairs: Vec<PairDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairDump {
    pub p: [f64; 3],
    pub v: [f64; 3],
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    /// `None` when planning failed.
    pub trajectory: Option<UniformBSpline>,
    pub status: PlanStatus,
    pub stats: PlanStats,
    pub message: Option<String>,
    pub pair_history: Vec<PairRecord>,
}

impl PlanOutcome {
    fn failed(stats: PlanStats, msg: impl Into<String>) -> Self {
        Self {
            trajectory: None,
            status: PlanStatus::Failed,
            stats,
            message: Some(msg.into()),
            pair_history: Vec::new(),
        }
    }
}

/// `global_goal` if within `horizon` of `pos`, else the point at distance
/// `horizon` towards it.
pub fn local_goal(pos: Vec3, global_goal: Vec3, horizon: f64) -> Vec3 {
    let d = global_goal - pos;
    let n = d.norm();
    if n <= horizon {
        global_goal
    } else {
        pos + d * (horizon / n)
    }
}

/// Moves `goal` back towards `from` until it is free in `search` and has
/// `radius` plus half a voxel of clearance in `grid`.
pub fn clear_goal(goal: Vec3, from: Vec3, grid: &OccupancyGrid, search: &OccupancyGrid, radius: f64) -> Vec3 {
    let d = from - goal;
    let n = d.norm();
    let step = grid.resolution() * 0.5;
    let mut s = 0.0;
    while s < n {
        let p = goal + d * (s / n);
        if !search.blocked(p) && grid.point_clear(p, radius + step) {
            return p;
        }
        s += step;
    }
    from
}

/// Minimum number of knot spans of an initial trajectory.
pub const MIN_SPANS: usize = 6;
/// Acceleration of the initial timing profile, as a fraction of `a_max`.
pub const INIT_ACCEL_FRACTION: f64 = 0.5;

/// Polyline with cumulative arc length.
struct Polyline {
    pts: Vec<Vec3>,
    cum: Vec<f64>,
}

impl Polyline {
    fn new(pts: Vec<Vec3>) -> Self {
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
        }
        Self { pts, cum }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn at(&self, s: f64) -> Vec3 {
        if self.pts.len() == 1 || self.length() <= 0.0 {
            return self.pts[0];
        }
        let j = self.cum.partition_point(|&c| c <= s).clamp(1, self.pts.len() - 1);
        let seg = self.cum[j] - self.cum[j - 1];
        let f = if seg > 0.0 { (s - self.cum[j - 1]) / seg } else { 0.0 };
        self.pts[j - 1] + (self.pts[j] - self.pts[j - 1]) * f.clamp(0.0, 1.0)
    }

    fn start_direction(&self) -> Option<Vec3> {
        let p = self.at(self.length().min(1e-3));
        let d = p - self.pts[0];
        (d.norm() > 1e-12).then(|| d.normalize())
    }
}

/// Travelled distance of a profile that starts at speed `v0`, moves at
/// most at `vc` with acceleration `a`, and stops after `length`. Returns
/// the total duration and the distance function.
fn stop_profile(length: f64, v0: f64, vc: f64, a: f64) -> (f64, impl Fn(f64) -> f64) {
    // phases: ramp v0 -> vp, cruise at vp, brake vp -> 0 (brake may be harder than `a`)
    let (vp, ramp_acc, brake_acc) = if v0 * v0 / (2.0 * a) >= length {
        (v0, 0.0, if length > 0.0 { v0 * v0 / (2.0 * length) } else { f64::INFINITY })
    } else {
        let peak = ((2.0 * a * length + v0 * v0) / 2.0).sqrt();
        let vp = peak.min(vc.max(v0));
        let ramp_acc = if vp >= v0 { a } else { -a };
        (vp, ramp_acc, a)
    };
    let t1 = if ramp_acc != 0.0 { (vp - v0) / ramp_acc } else { 0.0 };
    let d1 = 0.5 * (v0 + vp) * t1;
    let d3 = if brake_acc.is_finite() { vp * vp / (2.0 * brake_acc) } else { 0.0 };
    let d2 = (length - d1 - d3).max(0.0);
    let t2 = if vp > 0.0 { d2 / vp } else { 0.0 };
    let t3 = if brake_acc.is_finite() && brake_acc > 0.0 { vp / brake_acc } else { 0.0 };
    let total = t1 + t2 + t3;
    let dist = move |t: f64| {
        let t = t.clamp(0.0, total);
        if t <= t1 {
            v0 * t + 0.5 * ramp_acc * t * t
        } else if t <= t1 + t2 {
            d1 + vp * (t - t1)
        } else {
            let u = t - t1 - t2;
            (d1 + d2 + vp * u - 0.5 * brake_acc * u * u).min(length)
        }
    };
    (total, dist)
}

/// Initial trajectory from `state` to rest at `goal`, ignoring obstacles.
///
/// The path follows `prev` where it still makes progress towards the goal
/// and a straight line after that. It is timed by a profile that keeps the
/// current speed, accelerates at `INIT_ACCEL_FRACTION * a_max` up to
/// `lambda_elastic * v_max` and brakes to rest, then sampled once per knot
/// span (`ctrl_pt_spacing / v_nominal`) and turned into a spline by a
/// boundary-constrained least-squares fit. When `t_now` falls on a knot of
/// `prev`, the knot span matches and `prev` already ends at `goal`, its
/// control points are reused as they are.
pub fn find_init(
    prev: Option<&UniformBSpline>,
    t_now: f64,
    state: &RobotState,
    goal: Vec3,
    cfg: &Config,
    v_nominal: f64,
) -> Result<UniformBSpline, SplineError> {
    let p = cfg.planner.degree;
    let dt = cfg.planner.ctrl_pt_spacing / v_nominal;
    let at_rest = state.vel.norm() < 1e-9 && state.acc.norm() < 1e-9;
    if (goal - state.pos).norm() < 1e-6 && at_rest {
        return UniformBSpline::new(p, dt, t_now, vec![state.pos; p + 1]);
    }

    let usable = prev.filter(|pr| {
        t_now >= pr.t0() - 1e-9
            && t_now <= pr.t_end() + 1e-9
            && pr.degree() == p
            && pr
                .evaluate(pr.t_end(), 0)
                .map(|end| (end - goal).norm() < (state.pos - goal).norm() + 1e-9)
                .unwrap_or(false)
    });

    let mut pts = vec![state.pos];
    if let Some(pr) = usable {
        let m = (t_now - pr.t0()) / pr.dt();
        let end = pr.evaluate(pr.t_end(), 0)?;
        if (pr.dt() - dt).abs() < 1e-12
            && (m - m.round()).abs() < 1e-9
            && (end - goal).norm() < 1e-6
            && pr.len() >= m.round() as usize + 2 * p + 1
        {
            let m = m.round() as usize;
            return UniformBSpline::new(p, dt, t_now, pr.ctrl_pts()[m..].to_vec());
        }
        let step = pr.dt() / 4.0;
        let mut t = t_now + step;
        while t < pr.t_end() {
            pts.push(pr.evaluate(t, 0)?);
            t += step;
        }
        pts.push(end);
    }
    timed_fit(pts, t_now, state, goal, cfg, v_nominal)
}

/// Initial trajectory along a grid path from `state` to `goal`, shortcut
/// wherever the straight chord keeps `pipe_radius + res / 2` of clearance
/// in `grid`. `None` when `search` has no route.
pub fn guided_init(
    t_now: f64,
    state: &RobotState,
    goal: Vec3,
    grid: &OccupancyGrid,
    search: &OccupancyGrid,
    cfg: &Config,
    v_nominal: f64,
) -> Option<UniformBSpline> {
    let res = search.resolution();
    let from = if search.blocked(state.pos) {
        search.nearest_free(state.pos, 4)?
    } else {
        state.pos
    };
    let path = match search.astar_search(from, goal) {
        Ok(path) => path,
        Err(e) => e.partial().filter(|p| !p.is_empty())?.clone(),
    };
    let mut raw = vec![state.pos];
    raw.extend(path.waypoints.iter().copied());
    raw.push(goal);
    let clearance = cfg.planner.pipe_radius + 0.5 * res;
    let mut pts = vec![raw[0]];
    let mut i = 0;
    while i + 1 < raw.len() {
        let mut j = raw.len() - 1;
        while j > i + 1 && !grid.segment_free(raw[i], raw[j], clearance) {
            j -= 1;
        }
        pts.push(raw[j]);
        i = j;
    }
    timed_fit(pts, t_now, state, goal, cfg, v_nominal).ok()
}

/// Times a polyline from `state.pos` to rest at `goal` and fits a spline
/// with one knot span per `ctrl_pt_spacing / v_nominal`.
fn timed_fit(
    mut pts: Vec<Vec3>,
    t_now: f64,
    state: &RobotState,
    goal: Vec3,
    cfg: &Config,
    v_nominal: f64,
) -> Result<UniformBSpline, SplineError> {
    let p = cfg.planner.degree;
    let dt = cfg.planner.ctrl_pt_spacing / v_nominal;
    if (goal - *pts.last().unwrap()).norm() > 1e-9 {
        pts.push(goal);
    }
    let path = Polyline::new(pts);
    let pen = &cfg.penalty;
    let v0 = path.start_direction().map(|d| state.vel.dot(&d).max(0.0)).unwrap_or(0.0);
    let (total, dist) = stop_profile(
        path.length(),
        v0,
        pen.lambda_elastic * pen.v_max,
        INIT_ACCEL_FRACTION * pen.a_max,
    );
    let spans = ((total / dt).ceil() as usize).max(MIN_SPANS);
    let stretch = total / (spans as f64 * dt);
    let samples: Vec<(f64, Vec3)> = (0..=spans)
        .map(|k| {
            let t = k as f64 * dt;
            let pos = if k == spans { goal } else { path.at(dist(t * stretch)) };
            (t_now + t, pos)
        })
        .collect();
    let boundary = BoundaryStates {
        start: [state.pos, state.vel, state.acc],
        end: [goal, Vec3::zeros(), Vec3::zeros()],
    };
    bspline::boundary_constrained_lsq_fit(&samples, spans + p, dt, t_now, p, &boundary)
}

/// Pieces of at most half a voxel of travel: `(count, duration, deviation)`
/// where `deviation = max|acc| h^2 / 8` bounds the curve-to-chord distance
/// within a piece of duration `h`.
fn pieces(spline: &UniformBSpline, resolution: f64) -> (usize, f64, f64) {
    let max_norm = |k| {
        spline
            .derivative_ctrl_points(k)
            .map(|d| d.ctrl_pts().iter().map(|v| v.norm()).fold(0.0, f64::max))
            .unwrap_or(0.0)
    };
    let (vmax, amax) = (max_norm(1), max_norm(2));
    let dur = spline.duration();
    let count = if vmax > 0.0 {
        ((vmax * dur) / (0.5 * resolution)).ceil().max(1.0) as usize
    } else {
        1
    };
    let h = dur / count as f64;
    (count, h, amax * h * h / 8.0)
}

fn piece_time(spline: &UniformBSpline, k: usize, count: usize, h: f64) -> f64 {
    if k == count {
        spline.t_end()
    } else {
        spline.t0() + h * k as f64
    }
}

/// Curve pieces `(t_a, t_b)` whose chord, widened by the chord-to-curve
/// deviation bound, comes within `radius` of a blocked voxel.
pub fn pipe_violations(spline: &UniformBSpline, grid: &OccupancyGrid, radius: f64) -> Vec<(f64, f64)> {
    let (count, h, margin) = pieces(spline, grid.resolution());
    let mut out = Vec::new();
    let mut prev = spline.evaluate(spline.t0(), 0).expect("start in domain");
    for k in 1..=count {
        let (ta, tb) = (piece_time(spline, k - 1, count, h), piece_time(spline, k, count, h));
        let next = spline.evaluate(tb, 0).expect("sample in domain");
        if !grid.segment_free(prev, next, radius + margin) {
            out.push((ta, tb));
        }
        prev = next;
    }
    out
}

/// True iff a pipe of `radius` around the curve is free of blocked voxels.
pub fn pipe_collision_check(spline: &UniformBSpline, grid: &OccupancyGrid, radius: f64) -> bool {
    pipe_violations(spline, grid, radius).is_empty()
}

/// Grid the rebound stage works on: `grid` dilated by the pipe radius plus
/// one voxel, so that leaving it implies passing the pipe check in most
/// cases.
pub fn search_grid(grid: &OccupancyGrid, pipe_radius: f64) -> OccupancyGrid {
    grid.dilated(pipe_radius + grid.resolution())
}

/// Control points to push out, each with a [`Witness`].
///
/// A control point blocked in `search` is its own witness. Otherwise every
/// blocked curve sample is attributed to the free control point whose
/// Greville abscissa is nearest, keeping the closest sample. When nothing is
/// blocked in `search` but the pipe check on `grid` fails, the midpoints of
/// the failing pieces serve as witnesses.
pub fn collision_witnesses(
    spline: &UniformBSpline,
    grid: &OccupancyGrid,
    search: &OccupancyGrid,
    radius: f64,
    n_fixed: usize,
) -> Vec<Option<Witness>> {
    let n = spline.len();
    let mut out: Vec<Option<Witness>> = vec![None; n];
    if n <= 2 * n_fixed {
        return out;
    }
    let (lo, hi) = (n_fixed, n - n_fixed - 1);
    let mut best = vec![f64::INFINITY; n];
    let mut attribute = |t: f64, at: Vec3, out: &mut Vec<Option<Witness>>| {
        let i = spline.nearest_ctrl_index(t).clamp(lo, hi);
        let gap = (t - spline.greville(i)).abs();
        if gap < best[i] {
            best[i] = gap;
            let tangent = spline.evaluate(t, 1).unwrap_or_else(|_| Vec3::zeros());
            out[i] = Some(Witness { at, tangent });
        }
    };
    let (count, h, _) = pieces(spline, search.resolution());
    for k in 0..=count {
        let t = piece_time(spline, k, count, h);
        let at = spline.evaluate(t, 0).expect("sample in domain");
        if search.blocked(at) {
            attribute(t, at, &mut out);
        }
    }
    if out.iter().all(Option::is_none) {
        for (ta, tb) in pipe_violations(spline, grid, radius) {
            let t = 0.5 * (ta + tb);
            let at = spline.evaluate(t, 0).expect("sample in domain");
            attribute(t, at, &mut out);
        }
    }
    for i in lo..=hi {
        let q = spline.ctrl_pts()[i];
        if search.blocked(q) {
            let tangent = spline.ctrl_point_tangent(i).unwrap_or_else(|_| Vec3::zeros());
            out[i] = Some(Witness { at: q, tangent });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReboundResult {
    pub spline: UniformBSpline,
    pub ctx: Vec<ControlPointCtx>,
    pub collision_free: bool,
    pub iterations: usize,
    pub function_evaluations: usize,
    pub pairs_added: usize,
    pub search_failures: usize,
    pub collision_boosts: usize,
    /// Status and iteration count of each solver run.
    pub solves: Vec<(SolveStatus, usize)>,
    pub pair_history: Vec<PairRecord>,
    pub message: Option<String>,
}

fn run_solver(
    kind: SolverKind,
    obj: &mut dyn FnMut(&[f64], &mut [f64]) -> f64,
    x0: &[f64],
    opts: &SolverOptions,
    cb: &mut solver::IterationCallback<'_>,
) -> Result<SolveReport, SolverError> {
    match kind {
        SolverKind::Lbfgs => solver::lbfgs_minimize_with(obj, x0, opts, cb),
        SolverKind::Bb => solver::bb_minimize_with(obj, x0, opts, cb),
    }
}

fn snapshot(iteration: usize, ctx: &[ControlPointCtx], out: &mut Vec<PairRecord>) {
    for (index, c) in ctx.iter().enumerate() {
        if c.pairs.is_empty() {
            continue;
        }
        out.push(PairRecord {
            iteration,
            index,
            pairs: c
                .pairs
                .iter()
                .map(|pr| PairDump {
                    p: [pr.p.x, pr.p.y, pr.p.z],
                    v: [pr.v.x, pr.v.y, pr.v.z],
                    d: rebound::distance(c.position, pr),
                })
                .collect(),
        });
    }
}

/// Pushes the control points of `init` out of obstacles, discovering new
/// obstacles as the curve moves. Pairs come from `search` (see
/// [`search_grid`]); the loop ends when the pipe check on `grid` passes.
pub fn rebound_optimize(
    init: &UniformBSpline,
    grid: &OccupancyGrid,
    search: &OccupancyGrid,
    cfg: &Config,
    record_pairs: bool,
) -> ReboundResult {
    let p = init.degree();
    let n = init.len();
    let dt = init.dt();
    let radius = cfg.planner.pipe_radius;
    let ctx = RefCell::new(rebound::contexts_from_points(init.ctrl_pts(), p));
    let fixed: Vec<bool> = ctx.borrow().iter().map(|c| c.fixed).collect();
    let mut penalty: PenaltyConfig = cfg.penalty.clone();
    let mut res = ReboundResult {
        spline: init.clone(),
        ctx: Vec::new(),
        collision_free: false,
        iterations: 0,
        function_evaluations: 0,
        pairs_added: 0,
        search_failures: 0,
        collision_boosts: 0,
        solves: Vec::new(),
        pair_history: Vec::new(),
        message: None,
    };
    let to_spline = |c: &[ControlPointCtx]| {
        init.with_ctrl_pts(c.iter().map(|x| x.position).collect())
            .expect("same layout")
    };

    // (collision free, pairs added, failed searches)
    let discover = |ctx: &mut Vec<ControlPointCtx>| -> Result<(bool, usize, usize), String> {
        let spline = to_spline(ctx);
        if pipe_collision_check(&spline, grid, radius) {
            return Ok((true, 0, 0));
        }
        let witnesses = collision_witnesses(&spline, grid, search, radius, p);
        let flags: Vec<bool> = witnesses.iter().map(Option::is_some).collect();
        let segs = rebound::segments_from_flags(&flags, &fixed).map_err(|e| e.to_string())?;
        let rep = rebound::add_obstacle_info_witnessed(search, ctx, dt, &segs, &witnesses);
        Ok((false, rep.pairs_added, rep.search_failures))
    };

    if n <= 2 * p {
        res.collision_free = pipe_collision_check(init, grid, radius);
        res.ctx = ctx.into_inner();
        return res;
    }

    let max_iter = cfg.planner.max_rebound_iterations;
    while res.iterations < max_iter {
        let (free, added) = match discover(&mut ctx.borrow_mut()) {
            Ok((free, added, failed)) => {
                res.pairs_added += added;
                res.search_failures += failed;
                (free, added)
            }
            Err(msg) => {
                res.message = Some(msg);
                break;
            }
        };
        if record_pairs {
            snapshot(res.iterations, &ctx.borrow(), &mut res.pair_history);
        }
        if free {
            res.collision_free = true;
            break;
        }
        if added == 0 {
            // stuck against known obstacles: strengthen the push
            penalty.lambda_collision *= 2.0;
            res.collision_boosts += 1;
        }
        res.iterations += 1;

        let x0 = pack_free(&ctx.borrow().iter().map(|c| c.position).collect::<Vec<_>>(), p);
        let pairs: Vec<Vec<PVPair>> = ctx.borrow().iter().map(|c| c.pairs.clone()).collect();
        let pairs = RefCell::new(pairs);
        let mut work: Vec<Vec3> = ctx.borrow().iter().map(|c| c.position).collect();
        let pen = penalty.clone();
        let mut obj = |x: &[f64], g: &mut [f64]| {
            unpack_free(x, &mut work, p);
            let cg = total_rebound_cost(&work, &pairs.borrow(), dt, p, &pen);
            pack_grad(&cg.grad, p, g);
            cg.value
        };
        let mut inner_err = None;
        let (mut inner_added, mut inner_failed) = (0, 0);
        let mode = cfg.planner.rebound_mode;
        let mut cb = |_: usize, x: &[f64], _: f64| -> bool {
            if mode == ReboundMode::Restarted {
                return true;
            }
            let mut c = ctx.borrow_mut();
            let mut pos: Vec<Vec3> = c.iter().map(|c| c.position).collect();
            unpack_free(x, &mut pos, p);
            for (ci, pi) in c.iter_mut().zip(&pos) {
                ci.position = *pi;
            }
            match discover(&mut c) {
                Ok((true, _, _)) => false,
                Ok((false, added, failed)) => {
                    inner_added += added;
                    inner_failed += failed;
                    if added > 0 {
                        *pairs.borrow_mut() = c.iter().map(|c| c.pairs.clone()).collect();
                        false
                    } else {
                        true
                    }
                }
                Err(e) => {
                    inner_err = Some(e);
                    false
                }
            }
        };
        let report = run_solver(cfg.planner.solver, &mut obj, &x0, &cfg.solver, &mut cb);
        match report {
            Ok(rep) => {
                res.function_evaluations += rep.function_evaluations;
                res.solves.push((rep.status, rep.iterations));
                let mut c = ctx.borrow_mut();
                let mut pos: Vec<Vec3> = c.iter().map(|c| c.position).collect();
                unpack_free(&rep.x, &mut pos, p);
                for (ci, pi) in c.iter_mut().zip(&pos) {
                    ci.position = *pi;
                }
            }
            Err(e) => {
                res.message = Some(format!("solver: {e}"));
                break;
            }
        }
        res.pairs_added += inner_added;
        res.search_failures += inner_failed;
        if let Some(e) = inner_err {
            res.message = Some(e);
            break;
        }
    }
    let ctx = ctx.into_inner();
    res.spline = to_spline(&ctx);
    if !res.collision_free && res.message.is_none() {
        res.collision_free = pipe_collision_check(&res.spline, grid, radius);
        if !res.collision_free {
            res.message = Some(format!("still colliding after {} iterations", res.iterations));
        }
    }
    res.ctx = ctx;
    res
}

/// Plans from `state` towards `global_goal`, remembering the last
/// successful trajectory for reuse.
#[derive(Debug, Clone)]
pub struct Planner {
    pub config: Config,
    pub record_pairs: bool,
    /// Multiplies the initial knot span; below 1 it provokes limit
    /// violations for the refinement stage to fix.
    pub init_dt_scale: f64,
    prev: Option<UniformBSpline>,
    search: Option<(GridKey, OccupancyGrid)>,
}

type GridKey = (usize, [usize; 3], [u64; 5], bool);

fn grid_key(grid: &OccupancyGrid, pipe_radius: f64) -> GridKey {
    let o = grid.origin();
    (
        grid.occupied_count(),
        grid.dims(),
        [o.x, o.y, o.z, grid.resolution(), pipe_radius].map(f64::to_bits),
        grid.unknown_is_occupied,
    )
}

impl Planner {
    pub fn new(config: Config) -> Self {
        Self {
            config,
            record_pairs: false,
            init_dt_scale: 1.0,
            prev: None,
            search: None,
        }
    }

    pub fn reset(&mut self) {
        self.prev = None;
    }

    pub fn previous(&self) -> Option<&UniformBSpline> {
        self.prev.as_ref()
    }

    pub fn plan(&mut self, t_now: f64, state: &RobotState, global_goal: Vec3, grid: &OccupancyGrid) -> PlanOutcome {
        let started = Instant::now();
        let cfg = &self.config;
        let mut stats = PlanStats::default();
        let finite = |v: &Vec3| v.iter().all(|c| c.is_finite());
        if !finite(&state.pos) || !finite(&state.vel) || !finite(&state.acc) || !finite(&global_goal) {
            return PlanOutcome::failed(stats, "non-finite input");
        }
        if grid.is_occupied(state.pos) == Occupancy::Occupied {
            return PlanOutcome::failed(stats, "start is occupied");
        }
        let radius = cfg.planner.pipe_radius;
        let key = grid_key(grid, radius);
        if self.search.as_ref().map(|(k, _)| *k != key).unwrap_or(true) {
            self.search = Some((key, search_grid(grid, radius)));
        }
        let search = &self.search.as_ref().expect("just set").1;
        let goal = local_goal(state.pos, global_goal, cfg.planner.horizon);
        let goal = clear_goal(goal, state.pos, grid, search, radius);
        let v_nominal = cfg.penalty.v_max / self.init_dt_scale;
        let init = match find_init(self.prev.as_ref(), t_now, state, goal, cfg, v_nominal) {
            Ok(s) => s,
            Err(e) => return PlanOutcome::failed(stats, format!("initialization: {e}")),
        };

        let opt_start = Instant::now();
        let mut rb = rebound_optimize(&init, grid, search, cfg, self.record_pairs);
        if !rb.collision_free {
            if let Some(guided) = guided_init(t_now, state, goal, grid, search, cfg, v_nominal) {
                let mut retry = rebound_optimize(&guided, grid, search, cfg, self.record_pairs);
                retry.function_evaluations += rb.function_evaluations;
                if retry.collision_free {
                    stats.guided = true;
                    rb = retry;
                } else {
                    rb.function_evaluations = retry.function_evaluations;
                }
            }
        }
        stats.rebound_iterations = rb.iterations;
        stats.pairs_added = rb.pairs_added;
        stats.search_failures = rb.search_failures;
        stats.rebound_evaluations = rb.function_evaluations;
        stats.collision_boosts = rb.collision_boosts;
        let finish = |mut stats: PlanStats, traj: Option<UniformBSpline>, status: PlanStatus, msg: Option<String>, hist: Vec<PairRecord>| {
            stats.optimize_ms = opt_start.elapsed().as_secs_f64() * 1e3;
            stats.total_ms = started.elapsed().as_secs_f64() * 1e3;
            PlanOutcome {
                trajectory: traj,
                status,
                stats,
                message: msg,
                pair_history: hist,
            }
        };
        if !rb.collision_free {
            let msg = rb.message.unwrap_or_else(|| "rebound failed".into());
            return finish(stats, None, PlanStatus::Failed, Some(msg), rb.pair_history);
        }
        let phi_s = rb.spline;
        let r_e = refine::limits_exceed_ratio(&phi_s, &cfg.penalty);
        stats.r_e = r_e;
        let (traj, status, msg) = if r_e <= 1.0 {
            (Some(phi_s), PlanStatus::Ok, None)
        } else {
            let opts = RefineOptions {
                fit_subdivisions: cfg.planner.fit_subdivisions,
                ..RefineOptions::default()
            };
            let refined = refine::refine_trajectory(&phi_s, &cfg.penalty, &cfg.solver, &opts);
            let mut chosen = None;
            if let Ok(out) = &refined {
                stats.refine_evaluations = out.function_evaluations;
                if matches!(out.status, RefineStatus::Refined | RefineStatus::LeastSquaresOnly)
                    && pipe_collision_check(&out.spline, grid, radius)
                {
                    chosen = Some(out.spline.clone());
                }
            }
            match chosen {
                Some(s) => (Some(s), PlanStatus::Refined, None),
                None if refine::boundary_at_rest(&phi_s, 1e-9) => match refine::stretched_copy(&phi_s, &cfg.penalty) {
                    Ok(s) if pipe_collision_check(&s, grid, radius) => (Some(s), PlanStatus::Fallback, None),
                    _ => (None, PlanStatus::Failed, Some("refinement failed".to_string())),
                },
                None => (None, PlanStatus::Failed, Some("refinement failed while moving".to_string())),
            }
        };
        if let Some(t) = &traj {
            self.prev = Some(t.clone());
        }
        finish(stats, traj, status, msg, rb.pair_history)
    }
}

/// One-shot plan without reuse.
pub fn plan(state: &RobotState, goal: Vec3, grid: &OccupancyGrid, cfg: &Config) -> PlanOutcome {
    Planner::new(cfg.clone()).plan(0.0, state, goal, grid)
}
