//! Anchor/direction pairs attached to control points.
//!
//! A control point that sits inside an obstacle gets a pair `{p, v}`: `p` is
//! taken from a collision-free guiding path around the obstacle and `v` is
//! the unit direction from the control point towards `p`. The signed
//! distance `d = (Q - p) . v` then acts as a local linear distance field for
//! that obstacle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline;
use crate::gridmap::{GridPath, Occupancy, OccupancyGrid};
use crate::Vec3;

/// Distance under which an anchor is considered to coincide with its
/// control point.
pub const DEGENERATE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PVPair {
    pub p: Vec3,
    pub v: Vec3,
}

impl PVPair {
    /// Pair anchored at `p` with direction from `q` to `p`.
    pub fn toward(q: Vec3, p: Vec3) -> Result<Self, ReboundError> {
        let d = p - q;
        let n = d.norm();
        if !(n > DEGENERATE_EPS) {
            return Err(ReboundError::DegenerateDirection(q));
        }
        Ok(Self { p, v: d / n })
    }

    pub fn distance(&self, q: Vec3) -> f64 {
        distance(q, self)
    }
}

/// `d = (q - p) . v`: negative on the obstacle side of the plane through `p`.
pub fn distance(q: Vec3, pair: &PVPair) -> f64 {
    (q - pair.p).dot(&pair.v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPointCtx {
    pub position: Vec3,
    pub pairs: Vec<PVPair>,
    pub fixed: bool,
}

impl ControlPointCtx {
    pub fn new(position: Vec3, fixed: bool) -> Self {
        Self {
            position,
            pairs: Vec::new(),
            fixed,
        }
    }
}

/// Builds contexts for `pts` with the first and last `n_fixed` marked fixed.
pub fn contexts_from_points(pts: &[Vec3], n_fixed: usize) -> Vec<ControlPointCtx> {
    let n = pts.len();
    pts.iter()
        .enumerate()
        .map(|(i, &p)| ControlPointCtx::new(p, i < n_fixed || i + n_fixed >= n))
        .collect()
}

/// Inclusive range of control-point indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollidingSegment {
    pub begin: usize,
    pub end: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReboundError {
    #[error("anchor coincides with control point at {0:?}")]
    DegenerateDirection(Vec3),
    #[error("tangent is zero")]
    ZeroTangent,
    #[error("guiding path is empty")]
    EmptyPath,
    #[error("colliding run {begin}..={end} has no free control point on one side")]
    NoFreeNeighbour { begin: usize, end: usize },
}

/// True iff the point has no pairs or has escaped every known obstacle.
pub fn is_new_obstacle(ctx: &ControlPointCtx) -> bool {
    ctx.pairs.iter().all(|pr| distance(ctx.position, pr) > 0.0)
}

/// Maximal runs of `true` in `colliding`, ignoring fixed points. Every run
/// must be flanked on both sides by a point that is not colliding.
pub fn segments_from_flags(
    colliding: &[bool],
    fixed: &[bool],
) -> Result<Vec<CollidingSegment>, ReboundError> {
    let n = colliding.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if colliding[i] && !fixed[i] {
            let begin = i;
            while i + 1 < n && colliding[i + 1] && !fixed[i + 1] {
                i += 1;
            }
            let end = i;
            let left_ok = begin > 0 && !colliding[begin - 1];
            let right_ok = end + 1 < n && !colliding[end + 1];
            if !left_ok || !right_ok {
                return Err(ReboundError::NoFreeNeighbour { begin, end });
            }
            out.push(CollidingSegment { begin, end });
        }
        i += 1;
    }
    Ok(out)
}

/// Runs of control points lying in occupied voxels.
pub fn find_colliding_segments(
    q: &[ControlPointCtx],
    grid: &OccupancyGrid,
) -> Result<Vec<CollidingSegment>, ReboundError> {
    let colliding: Vec<bool> = q
        .iter()
        .map(|c| grid.is_occupied(c.position) == Occupancy::Occupied)
        .collect();
    let fixed: Vec<bool> = q.iter().map(|c| c.fixed).collect();
    segments_from_flags(&colliding, &fixed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorKind {
    /// Crossing of the normal plane with the path.
    PlaneCrossing,
    /// No crossing; nearest waypoint used instead.
    NearestWaypoint,
}

/// Point of `path` chosen as anchor for `q` with tangent `r`, and the arc
/// position (segment index, fraction) it was found at.
fn anchor_point(q: Vec3, r: Vec3, path: &GridPath) -> Result<(Vec3, usize, f64, AnchorKind), ReboundError> {
    let w = &path.waypoints;
    if w.is_empty() {
        return Err(ReboundError::EmptyPath);
    }
    if !(r.norm() > 0.0) {
        return Err(ReboundError::ZeroTangent);
    }
    let side = |p: &Vec3| (p - q).dot(&r);
    let mut best: Option<(f64, Vec3, usize, f64)> = None;
    for k in 0..w.len().saturating_sub(1) {
        let (s0, s1) = (side(&w[k]), side(&w[k + 1]));
        if s0 == 0.0 || s0 * s1 < 0.0 || (s1 == 0.0 && k + 2 == w.len()) {
            let frac = if s0 == s1 { 0.0 } else { s0 / (s0 - s1) };
            let p = w[k] + (w[k + 1] - w[k]) * frac;
            let dist = (p - q).norm();
            if best.map_or(true, |b| dist < b.0) {
                best = Some((dist, p, k, frac));
            }
        }
    }
    if w.len() == 1 && side(&w[0]) == 0.0 {
        best = Some(((w[0] - q).norm(), w[0], 0, 0.0));
    }
    if let Some((_, p, k, frac)) = best {
        return Ok((p, k, frac, AnchorKind::PlaneCrossing));
    }
    let (k, _) = w
        .iter()
        .enumerate()
        .map(|(k, p)| (k, (p - q).norm()))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    Ok((w[k], k, 0.0, AnchorKind::NearestWaypoint))
}

/// Anchor pair for `q` from the crossing of the plane through `q` with
/// normal `r` and the path; falls back to the nearest waypoint.
pub fn plane_path_anchor(
    q: Vec3,
    r: Vec3,
    path: &GridPath,
) -> Result<(PVPair, AnchorKind), ReboundError> {
    let (p, _, _, kind) = anchor_point(q, r, path)?;
    Ok((PVPair::toward(q, p)?, kind))
}

/// Moves `dist` along the polyline from segment `k` at fraction `frac`,
/// forward if possible, otherwise backward.
fn walk_path(w: &[Vec3], k: usize, frac: f64, dist: f64) -> Vec3 {
    let start = if w.len() < 2 { w[0] } else { w[k] + (w[k + 1] - w[k]) * frac };
    let forward = |mut left: f64| -> Option<Vec3> {
        let mut cur = start;
        for j in k + 1..w.len() {
            let seg = (w[j] - cur).norm();
            if seg >= left {
                return Some(cur + (w[j] - cur) * (left / seg));
            }
            left -= seg;
            cur = w[j];
        }
        None
    };
    if let Some(p) = forward(dist) {
        return p;
    }
    let mut cur = start;
    let mut left = dist;
    for j in (0..=k.min(w.len() - 1)).rev() {
        let seg = (w[j] - cur).norm();
        if seg >= left && seg > 0.0 {
            return cur + (w[j] - cur) * (left / seg);
        }
        left -= seg;
        cur = w[j];
    }
    cur
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AddReport {
    pub segments: Vec<CollidingSegment>,
    pub pairs_added: usize,
    /// Segments whose guiding path search failed.
    pub search_failures: usize,
    pub fallbacks: usize,
}

/// Where a flagged control point was seen colliding: a blocked point of the
/// curve it governs and the curve tangent there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Witness {
    pub at: Vec3,
    pub tangent: Vec3,
}

/// Adds pairs for the given colliding segments. A segment is searched only
/// if at least one of its points passes [`is_new_obstacle`]; only those
/// points receive a pair.
pub fn add_obstacle_info(
    grid: &OccupancyGrid,
    q: &mut [ControlPointCtx],
    dt: f64,
    segments: &[CollidingSegment],
) -> AddReport {
    add_obstacle_info_witnessed(grid, q, dt, segments, &[])
}

/// As [`add_obstacle_info`], but a point with a witness takes its anchor
/// plane and direction from the witness instead of its own position.
pub fn add_obstacle_info_witnessed(
    grid: &OccupancyGrid,
    q: &mut [ControlPointCtx],
    dt: f64,
    segments: &[CollidingSegment],
    witnesses: &[Option<Witness>],
) -> AddReport {
    let mut report = AddReport {
        segments: segments.to_vec(),
        ..Default::default()
    };
    let snap = (0.5 / grid.resolution()).ceil().max(2.0) as i64;
    let positions: Vec<Vec3> = q.iter().map(|c| c.position).collect();
    for seg in segments {
        let fresh: Vec<usize> = (seg.begin..=seg.end).filter(|&i| is_new_obstacle(&q[i])).collect();
        if fresh.is_empty() || seg.begin == 0 || seg.end + 1 >= q.len() {
            continue;
        }
        let a = grid.nearest_free(positions[seg.begin - 1], snap);
        let b = grid.nearest_free(positions[seg.end + 1], snap);
        let (Some(a), Some(b)) = (a, b) else {
            report.search_failures += 1;
            continue;
        };
        let path = match grid.astar_search(a, b) {
            Ok(p) => p,
            Err(e) => {
                log::debug!("guiding path search failed: {e}");
                report.search_failures += 1;
                continue;
            }
        };
        for i in fresh {
            let (qi, r) = match witnesses.get(i).copied().flatten() {
                Some(w) => (w.at, w.tangent),
                None => {
                    let Ok(r) = bspline::ctrl_point_tangent(&positions, dt, i) else { continue };
                    (positions[i], r)
                }
            };
            let r = if r.norm() > 0.0 { r } else { positions[seg.end + 1] - positions[seg.begin - 1] };
            let Ok((mut p, k, frac, kind)) = anchor_point(qi, r, &path) else { continue };
            if (p - qi).norm() <= DEGENERATE_EPS {
                p = walk_path(&path.waypoints, k, frac, grid.resolution());
            }
            if let Ok(pair) = PVPair::toward(qi, p) {
                q[i].pairs.push(pair);
                report.pairs_added += 1;
                if kind == AnchorKind::NearestWaypoint {
                    report.fallbacks += 1;
                }
            }
        }
    }
    report
}

/// Finds control points inside obstacles and attaches new pairs to them.
pub fn check_and_add_obstacle_info(
    grid: &OccupancyGrid,
    q: &mut [ControlPointCtx],
    dt: f64,
) -> Result<AddReport, ReboundError> {
    let segments = find_colliding_segments(q, grid)?;
    Ok(add_obstacle_info(grid, q, dt, &segments))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmap::Obstacle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn distance_examples() {
        let pair = PVPair { p: v(1.0, 0.0, 0.0), v: v(1.0, 0.0, 0.0) };
        assert_eq!(distance(v(0.0, 0.0, 0.0), &pair), -1.0);
        assert_eq!(distance(v(1.0, 0.0, 0.0), &pair), 0.0);
        assert_eq!(distance(v(2.0, 0.0, 0.0), &pair), 1.0);
    }

    #[test]
    fn new_obstacle_rule() {
        let mut c = ControlPointCtx::new(v(0.0, 0.0, 0.0), false);
        assert!(is_new_obstacle(&c));
        c.pairs.push(PVPair { p: v(0.2, 0.0, 0.0), v: v(1.0, 0.0, 0.0) });
        assert!(!is_new_obstacle(&c));
        c.pairs = vec![
            PVPair { p: v(-0.1, 0.0, 0.0), v: v(1.0, 0.0, 0.0) },
            PVPair { p: v(-0.3, 0.0, 0.0), v: v(1.0, 0.0, 0.0) },
        ];
        assert!(is_new_obstacle(&c));
    }

    #[test]
    fn segments_simple_cases() {
        let fixed: Vec<bool> = (0..20).map(|i| i < 3 || i >= 17).collect();
        assert!(segments_from_flags(&[false; 20], &fixed).unwrap().is_empty());
        let flags: Vec<bool> = (0..20).map(|i| (4..=7).contains(&i)).collect();
        assert_eq!(
            segments_from_flags(&flags, &fixed).unwrap(),
            vec![CollidingSegment { begin: 4, end: 7 }]
        );
        let all = [true; 20];
        assert!(segments_from_flags(&all, &fixed).is_err());
    }

    fn run_length_oracle(flags: &[bool], fixed: &[bool]) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut start = None;
        for i in 0..=flags.len() {
            let on = i < flags.len() && flags[i] && !fixed[i];
            match (on, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push((s, i - 1));
                    start = None;
                }
                _ => {}
            }
        }
        runs
    }

    #[test]
    fn segments_match_run_length_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let n = rng.gen_range(8..40);
            let fixed: Vec<bool> = (0..n).map(|i| i < 3 || i + 3 >= n).collect();
            let flags: Vec<bool> = (0..n).map(|i| !fixed[i] && rng.gen_bool(0.4)).collect();
            let got = segments_from_flags(&flags, &fixed).unwrap();
            let got: Vec<(usize, usize)> = got.iter().map(|s| (s.begin, s.end)).collect();
            assert_eq!(got, run_length_oracle(&flags, &fixed));
        }
    }

    #[test]
    fn find_segments_on_grid() {
        let grid = OccupancyGrid::build(
            &[Obstacle::Box { min: [1.0, -1.0, -1.0], max: [1.5, 1.0, 1.0] }],
            0.1,
            v(-1.0, -2.0, -2.0),
            [40, 40, 40],
            0.0,
        )
        .unwrap();
        let pts: Vec<Vec3> = (0..20).map(|i| v(i as f64 * 0.15, 0.05, 0.05)).collect();
        let ctx = contexts_from_points(&pts, 3);
        let segs = find_colliding_segments(&ctx, &grid).unwrap();
        let expect: Vec<usize> = (0..20)
            .filter(|&i| grid.is_occupied(pts[i]) == Occupancy::Occupied)
            .collect();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].begin, expect[0]);
        assert_eq!(segs[0].end, *expect.last().unwrap());
    }

    #[test]
    fn plane_anchor_example() {
        let path = GridPath { waypoints: vec![v(-1.0, 1.0, 0.0), v(1.0, 1.0, 0.0)] };
        let (pair, kind) = plane_path_anchor(v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), &path).unwrap();
        assert_eq!(kind, AnchorKind::PlaneCrossing);
        assert!((pair.p - v(0.0, 1.0, 0.0)).norm() < 1e-12);
        assert!((pair.v - v(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn plane_anchor_fallback() {
        let path = GridPath { waypoints: vec![v(1.0, 1.0, 0.0), v(2.0, 1.0, 0.0), v(3.0, 0.0, 0.0)] };
        let (pair, kind) = plane_path_anchor(v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), &path).unwrap();
        assert_eq!(kind, AnchorKind::NearestWaypoint);
        assert_eq!(pair.p, v(1.0, 1.0, 0.0));
    }

    #[test]
    fn plane_anchor_degenerate() {
        let path = GridPath { waypoints: vec![v(0.0, -1.0, 0.0), v(0.0, 1.0, 0.0)] };
        let r = plane_path_anchor(v(0.0, 0.0, 0.0), v(0.0, 1.0, 0.0), &path);
        assert!(matches!(r, Err(ReboundError::DegenerateDirection(_))));
    }

    #[test]
    fn plane_anchor_residual_on_random_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        for _ in 0..300 {
            let q = v(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let r = v(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let w: Vec<Vec3> = (0..8)
                .map(|_| v(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
                .collect();
            let path = GridPath { waypoints: w.clone() };
            let Ok((pair, kind)) = plane_path_anchor(q, r, &path) else { continue };
            if kind != AnchorKind::PlaneCrossing {
                continue;
            }
            checked += 1;
            assert!((pair.p - q).dot(&r).abs() < 1e-9);
            let on_path = w.windows(2).any(|s| {
                let d = s[1] - s[0];
                let t = ((pair.p - s[0]).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
                (s[0] + d * t - pair.p).norm() < 1e-9
            });
            assert!(on_path);
            assert!((pair.v.norm() - 1.0).abs() < 1e-9);
            assert!(distance(q, &pair) < 0.0);
        }
        assert!(checked > 100);
    }

    fn wall_grid(walls: &[(f64, f64)]) -> OccupancyGrid {
        let obs: Vec<Obstacle> = walls
            .iter()
            .map(|&(x, w)| Obstacle::Box { min: [x, -0.6, -0.6], max: [x + w, 0.6, 0.6] })
            .collect();
        OccupancyGrid::build(&obs, 0.1, v(-1.0, -2.0, -2.0), [60, 40, 40], 0.0).unwrap()
    }

    #[test]
    fn wall_crossing_adds_one_pair_each() {
        let grid = wall_grid(&[(1.0, 0.3)]);
        let pts: Vec<Vec3> = (0..16).map(|i| v(i as f64 * 0.15, 0.05, 0.05)).collect();
        let mut ctx = contexts_from_points(&pts, 3);
        let report = check_and_add_obstacle_info(&grid, &mut ctx, 0.1).unwrap();
        assert_eq!(report.segments.len(), 1);
        let seg = report.segments[0];
        for (i, c) in ctx.iter().enumerate() {
            if (seg.begin..=seg.end).contains(&i) {
                assert_eq!(c.pairs.len(), 1);
                assert!(distance(c.position, &c.pairs[0]) < 0.0);
            } else {
                assert!(c.pairs.is_empty());
            }
        }
        // a second pass adds nothing: every point is still behind its anchor
        let again = check_and_add_obstacle_info(&grid, &mut ctx, 0.1).unwrap();
        assert_eq!(again.pairs_added, 0);
    }

    #[test]
    fn collision_free_points_unchanged() {
        let grid = wall_grid(&[]);
        let pts: Vec<Vec3> = (0..10).map(|i| v(i as f64 * 0.15, 0.05, 0.05)).collect();
        let mut ctx = contexts_from_points(&pts, 3);
        let before = ctx.clone();
        let report = check_and_add_obstacle_info(&grid, &mut ctx, 0.1).unwrap();
        assert_eq!(report.pairs_added, 0);
        assert_eq!(ctx, before);
    }

    #[test]
    fn two_walls_scripted_history() {
        let grid = wall_grid(&[(1.0, 0.3), (1.75, 0.6)]);
        let pts: Vec<Vec3> = (0..20).map(|i| v(i as f64 * 0.15, 0.05, 0.05)).collect();
        let mut ctx = contexts_from_points(&pts, 3);
        // first pass sees wall 1 only
        let first = wall_grid(&[(1.0, 0.3)]);
        check_and_add_obstacle_info(&first, &mut ctx, 0.1).unwrap();
        let in_wall1: Vec<usize> = (0..20)
            .filter(|&i| first.is_occupied(pts[i]) == Occupancy::Occupied)
            .collect();
        assert!(!in_wall1.is_empty());
        // the wall-1 points get pushed 0.9 m forward into wall 2
        for &i in &in_wall1 {
            ctx[i].position += v(0.9, 0.0, 0.0);
            let p = ctx[i].position;
            assert_eq!(grid.is_occupied(p), Occupancy::Occupied);
        }
        // and sit beyond their first anchor
        for &i in &in_wall1 {
            let pr = ctx[i].pairs[0];
            ctx[i].pairs[0] = PVPair { p: pr.p, v: (ctx[i].position - pr.p).normalize() };
            assert!(distance(ctx[i].position, &ctx[i].pairs[0]) > 0.0);
        }
        check_and_add_obstacle_info(&grid, &mut ctx, 0.1).unwrap();
        for (i, c) in ctx.iter().enumerate() {
            let inside2 = grid.is_occupied(c.position) == Occupancy::Occupied;
            let expected = match (in_wall1.contains(&i), inside2) {
                (true, true) => 2,
                (true, false) => 1,
                (false, true) => 1,
                (false, false) => 0,
            };
            assert_eq!(c.pairs.len(), expected, "point {i}");
        }
        for c in &ctx {
            if let Some(last) = c.pairs.last() {
                if c.pairs.len() == 2 || grid.is_occupied(c.position) == Occupancy::Occupied {
                    assert!(distance(c.position, last) < 0.0);
                }
            }
        }
    }

    #[test]
    fn walk_along_path_moves_requested_distance() {
        let w = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(1.0, 1.0, 0.0)];
        assert!((walk_path(&w, 0, 0.5, 0.2) - v(0.7, 0.0, 0.0)).norm() < 1e-12);
        assert!((walk_path(&w, 0, 0.9, 0.3) - v(1.0, 0.2, 0.0)).norm() < 1e-12);
        assert!((walk_path(&w, 1, 1.0, 0.5) - v(1.0, 0.5, 0.0)).norm() < 1e-12);
    }
}
