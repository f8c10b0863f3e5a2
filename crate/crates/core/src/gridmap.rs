//! Inflated voxel occupancy grid with A* search and swept-segment clearance.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rustc_hash::FxHashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec3;

/// Default node expansion budget for [`OccupancyGrid::astar_search`].
pub const DEFAULT_EXPANSION_BUDGET: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Obstacle {
    /// Axis-aligned box between two corners.
    Box { min: [f64; 3], max: [f64; 3] },
    Point { at: [f64; 3] },
    /// Vertical cylinder.
    Cylinder {
        x: f64,
        y: f64,
        radius: f64,
        z_min: f64,
        z_max: f64,
    },
}

impl Obstacle {
    pub fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        match *self {
            Obstacle::Box { min, max } => (
                [min[0].min(max[0]), min[1].min(max[1]), min[2].min(max[2])],
                [min[0].max(max[0]), min[1].max(max[1]), min[2].max(max[2])],
            ),
            Obstacle::Point { at } => (at, at),
            Obstacle::Cylinder {
                x,
                y,
                radius,
                z_min,
                z_max,
            } => ([x - radius, y - radius, z_min], [x + radius, y + radius, z_max]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Occupancy {
    Free,
    Occupied,
    Unknown,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("resolution must be positive and finite, got {0}")]
    BadResolution(f64),
    #[error("grid dimensions must be positive, got {0:?}")]
    BadDims([usize; 3]),
    #[error("inflation radius must be non-negative, got {0}")]
    BadInflation(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("start {0:?} is not a free voxel")]
    StartBlocked(Vec3),
    #[error("goal is occupied or outside the grid")]
    GoalBlocked { partial: GridPath },
    #[error("goal unreachable")]
    Unreachable { partial: GridPath },
    #[error("expansion budget exhausted")]
    BudgetExhausted { partial: GridPath },
}

impl SearchError {
    pub fn partial(&self) -> Option<&GridPath> {
        match self {
            SearchError::StartBlocked(_) => None,
            SearchError::GoalBlocked { partial }
            | SearchError::Unreachable { partial }
            | SearchError::BudgetExhausted { partial } => Some(partial),
        }
    }
}

/// Voxel-center waypoints of an A* solution.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridPath {
    pub waypoints: Vec<Vec3>,
}

impl GridPath {
    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }
}

pub type Index3 = [i64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    origin: Vec3,
    resolution: f64,
    dims: [usize; 3],
    occupied: Vec<bool>,
    inflation: f64,
    obstacles: Vec<Obstacle>,
    /// Treat out-of-bounds space as occupied in clearance queries.
    pub unknown_is_occupied: bool,
    pub expansion_budget: usize,
}

impl OccupancyGrid {
    /// Rasterizes `obstacles` (any voxel whose cell overlaps an obstacle) and
    /// dilates the result by `inflation` (every voxel whose center lies within
    /// `inflation` of an occupied voxel center). Obstacles outside the grid
    /// are clipped.
    pub fn build(
        obstacles: &[Obstacle],
        resolution: f64,
        origin: Vec3,
        dims: [usize; 3],
        inflation: f64,
    ) -> Result<Self, GridError> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(GridError::BadResolution(resolution));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(GridError::BadDims(dims));
        }
        if !(inflation >= 0.0) || !inflation.is_finite() {
            return Err(GridError::BadInflation(inflation));
        }
        let mut grid = Self {
            origin,
            resolution,
            dims,
            occupied: vec![false; dims[0] * dims[1] * dims[2]],
            inflation,
            obstacles: Vec::new(),
            unknown_is_occupied: false,
            expansion_budget: DEFAULT_EXPANSION_BUDGET,
        };
        grid.add_obstacles(obstacles);
        Ok(grid)
    }

    /// Adds obstacles to an existing grid (rasterize + dilate the new ones).
    pub fn add_obstacles(&mut self, obstacles: &[Obstacle]) {
        let mut raw = Vec::new();
        for obs in obstacles {
            let before = raw.len();
            self.rasterize(obs, &mut raw);
            if raw.len() == before {
                log::warn!("obstacle {obs:?} does not intersect the grid; clipped");
            }
        }
        let offsets = self.dilation_offsets();
        for idx in raw {
            for off in &offsets {
                let n = [idx[0] + off[0], idx[1] + off[1], idx[2] + off[2]];
                if let Some(flat) = self.flat(n) {
                    self.occupied[flat] = true;
                }
            }
        }
        self.obstacles.extend_from_slice(obstacles);
    }

    /// Copy with the occupied set dilated by a further `extra` metres.
    pub fn dilated(&self, extra: f64) -> Self {
        let mut out = self.clone();
        out.inflation = self.inflation + extra.max(0.0);
        let offsets = dilation_offsets(extra.max(0.0), self.resolution);
        let [nx, ny, _] = self.dims;
        for (flat, _) in self.occupied.iter().enumerate().filter(|(_, &o)| o) {
            let idx = [(flat % nx) as i64, ((flat / nx) % ny) as i64, (flat / (nx * ny)) as i64];
            for off in &offsets {
                if let Some(f) = self.flat([idx[0] + off[0], idx[1] + off[1], idx[2] + off[2]]) {
                    out.occupied[f] = true;
                }
            }
        }
        out
    }

    /// True if `p` is occupied, or unknown under the unknown-space policy.
    pub fn blocked(&self, p: Vec3) -> bool {
        match self.is_occupied(p) {
            Occupancy::Occupied => true,
            Occupancy::Unknown => self.unknown_is_occupied,
            Occupancy::Free => false,
        }
    }

    fn dilation_offsets(&self) -> Vec<Index3> {
        dilation_offsets(self.inflation, self.resolution)
    }

    fn rasterize(&self, obs: &Obstacle, out: &mut Vec<Index3>) {
        let (lo, hi) = obs.aabb();
        let lo_i = self.index_of(Vec3::from(lo));
        let hi_i = self.index_of(Vec3::from(hi));
        let clip = |d: usize, v: i64| v.clamp(0, self.dims[d] as i64 - 1);
        for d in 0..3 {
            if hi_i[d] < 0 || lo_i[d] >= self.dims[d] as i64 {
                return;
            }
        }
        for i in clip(0, lo_i[0])..=clip(0, hi_i[0]) {
            for j in clip(1, lo_i[1])..=clip(1, hi_i[1]) {
                if let Obstacle::Cylinder { x, y, radius, .. } = *obs {
                    // closest point of the cell's xy square to the axis
                    let (cmin, cmax) = self.cell_bounds([i, j, 0]);
                    let dx = x.clamp(cmin.x, cmax.x) - x;
                    let dy = y.clamp(cmin.y, cmax.y) - y;
                    if dx * dx + dy * dy > radius * radius {
                        continue;
                    }
                }
                for k in clip(2, lo_i[2])..=clip(2, hi_i[2]) {
                    out.push([i, j, k]);
                }
            }
        }
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn inflation(&self) -> f64 {
        self.inflation
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    /// World-space bounds `(min, max)` of the grid.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let ext = Vec3::new(
            self.dims[0] as f64,
            self.dims[1] as f64,
            self.dims[2] as f64,
        ) * self.resolution;
        (self.origin, self.origin + ext)
    }

    pub fn index_of(&self, p: Vec3) -> Index3 {
        let rel = (p - self.origin) / self.resolution;
        [
            rel.x.floor() as i64,
            rel.y.floor() as i64,
            rel.z.floor() as i64,
        ]
    }

    pub fn in_bounds(&self, idx: Index3) -> bool {
        (0..3).all(|d| idx[d] >= 0 && idx[d] < self.dims[d] as i64)
    }

    fn flat(&self, idx: Index3) -> Option<usize> {
        if !self.in_bounds(idx) {
            return None;
        }
        Some(
            (idx[2] as usize * self.dims[1] + idx[1] as usize) * self.dims[0] + idx[0] as usize,
        )
    }

    fn unflat(&self, flat: usize) -> Index3 {
        let i = flat % self.dims[0];
        let j = (flat / self.dims[0]) % self.dims[1];
        let k = flat / (self.dims[0] * self.dims[1]);
        [i as i64, j as i64, k as i64]
    }

    pub fn center_of(&self, idx: Index3) -> Vec3 {
        self.origin
            + Vec3::new(
                idx[0] as f64 + 0.5,
                idx[1] as f64 + 0.5,
                idx[2] as f64 + 0.5,
            ) * self.resolution
    }

    fn cell_bounds(&self, idx: Index3) -> (Vec3, Vec3) {
        let lo = self.origin
            + Vec3::new(idx[0] as f64, idx[1] as f64, idx[2] as f64) * self.resolution;
        (lo, lo + Vec3::repeat(self.resolution))
    }

    pub fn occupancy_at_index(&self, idx: Index3) -> Occupancy {
        match self.flat(idx) {
            None => Occupancy::Unknown,
            Some(f) if self.occupied[f] => Occupancy::Occupied,
            Some(_) => Occupancy::Free,
        }
    }

    pub fn is_occupied(&self, p: Vec3) -> Occupancy {
        if !p.iter().all(|c| c.is_finite()) {
            return Occupancy::Unknown;
        }
        self.occupancy_at_index(self.index_of(p))
    }

    /// Blocking check honouring the unknown-space policy.
    fn blocks(&self, idx: Index3) -> bool {
        match self.occupancy_at_index(idx) {
            Occupancy::Occupied => true,
            Occupancy::Unknown => self.unknown_is_occupied,
            Occupancy::Free => false,
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    /// Voxel center of the free voxel nearest to `p` within `max_radius`
    /// voxels, searching outward shell by shell.
    pub fn nearest_free(&self, p: Vec3, max_radius: i64) -> Option<Vec3> {
        let c = self.index_of(p);
        if self.occupancy_at_index(c) == Occupancy::Free {
            return Some(self.center_of(c));
        }
        let mut best: Option<(f64, Vec3)> = None;
        for r in 1..=max_radius {
            for i in -r..=r {
                for j in -r..=r {
                    for k in -r..=r {
                        if i.abs().max(j.abs()).max(k.abs()) != r {
                            continue;
                        }
                        let idx = [c[0] + i, c[1] + j, c[2] + k];
                        if self.occupancy_at_index(idx) == Occupancy::Free {
                            let q = self.center_of(idx);
                            let d = (q - p).norm();
                            if best.map_or(true, |(bd, _)| d < bd) {
                                best = Some((d, q));
                            }
                        }
                    }
                }
            }
            if best.is_some() {
                return best.map(|(_, q)| q);
            }
        }
        None
    }

    /// A* over 26-connected free voxels with Euclidean costs and heuristic.
    /// Ties on `f` are broken toward larger `g`.
    pub fn astar_search(&self, start: Vec3, goal: Vec3) -> Result<GridPath, SearchError> {
        let s_idx = self.index_of(start);
        let g_idx = self.index_of(goal);
        let s_flat = match self.flat(s_idx) {
            Some(f) if !self.occupied[f] => f,
            _ => return Err(SearchError::StartBlocked(start)),
        };
        let goal_ok = matches!(self.flat(g_idx), Some(f) if !self.occupied[f]);
        let res = self.resolution;
        let h = |idx: Index3| {
            let d = [
                (idx[0] - g_idx[0]) as f64,
                (idx[1] - g_idx[1]) as f64,
                (idx[2] - g_idx[2]) as f64,
            ];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() * res
        };

        let mut neighbours = Vec::with_capacity(26);
        for i in -1i64..=1 {
            for j in -1i64..=1 {
                for k in -1i64..=1 {
                    if i != 0 || j != 0 || k != 0 {
                        let c = ((i * i + j * j + k * k) as f64).sqrt() * res;
                        neighbours.push(([i, j, k], c));
                    }
                }
            }
        }

        // flat -> (g, parent, closed)
        let mut nodes: FxHashMap<usize, (f64, usize, bool)> = FxHashMap::default();
        let mut open = BinaryHeap::new();
        nodes.insert(s_flat, (0.0, usize::MAX, false));
        open.push(OpenNode {
            f: h(s_idx),
            g: 0.0,
            flat: s_flat,
        });
        let mut best = (h(s_idx), s_flat);
        let mut expansions = 0usize;

        let rebuild = |nodes: &FxHashMap<usize, (f64, usize, bool)>, mut f: usize| {
            let mut pts = Vec::new();
            while f != usize::MAX {
                pts.push(self.center_of(self.unflat(f)));
                f = nodes[&f].1;
            }
            pts.reverse();
            GridPath { waypoints: pts }
        };

        while let Some(OpenNode { g, flat, .. }) = open.pop() {
            let entry = nodes.get_mut(&flat).expect("open node is tracked");
            if entry.2 || g > entry.0 {
                continue;
            }
            entry.2 = true;
            let idx = self.unflat(flat);
            if idx == g_idx {
                return Ok(rebuild(&nodes, flat));
            }
            let hn = h(idx);
            if hn < best.0 {
                best = (hn, flat);
            }
            expansions += 1;
            if expansions > self.expansion_budget {
                return Err(SearchError::BudgetExhausted {
                    partial: rebuild(&nodes, best.1),
                });
            }
            for &(off, cost) in &neighbours {
                let n = [idx[0] + off[0], idx[1] + off[1], idx[2] + off[2]];
                let Some(nf) = self.flat(n) else { continue };
                if self.occupied[nf] {
                    continue;
                }
                let ng = g + cost;
                let e = nodes.entry(nf).or_insert((f64::INFINITY, usize::MAX, false));
                if e.2 || ng >= e.0 {
                    continue;
                }
                *e = (ng, flat, false);
                open.push(OpenNode {
                    f: ng + h(n),
                    g: ng,
                    flat: nf,
                });
            }
        }
        let partial = rebuild(&nodes, best.1);
        if goal_ok {
            Err(SearchError::Unreachable { partial })
        } else {
            Err(SearchError::GoalBlocked { partial })
        }
    }

    /// True iff no blocking voxel cell comes within `radius` of the segment
    /// `p0 -> p1`. Exact for the continuous segment.
    pub fn segment_free(&self, p0: Vec3, p1: Vec3, radius: f64) -> bool {
        let lo = p0.inf(&p1) - Vec3::repeat(radius);
        let hi = p0.sup(&p1) + Vec3::repeat(radius);
        let lo_i = self.index_of(lo);
        let hi_i = self.index_of(hi);
        let r2 = radius * radius;
        for k in lo_i[2]..=hi_i[2] {
            for j in lo_i[1]..=hi_i[1] {
                for i in lo_i[0]..=hi_i[0] {
                    let idx = [i, j, k];
                    if !self.blocks(idx) {
                        continue;
                    }
                    let (cmin, cmax) = self.cell_bounds(idx);
                    if segment_box_dist2(p0, p1, cmin, cmax) <= r2 {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// True iff no blocking cell lies within `radius` of the point.
    pub fn point_clear(&self, p: Vec3, radius: f64) -> bool {
        self.segment_free(p, p, radius)
    }
}

fn dilation_offsets(radius: f64, resolution: f64) -> Vec<Index3> {
    let r = (radius / resolution + 1e-9).floor() as i64;
    let lim = (radius / resolution).powi(2) + 1e-9;
    let mut out = Vec::new();
    for i in -r..=r {
        for j in -r..=r {
            for k in -r..=r {
                if (i * i + j * j + k * k) as f64 <= lim {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// Squared distance between segment `a -> b` and the box `[lo, hi]`.
///
/// Along the segment the squared distance is a convex piecewise quadratic in
/// the segment parameter, with breakpoints where a coordinate crosses a box
/// face; each piece is minimized in closed form.
pub fn segment_box_dist2(a: Vec3, b: Vec3, lo: Vec3, hi: Vec3) -> f64 {
    let d = b - a;
    let mut breaks = vec![0.0, 1.0];
    for ax in 0..3 {
        if d[ax] != 0.0 {
            for face in [lo[ax], hi[ax]] {
                let s = (face - a[ax]) / d[ax];
                if s > 0.0 && s < 1.0 {
                    breaks.push(s);
                }
            }
        }
    }
    breaks.sort_by(|x, y| x.total_cmp(y));
    let dist2 = |s: f64| {
        let p = a + d * s;
        (0..3)
            .map(|ax| {
                let e = (lo[ax] - p[ax]).max(0.0).max(p[ax] - hi[ax]);
                e * e
            })
            .sum::<f64>()
    };
    let mut best = f64::INFINITY;
    for w in breaks.windows(2) {
        let (s0, s1) = (w[0], w[1]);
        best = best.min(dist2(s0)).min(dist2(s1));
        if s1 - s0 <= 0.0 {
            continue;
        }
        // active faces are fixed inside the piece; minimize the quadratic
        let mid = a + d * (0.5 * (s0 + s1));
        let (mut qa, mut qb) = (0.0, 0.0);
        for ax in 0..3 {
            let target = if mid[ax] < lo[ax] {
                lo[ax]
            } else if mid[ax] > hi[ax] {
                hi[ax]
            } else {
                continue;
            };
            // (a + d s - target)^2
            qa += d[ax] * d[ax];
            qb += 2.0 * d[ax] * (a[ax] - target);
        }
        if qa > 0.0 {
            let s = (-qb / (2.0 * qa)).clamp(s0, s1);
            best = best.min(dist2(s));
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
struct OpenNode {
    f: f64,
    g: f64,
    flat: usize,
}

impl PartialEq for OpenNode {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for OpenNode {}

impl Ord for OpenNode {
    fn cmp(&self, other: &Self) -> Ordering {
        // max-heap: smaller f first, then larger g
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| self.g.total_cmp(&other.g))
            .then_with(|| other.flat.cmp(&self.flat))
    }
}

impl PartialOrd for OpenNode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
