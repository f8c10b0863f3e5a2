//! Text map files, trajectory CSV and pair dumps.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::bspline::{SplineError, UniformBSpline};
use crate::gridmap::{GridError, Obstacle, OccupancyGrid};
use crate::planner::PairRecord;
use crate::Vec3;

pub const TRAJECTORY_HEADER: &str = "t,x,y,z,vx,vy,vz,ax,ay,az";
pub const DEFAULT_SAMPLE_RATE: f64 = 100.0;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("map file is empty")]
    Empty,
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Contents of a map file: grid geometry plus raw obstacles.
///
/// ```text
/// resolution ox oy oz nx ny nz
/// box x0 y0 z0 x1 y1 z1
/// pt x y z
/// cyl x y radius z0 z1
/// ```
///
/// Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct MapFile {
    pub resolution: f64,
    pub origin: Vec3,
    pub dims: [usize; 3],
    pub obstacles: Vec<Obstacle>,
}

impl MapFile {
    pub fn parse(text: &str) -> Result<Self, MapError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, header) = lines.next().ok_or(MapError::Empty)?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 7 {
            return Err(syntax(hline, "header needs `resolution ox oy oz nx ny nz`"));
        }
        let resolution = num(hline, h[0])?;
        let origin = Vec3::new(num(hline, h[1])?, num(hline, h[2])?, num(hline, h[3])?);
        let mut dims = [0usize; 3];
        for (d, s) in dims.iter_mut().zip(&h[4..]) {
            *d = s
                .parse()
                .map_err(|_| syntax(hline, &format!("bad dimension {s:?}")))?;
        }
        let mut obstacles = Vec::new();
        for (line, l) in lines {
            let mut parts = l.split_whitespace();
            let kind = parts.next().unwrap_or("");
            let vals = parts.map(|s| num(line, s)).collect::<Result<Vec<_>, _>>()?;
            let want = match kind {
                "box" => 6,
                "pt" => 3,
                "cyl" => 5,
                other => return Err(syntax(line, &format!("unknown entry {other:?}"))),
            };
            if vals.len() != want {
                return Err(syntax(line, &format!("`{kind}` takes {want} numbers, got {}", vals.len())));
            }
            obstacles.push(match kind {
                "box" => Obstacle::Box {
                    min: [vals[0], vals[1], vals[2]],
                    max: [vals[3], vals[4], vals[5]],
                },
                "pt" => Obstacle::Point { at: [vals[0], vals[1], vals[2]] },
                _ => Obstacle::Cylinder {
                    x: vals[0],
                    y: vals[1],
                    radius: vals[2],
                    z_min: vals[3],
                    z_max: vals[4],
                },
            });
        }
        Ok(Self { resolution, origin, dims, obstacles })
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        let text = std::fs::read_to_string(path).map_err(|source| MapError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let o = self.origin;
        let [nx, ny, nz] = self.dims;
        let _ = writeln!(out, "{} {} {} {} {nx} {ny} {nz}", self.resolution, o.x, o.y, o.z);
        for obs in &self.obstacles {
            let _ = match *obs {
                Obstacle::Box { min, max } => writeln!(
                    out,
                    "box {} {} {} {} {} {}",
                    min[0], min[1], min[2], max[0], max[1], max[2]
                ),
                Obstacle::Point { at } => writeln!(out, "pt {} {} {}", at[0], at[1], at[2]),
                Obstacle::Cylinder { x, y, radius, z_min, z_max } => {
                    writeln!(out, "cyl {x} {y} {radius} {z_min} {z_max}")
                }
            };
        }
        out
    }

    pub fn build_grid(&self, inflation: f64) -> Result<OccupancyGrid, MapError> {
        Ok(OccupancyGrid::build(&self.obstacles, self.resolution, self.origin, self.dims, inflation)?)
    }

    pub fn from_grid(grid: &OccupancyGrid) -> Self {
        Self {
            resolution: grid.resolution(),
            origin: grid.origin(),
            dims: grid.dims(),
            obstacles: grid.obstacles().to_vec(),
        }
    }
}

fn syntax(line: usize, msg: &str) -> MapError {
    MapError::Syntax { line, msg: msg.to_string() }
}

fn num(line: usize, s: &str) -> Result<f64, MapError> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(syntax(line, &format!("bad number {s:?}"))),
    }
}

/// Samples `spline` at `rate` Hz from its start, always including the end.
pub fn trajectory_csv(spline: &UniformBSpline, rate: f64) -> Result<String, SplineError> {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    let step = 1.0 / rate;
    let count = (spline.duration() * rate).floor() as usize;
    let mut times: Vec<f64> = (0..=count).map(|k| spline.t0() + k as f64 * step).collect();
    if spline.t_end() - times.last().copied().unwrap_or(spline.t0()) > 1e-9 {
        times.push(spline.t_end());
    }
    for t in times {
        let t = t.min(spline.t_end());
        let [p, v, a] = spline.state(t)?;
        let _ = writeln!(
            out,
            "{t:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            p.x, p.y, p.z, v.x, v.y, v.z, a.x, a.y, a.z
        );
    }
    Ok(out)
}

/// One `{t, pos, vel, acc}` row of a trajectory CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub pos: Vec3,
    pub vel: Vec3,
    pub acc: Vec3,
}

pub fn parse_trajectory_csv(text: &str) -> Result<Vec<TrajectoryRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(TRAJECTORY_HEADER) {
        return Err("missing trajectory header".into());
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v = l
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| format!("row {}: {e}", i + 1))?;
            if v.len() != 10 {
                return Err(format!("row {}: expected 10 columns", i + 1));
            }
            Ok(TrajectoryRow {
                t: v[0],
                pos: Vec3::new(v[1], v[2], v[3]),
                vel: Vec3::new(v[4], v[5], v[6]),
                acc: Vec3::new(v[7], v[8], v[9]),
            })
        })
        .collect()
}

/// Pair history as JSON lines, one record per control point and iteration.
pub fn pairs_jsonl(history: &[PairRecord]) -> String {
    let mut out = String::new();
    for rec in history {
        out.push_str(&serde_json::to_string(rec).expect("pair record serializes"));
        out.push('\n');
    }
    out
}
