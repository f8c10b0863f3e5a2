//! Simulation service: a perfectly tracked point robot driven by the
//! planner, steered by goal messages over a newline-delimited JSON socket.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::bench::{gen_random_map, BenchmarkSpec};
use crate::bspline::UniformBSpline;
use crate::config::Config;
use crate::gridmap::{Obstacle, Occupancy, OccupancyGrid};
use crate::io::MapFile;
use crate::planner::{pipe_collision_check, PairRecord, PlanStatus, Planner, RobotState};
use crate::Vec3;

/// Distance under which the robot counts as being at the goal.
pub const GOAL_REACHED: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Inbound {
    Goal { x: f64, y: f64, z: f64 },
    Reset,
    LoadMap { name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMsg {
    pub index: usize,
    pub p: [f64; 3],
    pub v: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Outbound {
    State {
        t: f64,
        pos: [f64; 3],
        vel: [f64; 3],
        acc: [f64; 3],
    },
    Trajectory {
        t0: f64,
        dt: f64,
        degree: usize,
        ctrl_pts: Vec<[f64; 3]>,
        pairs: Vec<PairMsg>,
    },
    Map {
        name: String,
        bounds: [[f64; 3]; 2],
        /// `[x0, y0, z0, x1, y1, z1]`
        boxes: Vec<[f64; 6]>,
        /// `[x, y, radius, z0, z1]`
        cylinders: Vec<[f64; 5]>,
    },
    Status {
        code: String,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        message: Option<String>,
    },
    Error {
        message: String,
    },
}

impl Outbound {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("message serializes");
        s.push('\n');
        s
    }

    fn status(code: &str, message: Option<String>) -> Self {
        Outbound::Status { code: code.to_string(), message }
    }
}

fn arr(v: Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Resolves `load_map` names: `empty`, `forest` or `forest:SEED` (random
/// benchmark maps) and map files in `dir`.
#[derive(Debug, Clone)]
pub struct MapLibrary {
    pub dir: Option<PathBuf>,
    pub config: Config,
}

impl MapLibrary {
    pub fn load(&self, name: &str) -> Result<OccupancyGrid, String> {
        let spec = BenchmarkSpec { config: self.config.clone(), ..BenchmarkSpec::default() };
        if name == "empty" {
            return gen_random_map(&BenchmarkSpec { density: 0.0, ..spec }, 0).map_err(|e| e.to_string());
        }
        if let Some(rest) = name.strip_prefix("forest") {
            let seed = match rest.strip_prefix(':') {
                Some(s) => s.parse::<u64>().map_err(|_| format!("bad seed in {name:?}"))?,
                None if rest.is_empty() => 0,
                None => return Err(format!("unknown map {name:?}")),
            };
            return gen_random_map(&spec, seed).map_err(|e| e.to_string());
        }
        let dir = self.dir.as_ref().ok_or_else(|| format!("unknown map {name:?}"))?;
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(format!("invalid map name {name:?}"));
        }
        let path = [dir.join(name), dir.join(format!("{name}.map"))]
            .into_iter()
            .find(|p| p.is_file())
            .ok_or_else(|| format!("unknown map {name:?}"))?;
        self.load_file(&path)
    }

    pub fn load_file(&self, path: &Path) -> Result<OccupancyGrid, String> {
        let map = MapFile::load(path).map_err(|e| e.to_string())?;
        let mut grid = map.build_grid(self.config.planner.inflation).map_err(|e| e.to_string())?;
        grid.unknown_is_occupied = self.config.planner.unknown_is_occupied;
        Ok(grid)
    }
}

/// Worst state mismatch when one trajectory replaced another.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SpliceAudit {
    pub splices: usize,
    pub max_error: f64,
    /// Emitted trajectories that failed the pipe check.
    pub unsafe_emitted: usize,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    planner: Planner,
    library: MapLibrary,
    grid: OccupancyGrid,
    map_name: String,
    home: Vec3,
    t: f64,
    state: RobotState,
    traj: Option<UniformBSpline>,
    goal: Option<Vec3>,
    replan_due: bool,
    last_plan: f64,
    audit: SpliceAudit,
}

impl Simulation {
    pub fn new(config: Config, grid: OccupancyGrid, map_name: &str, home: Vec3, library: MapLibrary) -> Self {
        let mut planner = Planner::new(config);
        planner.record_pairs = true;
        Self {
            planner,
            library,
            grid,
            map_name: map_name.to_string(),
            home,
            t: 0.0,
            state: RobotState::at_rest(home),
            traj: None,
            goal: None,
            replan_due: false,
            last_plan: 0.0,
            audit: SpliceAudit::default(),
        }
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> RobotState {
        self.state
    }

    pub fn trajectory(&self) -> Option<&UniformBSpline> {
        self.traj.as_ref()
    }

    pub fn goal(&self) -> Option<Vec3> {
        self.goal
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.grid
    }

    pub fn audit(&self) -> SpliceAudit {
        self.audit
    }

    pub fn handle_line(&mut self, line: &str) -> Vec<Outbound> {
        match serde_json::from_str::<Inbound>(line) {
            Ok(msg) => self.handle(msg),
            Err(e) => vec![Outbound::Error { message: format!("bad message: {e}") }],
        }
    }

    pub fn handle(&mut self, msg: Inbound) -> Vec<Outbound> {
        match msg {
            Inbound::Goal { x, y, z } => {
                let g = Vec3::new(x, y, z);
                if !g.iter().all(|c| c.is_finite()) {
                    return vec![Outbound::Error { message: "goal must be finite".into() }];
                }
                if self.grid.is_occupied(g) != Occupancy::Free {
                    return vec![Outbound::Error { message: "goal is not free".into() }];
                }
                self.goal = Some(g);
                self.replan_due = true;
                vec![Outbound::status("goal_accepted", None)]
            }
            Inbound::Reset => {
                self.reset();
                vec![Outbound::status("reset", None), self.state_message()]
            }
            Inbound::LoadMap { name } => match self.library.load(&name) {
                Ok(grid) => {
                    self.grid = grid;
                    self.map_name = name;
                    let mut out = vec![self.map_message(), Outbound::status("map_loaded", None)];
                    if let Some(tr) = &self.traj {
                        if !pipe_collision_check(tr, &self.grid, self.planner.config.planner.pipe_radius) {
                            self.replan_due = true;
                            out.push(Outbound::status("trajectory_blocked", None));
                        }
                    }
                    out
                }
                Err(e) => vec![Outbound::Error { message: e }],
            },
        }
    }

    fn reset(&mut self) {
        self.planner.reset();
        self.state = RobotState::at_rest(self.home);
        self.traj = None;
        self.goal = None;
        self.replan_due = false;
    }

    /// Moves the robot `dt` along the active trajectory and replans when a
    /// new goal arrived, the replan period elapsed or the map invalidated
    /// the trajectory.
    pub fn advance(&mut self, dt: f64) -> Vec<Outbound> {
        let mut out = Vec::new();
        self.t += dt.max(0.0);
        if let Some(tr) = &self.traj {
            self.state = RobotState::on(tr, self.t).expect("clamped time");
        }
        if let Some(g) = self.goal {
            let done = self.traj.as_ref().map_or(false, |tr| self.t >= tr.t_end());
            if done && (self.state.pos - g).norm() < GOAL_REACHED {
                self.goal = None;
                self.replan_due = false;
                out.push(Outbound::status("reached", None));
                return out;
            }
            let period = self.planner.config.planner.replan_period;
            if self.replan_due || self.t - self.last_plan >= period - 1e-9 {
                out.extend(self.replan(g));
            }
        } else if self.replan_due {
            // map change with no goal: stop where the robot would come to rest
            let hold = self.traj.as_ref().map(|tr| tr.evaluate(tr.t_end(), 0).expect("end")).unwrap_or(self.state.pos);
            out.extend(self.replan(hold));
        }
        out
    }

    fn replan(&mut self, goal: Vec3) -> Vec<Outbound> {
        self.replan_due = false;
        self.last_plan = self.t;
        let outcome = self.planner.plan(self.t, &self.state, goal, &self.grid);
        let mut out = Vec::new();
        match (outcome.status, outcome.trajectory) {
            (PlanStatus::Failed, _) | (_, None) => {
                // keep braking along the current trajectory
                out.push(Outbound::status("failed", outcome.message));
            }
            (status, Some(tr)) => {
                let err = match RobotState::on(&tr, self.t) {
                    Ok(s) => (s.pos - self.state.pos)
                        .norm()
                        .max((s.vel - self.state.vel).norm())
                        .max((s.acc - self.state.acc).norm()),
                    Err(_) => f64::INFINITY,
                };
                self.audit.splices += 1;
                self.audit.max_error = self.audit.max_error.max(err);
                if !pipe_collision_check(&tr, &self.grid, self.planner.config.planner.pipe_radius) {
                    self.audit.unsafe_emitted += 1;
                }
                out.push(trajectory_message(&tr, &outcome.pair_history));
                out.push(Outbound::status(status.name(), None));
                self.traj = Some(tr);
            }
        }
        out
    }

    pub fn state_message(&self) -> Outbound {
        Outbound::State {
            t: self.t,
            pos: arr(self.state.pos),
            vel: arr(self.state.vel),
            acc: arr(self.state.acc),
        }
    }

    pub fn trajectory_message(&self) -> Option<Outbound> {
        self.traj.as_ref().map(|tr| trajectory_message(tr, &[]))
    }

    pub fn map_message(&self) -> Outbound {
        let (lo, hi) = self.grid.bounds();
        let mut boxes = Vec::new();
        let mut cylinders = Vec::new();
        for obs in self.grid.obstacles() {
            match *obs {
                Obstacle::Cylinder { x, y, radius, z_min, z_max } => cylinders.push([x, y, radius, z_min, z_max]),
                _ => {
                    let (a, b) = obs.aabb();
                    boxes.push([a[0], a[1], a[2], b[0], b[1], b[2]]);
                }
            }
        }
        Outbound::Map {
            name: self.map_name.clone(),
            bounds: [arr(lo), arr(hi)],
            boxes,
            cylinders,
        }
    }
}

fn trajectory_message(tr: &UniformBSpline, history: &[PairRecord]) -> Outbound {
    let mut latest: BTreeMap<usize, &PairRecord> = BTreeMap::new();
    for rec in history {
        latest.insert(rec.index, rec);
    }
    let pairs = latest
        .values()
        .flat_map(|rec| rec.pairs.iter().map(|p| PairMsg { index: rec.index, p: p.p, v: p.v }))
        .collect();
    Outbound::Trajectory {
        t0: tr.t0(),
        dt: tr.dt(),
        degree: tr.degree(),
        ctrl_pts: tr.ctrl_pts().iter().map(|q| arr(*q)).collect(),
        pairs,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ServeOptions {
    /// Loop period; one state message per tick.
    pub tick: Duration,
    /// Simulated seconds per wall second.
    pub time_scale: f64,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            tick: Duration::from_millis(20),
            time_scale: 1.0,
        }
    }
}

enum Event {
    Connected(usize, TcpStream),
    Line(usize, String),
    Closed(usize),
}

/// Runs the simulation loop on `listener` until `stop` is set.
pub fn serve(listener: TcpListener, mut sim: Simulation, opts: ServeOptions, stop: Arc<AtomicBool>) -> std::io::Result<()> {
    listener.set_nonblocking(true)?;
    let (tx, rx) = mpsc::channel::<Event>();
    let mut clients: BTreeMap<usize, TcpStream> = BTreeMap::new();
    let mut next_id = 0usize;
    let mut next_tick = Instant::now();

    while !stop.load(Ordering::Relaxed) {
        loop {
            match listener.accept() {
                Ok((stream, addr)) => {
                    log::info!("client {next_id} connected from {addr}");
                    stream.set_nonblocking(false)?;
                    stream.set_write_timeout(Some(Duration::from_millis(200)))?;
                    let reader = stream.try_clone()?;
                    let id = next_id;
                    next_id += 1;
                    let _ = tx.send(Event::Connected(id, stream));
                    let tx = tx.clone();
                    std::thread::spawn(move || {
                        for line in BufReader::new(reader).lines() {
                            match line {
                                Ok(l) if l.trim().is_empty() => continue,
                                Ok(l) => {
                                    if tx.send(Event::Line(id, l)).is_err() {
                                        return;
                                    }
                                }
                                Err(_) => break,
                            }
                        }
                        let _ = tx.send(Event::Closed(id));
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => break,
                Err(e) => return Err(e),
            }
        }

        let mut broadcast = Vec::new();
        while let Ok(ev) = rx.try_recv() {
            match ev {
                Event::Connected(id, stream) => {
                    clients.insert(id, stream);
                    let mut hello = vec![sim.map_message(), sim.state_message()];
                    hello.extend(sim.trajectory_message());
                    send(&mut clients, id, &hello);
                }
                Event::Line(id, line) => {
                    let replies = sim.handle_line(&line);
                    let (errors, rest): (Vec<_>, Vec<_>) =
                        replies.into_iter().partition(|m| matches!(m, Outbound::Error { .. }));
                    send(&mut clients, id, &errors);
                    broadcast.extend(rest);
                }
                Event::Closed(id) => {
                    log::info!("client {id} disconnected");
                    clients.remove(&id);
                }
            }
        }

        broadcast.extend(sim.advance(opts.tick.as_secs_f64() * opts.time_scale));
        broadcast.push(sim.state_message());
        let ids: Vec<usize> = clients.keys().copied().collect();
        for id in ids {
            send(&mut clients, id, &broadcast);
        }

        next_tick += opts.tick;
        let now = Instant::now();
        if next_tick > now {
            std::thread::sleep(next_tick - now);
        } else {
            next_tick = now;
        }
    }
    Ok(())
}

fn send(clients: &mut BTreeMap<usize, TcpStream>, id: usize, msgs: &[Outbound]) {
    if msgs.is_empty() {
        return;
    }
    let Some(stream) = clients.get_mut(&id) else { return };
    let text: String = msgs.iter().map(Outbound::to_line).collect();
    if stream.write_all(text.as_bytes()).is_err() {
        log::info!("dropping client {id}");
        clients.remove(&id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim() -> Simulation {
        let cfg = Config::default();
        let library = MapLibrary { dir: None, config: cfg.clone() };
        let grid = library.load("empty").unwrap();
        Simulation::new(cfg, grid, "empty", Vec3::new(2.0, 5.0, 1.0), library)
    }

    #[test]
    fn messages_round_trip() {
        let m: Inbound = serde_json::from_str(r#"{"type":"goal","x":1,"y":2,"z":3}"#).unwrap();
        assert_eq!(m, Inbound::Goal { x: 1.0, y: 2.0, z: 3.0 });
        let m: Inbound = serde_json::from_str(r#"{"type":"load_map","name":"forest:3"}"#).unwrap();
        assert_eq!(m, Inbound::LoadMap { name: "forest:3".into() });
        assert!(serde_json::from_str::<Inbound>(r#"{"type":"fly"}"#).is_err());
        let line = Outbound::status("ok", None).to_line();
        assert_eq!(line, "{\"type\":\"status\",\"code\":\"ok\"}\n");
    }

    #[test]
    fn holds_without_goal() {
        let mut s = sim();
        for _ in 0..50 {
            assert!(s.advance(0.02).is_empty());
        }
        assert_eq!(s.state(), RobotState::at_rest(Vec3::new(2.0, 5.0, 1.0)));
    }

    #[test]
    fn reaches_goal_on_empty_map() {
        let mut s = sim();
        s.handle(Inbound::Goal { x: 6.0, y: 5.0, z: 1.0 });
        let mut reached = false;
        for _ in 0..1000 {
            if s.advance(0.02).iter().any(|m| matches!(m, Outbound::Status { code, .. } if code == "reached")) {
                reached = true;
                break;
            }
        }
        assert!(reached);
        assert!((s.state().pos - Vec3::new(6.0, 5.0, 1.0)).norm() < 1e-6);
        assert!(s.audit().max_error < 1e-6);
    }

    #[test]
    fn rejects_bad_input() {
        let mut s = sim();
        assert!(matches!(s.handle_line("not json")[0], Outbound::Error { .. }));
        assert!(matches!(s.handle_line(r#"{"type":"goal","x":1e9,"y":0,"z":0}"#)[0], Outbound::Error { .. }));
        assert!(matches!(s.handle_line(r#"{"type":"load_map","name":"../etc"}"#)[0], Outbound::Error { .. }));
        assert!(matches!(s.handle_line(r#"{"type":"load_map","name":"forest:x"}"#)[0], Outbound::Error { .. }));
    }
}
