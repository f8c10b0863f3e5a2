//! Penalty terms over control points and their analytic gradients.
//!
//! Every term returns a [`CostGrad`] whose gradient has one entry per
//! control point. The combined costs zero the entries of fixed points.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::UniformBSpline;
use crate::rebound::{distance, PVPair};
use crate::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    pub lambda_smooth: f64,
    pub lambda_collision: f64,
    pub lambda_feasible: f64,
    pub lambda_fit: f64,
    pub w_v: f64,
    pub w_a: f64,
    pub w_j: f64,
    /// Clearance `s_f` (m).
    pub s_f: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub j_max: f64,
    pub lambda_elastic: f64,
    pub cj_ratio: f64,
    /// Axial semi-axis of the fitting ellipsoid (m).
    pub fit_a: f64,
    /// Radial semi-axis of the fitting ellipsoid (m).
    pub fit_b: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            lambda_smooth: 1e-5,
            lambda_collision: 5.0,
            lambda_feasible: 0.1,
            lambda_fit: 1.0,
            w_v: 1.0,
            w_a: 1.0,
            w_j: 1.0,
            s_f: 0.5,
            v_max: 2.0,
            a_max: 3.0,
            j_max: 20.0,
            lambda_elastic: 0.95,
            cj_ratio: 1.05,
            fit_a: 0.5,
            fit_b: 0.25,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{0} must be non-negative and finite")]
    NegativeWeight(&'static str),
    #[error("{0} must be positive and finite")]
    NonPositive(&'static str),
    #[error("lambda_elastic must lie in (0, 1)")]
    Elastic,
    #[error("cj_ratio must exceed lambda_elastic")]
    SplitPoint,
    #[error("fit_a must be at least fit_b")]
    Ellipse,
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let weights = [
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_collision", self.lambda_collision),
            ("lambda_feasible", self.lambda_feasible),
            ("lambda_fit", self.lambda_fit),
            ("w_v", self.w_v),
            ("w_a", self.w_a),
            ("w_j", self.w_j),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(ConfigError::NegativeWeight(name));
            }
        }
        let positive = [
            ("s_f", self.s_f),
            ("v_max", self.v_max),
            ("a_max", self.a_max),
            ("j_max", self.j_max),
            ("fit_b", self.fit_b),
        ];
        for (name, w) in positive {
            if !(w > 0.0 && w.is_finite()) {
                return Err(ConfigError::NonPositive(name));
            }
        }
        if !(self.lambda_elastic > 0.0 && self.lambda_elastic < 1.0) {
            return Err(ConfigError::Elastic);
        }
        if !(self.cj_ratio > self.lambda_elastic && self.cj_ratio.is_finite()) {
            return Err(ConfigError::SplitPoint);
        }
        if !(self.fit_a >= self.fit_b && self.fit_a.is_finite()) {
            return Err(ConfigError::Ellipse);
        }
        Ok(())
    }

    /// Metric for derivative order 1, 2 or 3.
    pub fn metric(&self, order: usize) -> FeasibilityMetric {
        let limit = match order {
            1 => self.v_max,
            2 => self.a_max,
            _ => self.j_max,
        };
        FeasibilityMetric::new(limit, self.lambda_elastic, self.cj_ratio)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostGrad {
    pub value: f64,
    pub grad: Vec<Vec3>,
}

impl CostGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![Vec3::zeros(); n],
        }
    }

    /// `self += w * other`.
    pub fn add_scaled(&mut self, w: f64, other: &CostGrad) {
        self.value += w * other.value;
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g += o * w;
        }
    }

    /// Zeroes the gradient of the first and last `n_fixed` entries.
    pub fn zero_fixed(&mut self, n_fixed: usize) {
        let n = self.grad.len();
        for i in 0..n {
            if i < n_fixed || i + n_fixed >= n {
                self.grad[i] = Vec3::zeros();
            }
        }
    }
}

/// `sum |A_i|^2 + sum |J_i|^2` over acceleration and jerk control points.
pub fn smoothness(q: &[Vec3], dt: f64) -> CostGrad {
    let n = q.len();
    let mut out = CostGrad::zeros(n);
    let (dt2, dt3) = (dt * dt, dt * dt * dt);
    for i in 0..n.saturating_sub(2) {
        let a = (q[i + 2] - q[i + 1] * 2.0 + q[i]) / dt2;
        out.value += a.norm_squared();
        let g = a * (2.0 / dt2);
        out.grad[i] += g;
        out.grad[i + 1] -= g * 2.0;
        out.grad[i + 2] += g;
    }
    for i in 0..n.saturating_sub(3) {
        let j = (q[i + 3] - q[i + 2] * 3.0 + q[i + 1] * 3.0 - q[i]) / dt3;
        out.value += j.norm_squared();
        let g = j * (2.0 / dt3);
        out.grad[i] -= g;
        out.grad[i + 1] += g * 3.0;
        out.grad[i + 2] -= g * 3.0;
        out.grad[i + 3] += g;
    }
    out
}

/// Polynomial pieces of the collision penalty in `c = s_f - d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollisionBranch {
    Zero,
    Cubic,
    Quadratic,
}

impl CollisionBranch {
    pub fn select(c: f64, s_f: f64) -> Self {
        if c <= 0.0 {
            Self::Zero
        } else if c <= s_f {
            Self::Cubic
        } else {
            Self::Quadratic
        }
    }

    /// Value, first and second derivative of this piece at `c`.
    pub fn eval(self, c: f64, s_f: f64) -> [f64; 3] {
        match self {
            Self::Zero => [0.0, 0.0, 0.0],
            Self::Cubic => [c * c * c, 3.0 * c * c, 6.0 * c],
            Self::Quadratic => [
                3.0 * s_f * c * c - 3.0 * s_f * s_f * c + s_f * s_f * s_f,
                6.0 * s_f * c - 3.0 * s_f * s_f,
                6.0 * s_f,
            ],
        }
    }
}

/// Collision penalty and its derivative with respect to `c`.
pub fn collision_penalty(c: f64, s_f: f64) -> [f64; 3] {
    CollisionBranch::select(c, s_f).eval(c, s_f)
}

/// Sum of collision penalties over all pairs; `pairs[i]` belongs to `q[i]`.
pub fn collision(q: &[Vec3], pairs: &[Vec<PVPair>], s_f: f64) -> CostGrad {
    let mut out = CostGrad::zeros(q.len());
    for (i, (qi, prs)) in q.iter().zip(pairs).enumerate() {
        for pr in prs {
            let c = s_f - distance(*qi, pr);
            let [val, dc, _] = collision_penalty(c, s_f);
            out.value += val;
            // dc/dQ = -v
            out.grad[i] -= pr.v * dc;
        }
    }
    out
}

/// Piecewise penalty on one derivative component with limit `c_m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityMetric {
    /// Start of the penalized region, `lambda * c_m`.
    pub knee: f64,
    /// Cubic/quadratic split, `cj_ratio * c_m`.
    pub split: f64,
    pub a2: f64,
    pub b2: f64,
    pub c2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeasibilityBranch {
    NegQuadratic,
    NegCubic,
    Dead,
    PosCubic,
    PosQuadratic,
}

impl FeasibilityMetric {
    pub fn new(limit: f64, lambda: f64, cj_ratio: f64) -> Self {
        let knee = lambda * limit;
        let split = cj_ratio * limit;
        let e = split - knee;
        let a2 = 3.0 * e;
        let b2 = 3.0 * e * e - 2.0 * a2 * split;
        let c2 = e * e * e - a2 * split * split - b2 * split;
        Self { knee, split, a2, b2, c2 }
    }

    pub fn select(&self, x: f64) -> FeasibilityBranch {
        if x < -self.split {
            FeasibilityBranch::NegQuadratic
        } else if x < -self.knee {
            FeasibilityBranch::NegCubic
        } else if x <= self.knee {
            FeasibilityBranch::Dead
        } else if x <= self.split {
            FeasibilityBranch::PosCubic
        } else {
            FeasibilityBranch::PosQuadratic
        }
    }

    /// Value, first and second derivative of one piece at `x`.
    pub fn eval_branch(&self, branch: FeasibilityBranch, x: f64) -> [f64; 3] {
        let (a, b, c) = (self.a2, self.b2, self.c2);
        match branch {
            FeasibilityBranch::Dead => [0.0, 0.0, 0.0],
            FeasibilityBranch::PosCubic => {
                let e = x - self.knee;
                [e * e * e, 3.0 * e * e, 6.0 * e]
            }
            FeasibilityBranch::NegCubic => {
                let e = -x - self.knee;
                [e * e * e, -3.0 * e * e, 6.0 * e]
            }
            FeasibilityBranch::PosQuadratic => [a * x * x + b * x + c, 2.0 * a * x + b, 2.0 * a],
            FeasibilityBranch::NegQuadratic => [a * x * x - b * x + c, 2.0 * a * x - b, 2.0 * a],
        }
    }

    pub fn eval(&self, x: f64) -> [f64; 3] {
        self.eval_branch(self.select(x), x)
    }
}

/// Weighted per-axis metric over velocity, acceleration and jerk control
/// points.
pub fn feasibility(q: &[Vec3], dt: f64, cfg: &PenaltyConfig) -> CostGrad {
    let n = q.len();
    let mut out = CostGrad::zeros(n);
    // finite-difference stencils of order 1..3 and their scale
    let stencils: [(&[f64], f64, f64); 3] = [
        (&[-1.0, 1.0], 1.0 / dt, cfg.w_v),
        (&[1.0, -2.0, 1.0], 1.0 / (dt * dt), cfg.w_a),
        (&[-1.0, 3.0, -3.0, 1.0], 1.0 / (dt * dt * dt), cfg.w_j),
    ];
    for (order, (st, scale, w)) in stencils.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let m = cfg.metric(order + 1);
        for i in 0..n.saturating_sub(st.len() - 1) {
            let mut d = Vec3::zeros();
            for (k, s) in st.iter().enumerate() {
                d += q[i + k] * *s;
            }
            d *= *scale;
            for ax in 0..3 {
                let [val, df, _] = m.eval(d[ax]);
                if val == 0.0 && df == 0.0 {
                    continue;
                }
                out.value += w * val;
                for (k, s) in st.iter().enumerate() {
                    out.grad[i + k][ax] += w * df * s * scale;
                }
            }
        }
    }
    out
}

/// Precomputed samples of the reference curve for the fitness term.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTarget {
    /// Basis rows of the fitted spline at its sample times.
    rows: Vec<(usize, Vec<f64>)>,
    targets: Vec<Vec3>,
    /// Unit tangent of the reference curve; `None` if it is at rest
    /// everywhere.
    tangents: Vec<Option<Vec3>>,
    n_ctrl: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("fitted spline layout does not match")]
    Layout,
    #[error(transparent)]
    Spline(#[from] crate::bspline::SplineError),
}

impl FitTarget {
    /// Pairs `fit(t0 + k dt_f / sub)` with `reference(t0 + k dt / sub)` for
    /// `k = 0..=floor(sub * T / dt)`, where `fit` shares the degree, control
    /// point count and start time of `reference` and has knot span `dt_f`.
    pub fn new(reference: &UniformBSpline, dt_f: f64, subdivisions: usize) -> Result<Self, FitError> {
        let sub = subdivisions.max(1) as f64;
        let dt = reference.dt();
        let t0 = reference.t0();
        let template = reference.with_dt(dt_f)?;
        let count = (sub * reference.duration() / dt + 1e-9).floor() as usize;
        let mut rows = Vec::with_capacity(count + 1);
        let mut targets = Vec::with_capacity(count + 1);
        let mut raw_tangents = Vec::with_capacity(count + 1);
        for k in 0..=count {
            let a = k as f64 / sub;
            let ts = t0 + a * dt;
            let tf = t0 + a * dt_f;
            rows.push(template.basis_row(tf, 0)?);
            targets.push(reference.evaluate(ts, 0)?);
            raw_tangents.push(reference.evaluate(ts, 1)?);
        }
        let speed_eps = 1e-9;
        let moving: Vec<usize> = (0..raw_tangents.len())
            .filter(|&k| raw_tangents[k].norm() > speed_eps)
            .collect();
        let tangents = (0..raw_tangents.len())
            .map(|k| {
                let src = if raw_tangents[k].norm() > speed_eps {
                    Some(k)
                } else {
                    moving.iter().copied().min_by_key(|&m| m.abs_diff(k))
                };
                src.map(|m| raw_tangents[m].normalize())
            })
            .collect();
        Ok(Self {
            rows,
            targets,
            tangents,
            n_ctrl: reference.len(),
        })
    }

    pub fn sample_count(&self) -> usize {
        self.targets.len()
    }

    pub fn n_ctrl(&self) -> usize {
        self.n_ctrl
    }
}

/// Axial and radial displacement of `delta` with respect to unit `u`.
pub fn anisotropic_split(delta: Vec3, u: Vec3) -> (f64, f64) {
    let da = delta.dot(&u);
    let dr = delta.cross(&u).norm();
    (da, dr)
}

/// Mean over samples of `d_a^2 / a^2 + d_r^2 / b^2`.
pub fn fitness(q_f: &[Vec3], target: &FitTarget, fit_a: f64, fit_b: f64) -> CostGrad {
    let n = q_f.len();
    let mut out = CostGrad::zeros(n);
    let k_count = target.targets.len();
    if k_count == 0 {
        return out;
    }
    let inv_k = 1.0 / k_count as f64;
    let (ia2, ib2) = (1.0 / (fit_a * fit_a), 1.0 / (fit_b * fit_b));
    for ((row, tgt), tan) in target.rows.iter().zip(&target.targets).zip(&target.tangents) {
        let (first, w) = row;
        let mut pos = Vec3::zeros();
        for (k, wk) in w.iter().enumerate() {
            pos += q_f[first + k] * *wk;
        }
        let delta = pos - tgt;
        let (val, g) = match tan {
            Some(u) => {
                let da = delta.dot(u);
                let radial = delta - u * da;
                (
                    da * da * ia2 + radial.norm_squared() * ib2,
                    u * (2.0 * da * ia2) + radial * (2.0 * ib2),
                )
            }
            None => (delta.norm_squared() * ib2, delta * (2.0 * ib2)),
        };
        out.value += val * inv_k;
        for (k, wk) in w.iter().enumerate() {
            out.grad[first + k] += g * (wk * inv_k);
        }
    }
    out
}

/// `lambda_s J_s + lambda_c J_c + lambda_d J_d` with fixed entries zeroed.
pub fn total_rebound_cost(
    q: &[Vec3],
    pairs: &[Vec<PVPair>],
    dt: f64,
    n_fixed: usize,
    cfg: &PenaltyConfig,
) -> CostGrad {
    let mut out = CostGrad::zeros(q.len());
    if cfg.lambda_smooth != 0.0 {
        out.add_scaled(cfg.lambda_smooth, &smoothness(q, dt));
    }
    if cfg.lambda_collision != 0.0 {
        out.add_scaled(cfg.lambda_collision, &collision(q, pairs, cfg.s_f));
    }
    if cfg.lambda_feasible != 0.0 {
        out.add_scaled(cfg.lambda_feasible, &feasibility(q, dt, cfg));
    }
    out.zero_fixed(n_fixed);
    out
}

/// `lambda_s J_s + lambda_d J_d + lambda_f J_f` with fixed entries zeroed.
pub fn total_refine_cost(
    q_f: &[Vec3],
    dt_f: f64,
    target: &FitTarget,
    n_fixed: usize,
    cfg: &PenaltyConfig,
) -> CostGrad {
    let mut out = CostGrad::zeros(q_f.len());
    if cfg.lambda_smooth != 0.0 {
        out.add_scaled(cfg.lambda_smooth, &smoothness(q_f, dt_f));
    }
    if cfg.lambda_feasible != 0.0 {
        out.add_scaled(cfg.lambda_feasible, &feasibility(q_f, dt_f, cfg));
    }
    if cfg.lambda_fit != 0.0 {
        out.add_scaled(cfg.lambda_fit, &fitness(q_f, target, cfg.fit_a, cfg.fit_b));
    }
    out.zero_fixed(n_fixed);
    out
}

/// Flattens the free control points (all but the first and last `n_fixed`).
pub fn pack_free(q: &[Vec3], n_fixed: usize) -> Vec<f64> {
    let n = q.len();
    let mut x = Vec::with_capacity(3 * n.saturating_sub(2 * n_fixed));
    for p in &q[n_fixed..n - n_fixed] {
        x.extend_from_slice(p.as_slice());
    }
    x
}

/// Writes flat free variables back into `q`.
pub fn unpack_free(x: &[f64], q: &mut [Vec3], n_fixed: usize) {
    let n = q.len();
    for (k, p) in q[n_fixed..n - n_fixed].iter_mut().enumerate() {
        *p = Vec3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]);
    }
}

/// Flattens the free part of a full-length gradient.
pub fn pack_grad(grad: &[Vec3], n_fixed: usize, out: &mut [f64]) {
    let n = grad.len();
    for (k, g) in grad[n_fixed..n - n_fixed].iter().enumerate() {
        out[3 * k..3 * k + 3].copy_from_slice(g.as_slice());
    }
}
