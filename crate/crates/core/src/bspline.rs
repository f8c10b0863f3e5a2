//! Uniform B-spline trajectories.
//!
//! A spline of degree `p` with control points `Q_0..Q_{n-1}` and knot interval
//! `dt` has the implicit knot vector `t_m = t0 + (m - p) * dt`. The valid
//! evaluation domain is `[t0, t0 + (n - p) * dt]`; span `s` of that domain is
//! governed by `Q_s..=Q_{s+p}`.
//!
//! Derivatives of a uniform spline are again uniform splines over the same
//! domain, with control points given by forward differences divided by `dt`.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::Vec3;

/// Requests this close to a domain endpoint are clamped onto it.
pub const DOMAIN_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("degree {degree} spline needs at least {needed} control points, got {got}")]
    TooFewControlPoints {
        degree: usize,
        needed: usize,
        got: usize,
    },
    #[error("knot interval must be positive and finite, got {0}")]
    BadInterval(f64),
    #[error("t = {t} is outside the valid domain [{start}, {end}]")]
    OutOfDomain { t: f64, start: f64, end: f64 },
    #[error("derivative order {order} is not available for a degree {degree} spline")]
    BadOrder { order: usize, degree: usize },
    #[error("control point {index} has no neighbour on both sides (count {count})")]
    BoundaryIndex { index: usize, count: usize },
    #[error("least-squares system is rank deficient")]
    RankDeficient,
    #[error("non-finite input")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformBSpline {
    degree: usize,
    dt: f64,
    t0: f64,
    ctrl_pts: Vec<Vec3>,
}

impl UniformBSpline {
    pub fn new(degree: usize, dt: f64, t0: f64, ctrl_pts: Vec<Vec3>) -> Result<Self, SplineError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(SplineError::BadInterval(dt));
        }
        if ctrl_pts.len() < degree + 1 {
            return Err(SplineError::TooFewControlPoints {
                degree,
                needed: degree + 1,
                got: ctrl_pts.len(),
            });
        }
        if !t0.is_finite() || ctrl_pts.iter().any(|q| !q.iter().all(|c| c.is_finite())) {
            return Err(SplineError::NonFinite);
        }
        Ok(Self {
            degree,
            dt,
            t0,
            ctrl_pts,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn ctrl_pts(&self) -> &[Vec3] {
        &self.ctrl_pts
    }

    pub fn into_ctrl_pts(self) -> Vec<Vec3> {
        self.ctrl_pts
    }

    pub fn len(&self) -> usize {
        self.ctrl_pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ctrl_pts.is_empty()
    }

    /// Number of knot spans in the valid domain.
    pub fn span_count(&self) -> usize {
        self.ctrl_pts.len() - self.degree
    }

    pub fn duration(&self) -> f64 {
        self.span_count() as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + self.duration()
    }

    /// Same control points, different knot interval (uniform time scaling).
    pub fn with_dt(&self, dt: f64) -> Result<Self, SplineError> {
        Self::new(self.degree, dt, self.t0, self.ctrl_pts.clone())
    }

    pub fn with_t0(&self, t0: f64) -> Self {
        Self { t0, ..self.clone() }
    }

    pub fn with_ctrl_pts(&self, ctrl_pts: Vec<Vec3>) -> Result<Self, SplineError> {
        Self::new(self.degree, self.dt, self.t0, ctrl_pts)
    }

    fn knot(&self, m: usize) -> f64 {
        self.t0 + (m as f64 - self.degree as f64) * self.dt
    }

    /// Clamps `t` into the domain and returns `(span, t)`.
    fn locate(&self, t: f64) -> Result<(usize, f64), SplineError> {
        let start = self.t0;
        let end = self.t_end();
        if !t.is_finite() || t < start - DOMAIN_EPS || t > end + DOMAIN_EPS {
            return Err(SplineError::OutOfDomain { t, start, end });
        }
        let t = t.clamp(start, end);
        let span = (((t - start) / self.dt).floor() as usize).min(self.span_count() - 1);
        Ok((span, t))
    }

    /// De Boor recursion on span `span`.
    fn de_boor(&self, span: usize, t: f64) -> Vec3 {
        let p = self.degree;
        let k = span + p;
        let mut d: Vec<Vec3> = self.ctrl_pts[span..=span + p].to_vec();
        for r in 1..=p {
            for j in (r..=p).rev() {
                let i = j + k - p;
                let lo = self.knot(i);
                let hi = self.knot(i + p + 1 - r);
                let alpha = (t - lo) / (hi - lo);
                d[j] = d[j - 1] * (1.0 - alpha) + d[j] * alpha;
            }
        }
        d[p]
    }

    /// Position (`order == 0`) or the `order`-th time derivative at `t`.
    pub fn evaluate(&self, t: f64, order: usize) -> Result<Vec3, SplineError> {
        if order > self.degree {
            return Err(SplineError::BadOrder {
                order,
                degree: self.degree,
            });
        }
        if order == 0 {
            let (span, t) = self.locate(t)?;
            return Ok(self.de_boor(span, t));
        }
        self.derivative_ctrl_points(order)?.evaluate(t, 0)
    }

    /// Position, velocity and acceleration at `t`.
    pub fn state(&self, t: f64) -> Result<[Vec3; 3], SplineError> {
        Ok([
            self.evaluate(t, 0)?,
            self.evaluate(t, 1)?,
            self.evaluate(t, 2)?,
        ])
    }

    /// The `k`-th derivative as a spline of degree `p - k`.
    pub fn derivative_ctrl_points(&self, k: usize) -> Result<Self, SplineError> {
        if k > self.degree {
            return Err(SplineError::BadOrder {
                order: k,
                degree: self.degree,
            });
        }
        let mut pts = self.ctrl_pts.clone();
        for _ in 0..k {
            pts = pts.windows(2).map(|w| (w[1] - w[0]) / self.dt).collect();
        }
        Self::new(self.degree - k, self.dt, self.t0, pts)
    }

    /// `R_i = (Q_{i+1} - Q_{i-1}) / (2 dt)`, the tangent attached to an
    /// interior control point.
    pub fn ctrl_point_tangent(&self, i: usize) -> Result<Vec3, SplineError> {
        ctrl_point_tangent(&self.ctrl_pts, self.dt, i)
    }

    /// Parameter at which control point `i` has most influence (its Greville
    /// abscissa), clamped into the domain.
    pub fn greville(&self, i: usize) -> f64 {
        let offset = i as f64 - (self.degree as f64 - 1.0) / 2.0;
        (self.t0 + offset * self.dt).clamp(self.t0, self.t_end())
    }

    /// Index of the control point whose Greville abscissa is nearest to `t`.
    pub fn nearest_ctrl_index(&self, t: f64) -> usize {
        let idx = (t - self.t0) / self.dt + (self.degree as f64 - 1.0) / 2.0;
        (idx.round().max(0.0) as usize).min(self.ctrl_pts.len() - 1)
    }

    /// The linear map from control points to `evaluate(t, order)`, as the
    /// index of the first influencing control point plus `p + 1` weights.
    pub fn basis_row(&self, t: f64, order: usize) -> Result<(usize, Vec<f64>), SplineError> {
        if order > self.degree {
            return Err(SplineError::BadOrder {
                order,
                degree: self.degree,
            });
        }
        let (span, t) = self.locate(t)?;
        Ok((span, basis_weights(self.degree, self.dt, self.t0, span, t, order)))
    }

    /// Uniform sample times covering the domain with spacing at most `step`.
    pub fn sample_times(&self, step: f64) -> Vec<f64> {
        let n = (self.duration() / step).ceil().max(1.0) as usize;
        (0..=n)
            .map(|i| self.t0 + self.duration() * i as f64 / n as f64)
            .collect()
    }
}

pub fn ctrl_point_tangent(ctrl: &[Vec3], dt: f64, i: usize) -> Result<Vec3, SplineError> {
    if i == 0 || i + 1 >= ctrl.len() {
        return Err(SplineError::BoundaryIndex {
            index: i,
            count: ctrl.len(),
        });
    }
    Ok((ctrl[i + 1] - ctrl[i - 1]) / (2.0 * dt))
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Weights of `Q_span..=Q_{span+p}` producing the `order`-th derivative at
/// `t`, computed by running the de Boor recursion on unit coefficients of the
/// derivative spline and mapping back through the forward differences.
fn basis_weights(degree: usize, dt: f64, t0: f64, span: usize, t: f64, order: usize) -> Vec<f64> {
    let q = degree - order;
    let knot = |m: usize| t0 + (m as f64 - q as f64) * dt;
    let k = span + q;
    // weights over derivative control points span..=span+q
    let mut dw = vec![0.0; q + 1];
    for (unit, slot) in dw.iter_mut().enumerate() {
        let mut d = vec![0.0; q + 1];
        d[unit] = 1.0;
        for r in 1..=q {
            for j in (r..=q).rev() {
                let i = j + k - q;
                let lo = knot(i);
                let hi = knot(i + q + 1 - r);
                let alpha = (t - lo) / (hi - lo);
                d[j] = d[j - 1] * (1.0 - alpha) + d[j] * alpha;
            }
        }
        *slot = d[q];
    }
    let scale = dt.powi(order as i32);
    let mut w = vec![0.0; degree + 1];
    for (j, &dwj) in dw.iter().enumerate() {
        for m in 0..=order {
            let sign = if (order - m) % 2 == 0 { 1.0 } else { -1.0 };
            w[j + m] += dwj * sign * binomial(order, m) / scale;
        }
    }
    w
}

/// Position, velocity and acceleration imposed at each end of a fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryStates {
    pub start: [Vec3; 3],
    pub end: [Vec3; 3],
}

/// Least-squares spline through timed samples with exact boundary
/// position/velocity/acceleration, solved in closed form through the KKT
/// system of the equality-constrained problem.
///
/// The spline starts at `t0` and has `n_ctrl` control points spaced `dt`.
pub fn boundary_constrained_lsq_fit(
    samples: &[(f64, Vec3)],
    n_ctrl: usize,
    dt: f64,
    t0: f64,
    degree: usize,
    boundary: &BoundaryStates,
) -> Result<UniformBSpline, SplineError> {
    let finite = |v: &Vec3| v.iter().all(|c| c.is_finite());
    if samples.iter().any(|(t, s)| !t.is_finite() || !finite(s))
        || boundary.start.iter().chain(boundary.end.iter()).any(|v| !finite(v))
    {
        return Err(SplineError::NonFinite);
    }
    // shape-only template for basis rows
    let template = UniformBSpline::new(degree, dt, t0, vec![Vec3::zeros(); n_ctrl])?;
    let orders = degree.min(2) + 1;
    let n_cons = 2 * orders;
    let dim = n_ctrl + n_cons;

    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DMatrix::<f64>::zeros(dim, 3);
    for &(t, s) in samples {
        let (first, w) = template.basis_row(t, 0)?;
        for (a, &wa) in w.iter().enumerate() {
            for (b, &wb) in w.iter().enumerate() {
                kkt[(first + a, first + b)] += wa * wb;
            }
            for axis in 0..3 {
                rhs[(first + a, axis)] += wa * s[axis];
            }
        }
    }
    let ends = [(template.t0(), &boundary.start), (template.t_end(), &boundary.end)];
    let mut row = n_ctrl;
    for (t, states) in ends {
        for (order, value) in states.iter().enumerate().take(orders) {
            let (first, w) = template.basis_row(t, order)?;
            for (a, &wa) in w.iter().enumerate() {
                kkt[(row, first + a)] = wa;
                kkt[(first + a, row)] = wa;
            }
            for axis in 0..3 {
                rhs[(row, axis)] = value[axis];
            }
            row += 1;
        }
    }

    let lu = kkt.full_piv_lu();
    let pivots = lu.u().diagonal().map(f64::abs);
    if !(pivots.max() > 0.0) || pivots.min() <= pivots.max() * 1e-12 {
        return Err(SplineError::RankDeficient);
    }
    let sol = lu.solve(&rhs).ok_or(SplineError::RankDeficient)?;
    let ctrl = (0..n_ctrl)
        .map(|i| Vec3::new(sol[(i, 0)], sol[(i, 1)], sol[(i, 2)]))
        .collect();
    UniformBSpline::new(degree, dt, t0, ctrl)
}

/// Least-squares residual sum for a fitted spline; handy for diagnostics.
pub fn fit_residual(spline: &UniformBSpline, samples: &[(f64, Vec3)]) -> f64 {
    samples
        .iter()
        .map(|&(t, s)| {
            spline
                .evaluate(t, 0)
                .map(|p| (p - s).norm_squared())
                .unwrap_or(f64::INFINITY)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spline(rng: &mut ChaCha8Rng, n: usize, dt: f64) -> UniformBSpline {
        let pts = (0..n)
            .map(|_| Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
            .collect();
        UniformBSpline::new(3, dt, rng.gen_range(-1.0..1.0), pts).unwrap()
    }

    #[test]
    fn constant_curve() {
        let s = UniformBSpline::new(3, 0.2, 0.0, vec![Vec3::new(1.0, 2.0, 3.0); 6]).unwrap();
        for t in [0.0, 0.13, 0.4, s.t_end()] {
            assert!((s.evaluate(t, 0).unwrap() - Vec3::new(1.0, 2.0, 3.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn linear_reproduction() {
        let pts = (0..8).map(|i| Vec3::new(0.5 * i as f64, 0.0, 0.0)).collect();
        let s = UniformBSpline::new(3, 0.25, 1.0, pts).unwrap();
        for t in [1.0, 1.3, 1.77, s.t_end()] {
            let v = s.evaluate(t, 1).unwrap();
            assert!((v - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn domain_and_order_errors() {
        let s = UniformBSpline::new(3, 1.0, 0.0, vec![Vec3::zeros(); 5]).unwrap();
        assert!(matches!(s.evaluate(-0.1, 0), Err(SplineError::OutOfDomain { .. })));
        assert!(matches!(s.evaluate(2.1, 0), Err(SplineError::OutOfDomain { .. })));
        assert!(s.evaluate(2.0 + 5e-10, 0).is_ok());
        assert!(s.evaluate(-5e-10, 0).is_ok());
        assert!(matches!(s.evaluate(1.0, 4), Err(SplineError::BadOrder { .. })));
        assert!(matches!(s.derivative_ctrl_points(4), Err(SplineError::BadOrder { .. })));
        assert!(UniformBSpline::new(3, 1.0, 0.0, vec![Vec3::zeros(); 3]).is_err());
        assert!(UniformBSpline::new(3, 0.0, 0.0, vec![Vec3::zeros(); 4]).is_err());
    }

    #[test]
    fn derivative_control_points_small() {
        let q = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        let s = UniformBSpline::new(2, 1.0, 0.0, q).unwrap();
        let v = s.derivative_ctrl_points(1).unwrap();
        assert_eq!(v.ctrl_pts(), &[Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)]);
        let a = s.derivative_ctrl_points(2).unwrap();
        assert_eq!(a.ctrl_pts(), &[Vec3::zeros()]);
    }

    #[test]
    fn derivative_spline_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let s = random_spline(&mut rng, 10, 0.3);
            for _ in 0..20 {
                let h = 1e-5;
                let t = rng.gen_range(s.t0() + h..s.t_end() - h);
                let fd = (s.evaluate(t + h, 0).unwrap() - s.evaluate(t - h, 0).unwrap()) / (2.0 * h);
                let v = s.evaluate(t, 1).unwrap();
                assert!((fd - v).norm() <= 1e-6 * v.norm().max(1.0), "{fd} vs {v}");
            }
        }
    }

    #[test]
    fn tangent_formula_and_boundaries() {
        let q = vec![Vec3::zeros(), Vec3::new(5.0, 1.0, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        assert_eq!(ctrl_point_tangent(&q, 1.0, 1).unwrap(), Vec3::new(1.0, 0.0, 0.0));
        let q = vec![Vec3::new(1.0, 1.0, 1.0), Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)];
        assert_eq!(ctrl_point_tangent(&q, 0.5, 1).unwrap(), Vec3::zeros());
        assert!(ctrl_point_tangent(&q, 1.0, 0).is_err());
        assert!(ctrl_point_tangent(&q, 1.0, 2).is_err());
    }

    #[test]
    fn tangent_equals_velocity_at_greville_knot() {
        // For a uniform cubic the curve velocity at the knot under Q_i is R_i.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_spline(&mut rng, 9, 0.4);
        for i in 1..s.len() - 1 {
            let t = s.t0() + (i as f64 - 1.0) * s.dt();
            let v = s.evaluate(t, 1).unwrap();
            assert!((v - s.ctrl_point_tangent(i).unwrap()).norm() < 1e-9);
        }
    }

    #[test]
    fn basis_row_reproduces_evaluate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_spline(&mut rng, 8, 0.5);
        for order in 0..=3 {
            for _ in 0..30 {
                let t = rng.gen_range(s.t0()..s.t_end());
                let (first, w) = s.basis_row(t, order).unwrap();
                let p: Vec3 = w.iter().enumerate().map(|(j, wj)| s.ctrl_pts()[first + j] * *wj).sum();
                let e = s.evaluate(t, order).unwrap();
                assert!((p - e).norm() < 1e-8 * e.norm().max(1.0));
            }
        }
    }

    #[test]
    fn fit_straight_line_is_collinear() {
        let dt = 0.2;
        let n = 12;
        let dir = Vec3::new(1.0, 2.0, -0.5).normalize();
        let dur = (n - 3) as f64 * dt;
        let samples: Vec<_> = (0..=30)
            .map(|k| {
                let t = dur * k as f64 / 30.0;
                (t, dir * (1.5 * t))
            })
            .collect();
        let b = BoundaryStates {
            start: [Vec3::zeros(), dir * 1.5, Vec3::zeros()],
            end: [dir * (1.5 * dur), dir * 1.5, Vec3::zeros()],
        };
        let s = boundary_constrained_lsq_fit(&samples, n, dt, 0.0, 3, &b).unwrap();
        assert!(fit_residual(&s, &samples) < 1e-9);
        for q in s.ctrl_pts() {
            assert!(q.cross(&dir).norm() < 1e-9);
        }
    }

    #[test]
    fn fit_constant_at_rest() {
        let c = Vec3::new(1.0, -2.0, 0.5);
        let samples: Vec<_> = (0..20).map(|k| (k as f64 * 0.1, c)).collect();
        let b = BoundaryStates {
            start: [c, Vec3::zeros(), Vec3::zeros()],
            end: [c, Vec3::zeros(), Vec3::zeros()],
        };
        let s = boundary_constrained_lsq_fit(&samples, 10, 0.19 / 7.0 * 10.0, 0.0, 3, &b).unwrap();
        for q in s.ctrl_pts() {
            assert!((q - c).norm() < 1e-9);
        }
    }

    #[test]
    fn fit_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let orig = random_spline(&mut rng, 11, 0.3);
        let samples: Vec<_> = (0..=44)
            .map(|k| {
                let t = orig.t0() + orig.duration() * k as f64 / 44.0;
                (t, orig.evaluate(t, 0).unwrap())
            })
            .collect();
        let b = BoundaryStates {
            start: orig.state(orig.t0()).unwrap(),
            end: orig.state(orig.t_end()).unwrap(),
        };
        let s = boundary_constrained_lsq_fit(&samples, 11, 0.3, orig.t0(), 3, &b).unwrap();
        for &(t, p) in &samples {
            assert!((s.evaluate(t, 0).unwrap() - p).norm() < 1e-6);
        }
    }

    #[test]
    fn fit_too_few_samples_is_rank_error() {
        let samples = vec![(0.0, Vec3::zeros())];
        let b = BoundaryStates {
            start: [Vec3::zeros(); 3],
            end: [Vec3::x(), Vec3::zeros(), Vec3::zeros()],
        };
        let r = boundary_constrained_lsq_fit(&samples, 12, 0.1, 0.0, 3, &b);
        assert_eq!(r.unwrap_err(), SplineError::RankDeficient);
    }
}
