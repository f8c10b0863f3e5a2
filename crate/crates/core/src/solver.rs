//! Unconstrained quasi-Newton minimization.
//!
//! [`lbfgs_minimize`] is limited-memory BFGS: the inverse Hessian is applied
//! implicitly through the two-loop recursion over the `m` most recent
//! `(s, y)` pairs, seeded with a Barzilai-Borwein scaled identity, and steps
//! are chosen by a monotone strong-Wolfe line search.
//!
//! [`bb_minimize`] is the plain Barzilai-Borwein gradient method with a
//! nonmonotone (max of recent values) Armijo safeguard.

use std::collections::VecDeque;

use thiserror::Error;

/// `f(x)` writing the gradient into the second argument.
pub trait Objective {
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl<F: ?Sized> Objective for F
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self(x, grad)
    }
}

/// Which Barzilai-Borwein scalar seeds the inverse Hessian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BbScaling {
    /// `s'y / y'y`
    #[default]
    GradientNormalized,
    /// `s's / s'y`
    StepNormalized,
}

impl BbScaling {
    fn scalar(self, s: &[f64], y: &[f64]) -> f64 {
        match self {
            BbScaling::GradientNormalized => dot(s, y) / dot(y, y),
            BbScaling::StepNormalized => dot(s, s) / dot(s, y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when `||g||_inf <= grad_tolerance`.
    pub grad_tolerance: f64,
    /// Stop when `|f_prev - f| <= rel_f_tolerance * max(|f_prev|, |f|, 1e-12)`.
    pub rel_f_tolerance: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    pub max_function_evals: usize,
    /// Per line search.
    pub max_line_search_evals: usize,
    pub scaling: BbScaling,
    /// Window of the nonmonotone reference value in [`bb_minimize`].
    pub bb_window: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            memory: 8,
            max_iterations: 200,
            grad_tolerance: 1e-4,
            rel_f_tolerance: 1e-6,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            max_function_evals: 2000,
            max_line_search_evals: 30,
            scaling: BbScaling::default(),
            bb_window: 10,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid options: {0}")]
    InvalidOptions(&'static str),
    #[error("objective is not finite at the starting point")]
    NonFiniteStart,
    #[error("search direction is not a descent direction (g'd = {0})")]
    NotDescent(f64),
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(SolverError::InvalidOptions("need 0 < c1 < c2 < 1"));
        }
        if self.memory == 0 {
            return Err(SolverError::InvalidOptions("memory must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
    /// The iteration callback stopped the run so the caller can restart it on
    /// a changed objective.
    Restarted,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub function_evaluations: usize,
    pub status: SolveStatus,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Limited-memory inverse Hessian approximation.
#[derive(Debug, Clone)]
pub struct LbfgsMemory {
    capacity: usize,
    scaling: BbScaling,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    /// BB scalar from the most recent accepted pair; survives `clear`.
    gamma: f64,
}

impl LbfgsMemory {
    pub fn new(capacity: usize, scaling: BbScaling) -> Self {
        Self {
            capacity: capacity.max(1),
            scaling,
            pairs: VecDeque::with_capacity(capacity),
            gamma: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Stores `(s, y)`; returns false and leaves memory untouched when the
    /// curvature `y's` is not safely positive.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        if !(sy > 1e-12) || !all_finite(&s) || !all_finite(&y) {
            return false;
        }
        let gamma = self.scaling.scalar(&s, &y);
        if gamma.is_finite() && gamma > 0.0 {
            self.gamma = gamma;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
        true
    }

    /// Initial inverse Hessian scalar for the next product.
    pub fn initial_scaling(&self) -> f64 {
        self.gamma
    }

    /// `H g` by the two-loop recursion.
    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = vec![0.0; self.pairs.len()];
        for (k, (s, y, rho)) in self.pairs.iter().enumerate().rev() {
            let a = rho * dot(s, &q);
            alphas[k] = a;
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        }
        let h0 = if self.pairs.is_empty() { 1.0 } else { self.gamma };
        let mut r: Vec<f64> = q.iter().map(|v| v * h0).collect();
        for (k, (s, y, rho)) in self.pairs.iter().enumerate() {
            let b = rho * dot(y, &r);
            let c = alphas[k] - b;
            r.iter_mut().zip(s).for_each(|(ri, si)| *ri += c * si);
        }
        r
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.pairs.iter().map(|(s, y, _)| (s.as_slice(), y.as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchResult {
    pub step: f64,
    pub f: f64,
    pub x: Vec<f64>,
    pub grad: Vec<f64>,
    pub evaluations: usize,
    /// False when the budget ran out; the fields then hold the best point seen.
    pub satisfied: bool,
}

/// Cubic interpolation minimizer of the two bracketing points, safeguarded
/// into the interior of the bracket.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let width = hi - lo;
    let fallback = 0.5 * (a + b);
    if !(disc >= 0.0) {
        return fallback;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    if t.is_finite() && t > lo + 0.1 * width && t < hi - 0.1 * width {
        t
    } else {
        fallback
    }
}

/// Strong-Wolfe line search (bracketing then zoom with cubic interpolation).
pub fn strong_wolfe_search<O: Objective + ?Sized>(
    obj: &mut O,
    x: &[f64],
    direction: &[f64],
    f0: f64,
    g0: &[f64],
    initial_step: f64,
    opts: &SolverOptions,
) -> Result<LineSearchResult, SolverError> {
    let dg0 = dot(g0, direction);
    if !(dg0 < 0.0) {
        return Err(SolverError::NotDescent(dg0));
    }
    let (c1, c2) = (opts.wolfe_c1, opts.wolfe_c2);
    let n = x.len();
    let mut evals = 0usize;
    let mut xt = vec![0.0; n];
    let mut gt = vec![0.0; n];
    let eval = |step: f64, obj: &mut O, xt: &mut Vec<f64>, gt: &mut Vec<f64>| {
        for i in 0..n {
            xt[i] = x[i] + step * direction[i];
        }
        let f = obj.evaluate(xt, gt);
        (f, dot(gt, direction))
    };

    let mut best = LineSearchResult {
        step: 0.0,
        f: f0,
        x: x.to_vec(),
        grad: g0.to_vec(),
        evaluations: 0,
        satisfied: false,
    };
    let record = |best: &mut LineSearchResult, step: f64, f: f64, xt: &[f64], gt: &[f64]| {
        if f.is_finite() && f < best.f {
            best.step = step;
            best.f = f;
            best.x.copy_from_slice(xt);
            best.grad.copy_from_slice(gt);
        }
    };

    let budget = opts.max_line_search_evals.max(2);
    let (mut a_prev, mut f_prev, mut d_prev) = (0.0, f0, dg0);
    let mut a = initial_step;
    // bracket [lo, hi] with lo satisfying sufficient decrease
    let (mut lo, mut flo, mut dlo, mut hi, mut fhi, mut dhi);
    loop {
        let (f, d) = eval(a, obj, &mut xt, &mut gt);
        evals += 1;
        if !f.is_finite() || !d.is_finite() {
            // back off from the non-finite region
            if evals >= budget {
                best.evaluations = evals;
                return Ok(best);
            }
            a = a_prev + 0.1 * (a - a_prev);
            continue;
        }
        record(&mut best, a, f, &xt, &gt);
        if f > f0 + c1 * a * dg0 || (evals > 1 && f >= f_prev) {
            (lo, flo, dlo, hi, fhi, dhi) = (a_prev, f_prev, d_prev, a, f, d);
            break;
        }
        if d.abs() <= -c2 * dg0 {
            return Ok(LineSearchResult {
                step: a,
                f,
                x: xt.clone(),
                grad: gt.clone(),
                evaluations: evals,
                satisfied: true,
            });
        }
        if d >= 0.0 {
            (lo, flo, dlo, hi, fhi, dhi) = (a, f, d, a_prev, f_prev, d_prev);
            break;
        }
        if evals >= budget {
            best.evaluations = evals;
            return Ok(best);
        }
        (a_prev, f_prev, d_prev) = (a, f, d);
        a *= 2.5;
    }

    // zoom
    while evals < budget {
        let a = cubic_min(lo, flo, dlo, hi, fhi, dhi);
        let (f, d) = eval(a, obj, &mut xt, &mut gt);
        evals += 1;
        if !f.is_finite() || !d.is_finite() {
            (hi, fhi, dhi) = (a, f64::INFINITY, 0.0);
            continue;
        }
        record(&mut best, a, f, &xt, &gt);
        if f > f0 + c1 * a * dg0 || f >= flo {
            (hi, fhi, dhi) = (a, f, d);
        } else {
            if d.abs() <= -c2 * dg0 {
                return Ok(LineSearchResult {
                    step: a,
                    f,
                    x: xt.clone(),
                    grad: gt.clone(),
                    evaluations: evals,
                    satisfied: true,
                });
            }
            if d * (hi - lo) >= 0.0 {
                (hi, fhi, dhi) = (lo, flo, dlo);
            }
            (lo, flo, dlo) = (a, f, d);
        }
        if (hi - lo).abs() < 1e-16 * lo.abs().max(1.0) {
            break;
        }
    }
    best.evaluations = evals;
    Ok(best)
}

/// Called after every accepted iteration with `(iteration, x, f)`; returning
/// false stops the run with [`SolveStatus::Restarted`].
pub type IterationCallback<'a> = dyn FnMut(usize, &[f64], f64) -> bool + 'a;

pub fn lbfgs_minimize<O: Objective + ?Sized>(
    obj: &mut O,
    x0: &[f64],
    opts: &SolverOptions,
) -> Result<SolveReport, SolverError> {
    lbfgs_minimize_with(obj, x0, opts, &mut |_, _, _| true)
}

pub fn lbfgs_minimize_with<O: Objective + ?Sized>(
    obj: &mut O,
    x0: &[f64],
    opts: &SolverOptions,
    callback: &mut IterationCallback<'_>,
) -> Result<SolveReport, SolverError> {
    opts.validate()?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = obj.evaluate(&x, &mut g);
    let mut evals = 1usize;
    if !f.is_finite() || !all_finite(&g) {
        return Err(SolverError::NonFiniteStart);
    }
    let report = |x: Vec<f64>, f: f64, it: usize, evals: usize, status| SolveReport {
        x,
        f,
        iterations: it,
        function_evaluations: evals,
        status,
    };
    if inf_norm(&g) <= opts.grad_tolerance {
        return Ok(report(x, f, 0, evals, SolveStatus::Converged));
    }

    let mut memory = LbfgsMemory::new(opts.memory, opts.scaling);
    for it in 1..=opts.max_iterations {
        let mut d: Vec<f64> = memory.apply(&g).iter().map(|v| -v).collect();
        let mut dg = dot(&d, &g);
        if !(dg < 0.0) {
            // memory produced a bad direction; fall back to steepest descent
            memory.clear();
            d = g.iter().map(|v| -v).collect();
            dg = dot(&d, &g);
        }
        let step0 = if memory.is_empty() {
            (1.0 / dg.abs().sqrt()).min(1.0)
        } else {
            1.0
        };
        let ls = strong_wolfe_search(obj, &x, &d, f, &g, step0, opts)?;
        evals += ls.evaluations;
        if !ls.satisfied {
            if ls.step > 0.0 && ls.f < f {
                x = ls.x;
                f = ls.f;
            }
            if !memory.is_empty() {
                // retry once from a steepest-descent direction
                memory.clear();
                if evals < opts.max_function_evals {
                    g = ls.grad;
                    if ls.step == 0.0 {
                        obj.evaluate(&x, &mut g);
                        evals += 1;
                    }
                    continue;
                }
            }
            return Ok(report(x, f, it, evals, SolveStatus::LineSearchFailed));
        }
        if !ls.f.is_finite() || !all_finite(&ls.grad) {
            return Ok(report(x, f, it, evals, SolveStatus::NonFinite));
        }
        let s: Vec<f64> = ls.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = ls.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
        memory.push(s, y);
        let f_prev = f;
        x = ls.x;
        f = ls.f;
        g = ls.grad;

        if inf_norm(&g) <= opts.grad_tolerance {
            return Ok(report(x, f, it, evals, SolveStatus::Converged));
        }
        if (f_prev - f).abs() <= opts.rel_f_tolerance * f_prev.abs().max(f.abs()).max(1e-12) {
            return Ok(report(x, f, it, evals, SolveStatus::Converged));
        }
        if !callback(it, &x, f) {
            return Ok(report(x, f, it, evals, SolveStatus::Restarted));
        }
        if evals >= opts.max_function_evals {
            return Ok(report(x, f, it, evals, SolveStatus::MaxIterations));
        }
    }
    Ok(report(x, f, opts.max_iterations, evals, SolveStatus::MaxIterations))
}

/// Barzilai-Borwein gradient method with a nonmonotone Armijo safeguard.
pub fn bb_minimize<O: Objective + ?Sized>(
    obj: &mut O,
    x0: &[f64],
    opts: &SolverOptions,
) -> Result<SolveReport, SolverError> {
    bb_minimize_with(obj, x0, opts, &mut |_, _, _| true)
}

pub fn bb_minimize_with<O: Objective + ?Sized>(
    obj: &mut O,
    x0: &[f64],
    opts: &SolverOptions,
    callback: &mut IterationCallback<'_>,
) -> Result<SolveReport, SolverError> {
    opts.validate()?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = obj.evaluate(&x, &mut g);
    let mut evals = 1usize;
    if !f.is_finite() || !all_finite(&g) {
        return Err(SolverError::NonFiniteStart);
    }
    let report = |x: Vec<f64>, f: f64, it: usize, evals: usize, status| SolveReport {
        x,
        f,
        iterations: it,
        function_evaluations: evals,
        status,
    };
    if inf_norm(&g) <= opts.grad_tolerance {
        return Ok(report(x, f, 0, evals, SolveStatus::Converged));
    }
    let mut history: VecDeque<f64> = VecDeque::from([f]);
    let mut step = (1.0 / dot(&g, &g).sqrt()).min(1.0);
    let mut xt = vec![0.0; n];
    let mut gt = vec![0.0; n];
    for it in 1..=opts.max_iterations {
        let f_ref = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let gg = dot(&g, &g);
        let mut alpha = step;
        let mut accepted = false;
        let mut ft = f64::INFINITY;
        for _ in 0..opts.max_line_search_evals.max(1) {
            for i in 0..n {
                xt[i] = x[i] - alpha * g[i];
            }
            ft = obj.evaluate(&xt, &mut gt);
            evals += 1;
            if ft.is_finite() && all_finite(&gt) && ft <= f_ref - opts.wolfe_c1 * alpha * gg {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Ok(report(x, f, it, evals, SolveStatus::LineSearchFailed));
        }
        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        step = if sy > 1e-12 {
            let bb = opts.scaling.scalar(&s, &y);
            if bb.is_finite() && bb > 0.0 {
                bb
            } else {
                alpha
            }
        } else {
            // nonpositive curvature: keep a conservative step
            alpha
        };
        let f_prev = f;
        std::mem::swap(&mut x, &mut xt);
        std::mem::swap(&mut g, &mut gt);
        f = ft;
        history.push_back(f);
        if history.len() > opts.bb_window.max(1) {
            history.pop_front();
        }
        if inf_norm(&g) <= opts.grad_tolerance {
            return Ok(report(x, f, it, evals, SolveStatus::Converged));
        }
        if f <= f_prev
            && (f_prev - f) <= opts.rel_f_tolerance * f_prev.abs().max(f.abs()).max(1e-12)
        {
            return Ok(report(x, f, it, evals, SolveStatus::Converged));
        }
        if !callback(it, &x, f) {
            return Ok(report(x, f, it, evals, SolveStatus::Restarted));
        }
        if evals >= opts.max_function_evals {
            return Ok(report(x, f, it, evals, SolveStatus::MaxIterations));
        }
    }
    Ok(report(x, f, opts.max_iterations, evals, SolveStatus::MaxIterations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere(x: &[f64], g: &mut [f64]) -> f64 {
        for i in 0..x.len() {
            g[i] = 2.0 * x[i];
        }
        dot(x, x)
    }

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn sphere_converges_fast() {
        let r = lbfgs_minimize(&mut sphere, &[1.0, 1.0], &SolverOptions::default()).unwrap();
        assert!(r.x.iter().all(|v| v.abs() < 1e-8), "{:?}", r.x);
        assert!(r.iterations <= 5);
        assert!(r.function_evaluations >= r.iterations);
    }

    #[test]
    fn rosenbrock_converges() {
        let opts = SolverOptions {
            grad_tolerance: 1e-10,
            rel_f_tolerance: 0.0,
            max_iterations: 500,
            ..Default::default()
        };
        let r = lbfgs_minimize(&mut rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r);
    }

    #[test]
    fn rosenbrock_reference_by_long_gradient_descent() {
        // independent oracle: plain fixed-step gradient descent run for a long time
        let mut x = [-1.2, 1.0];
        let mut g = [0.0; 2];
        for _ in 0..2_000_000 {
            rosenbrock(&x, &mut g);
            x[0] -= 1e-3 * g[0];
            x[1] -= 1e-3 * g[1];
        }
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn line_search_accepts_newton_step_on_quadratic() {
        // f = 0.5 x'Ax, Newton direction -A^{-1}g reaches the minimizer at step 1
        let a = [3.0, 0.5];
        let mut obj = |x: &[f64], g: &mut [f64]| {
            g[0] = a[0] * x[0];
            g[1] = a[1] * x[1];
            0.5 * (a[0] * x[0] * x[0] + a[1] * x[1] * x[1])
        };
        let x = [1.0, -2.0];
        let mut g0 = [0.0; 2];
        let f0 = obj(&x, &mut g0);
        let d = [-g0[0] / a[0], -g0[1] / a[1]];
        let r = strong_wolfe_search(&mut obj, &x, &d, f0, &g0, 1.0, &SolverOptions::default()).unwrap();
        assert_eq!(r.step, 1.0);
        assert_eq!(r.evaluations, 1);
        assert!(r.satisfied);
    }

    #[test]
    fn line_search_tight_curvature_against_sweep() {
        let a = [4.0, 1.0, 0.25];
        let mut obj = |x: &[f64], g: &mut [f64]| {
            let mut f = 0.0;
            for i in 0..3 {
                g[i] = a[i] * x[i];
                f += 0.5 * a[i] * x[i] * x[i];
            }
            f
        };
        let x = [1.0, 1.0, 1.0];
        let mut g0 = [0.0; 3];
        let f0 = obj(&x, &mut g0);
        let d: Vec<f64> = g0.iter().map(|v| -v).collect();
        let opts = SolverOptions {
            wolfe_c2: 0.1,
            ..Default::default()
        };
        let r = strong_wolfe_search(&mut obj, &x, &d, f0, &g0, 1.0, &opts).unwrap();
        assert!(r.satisfied);
        // dense sweep oracle of phi(alpha)
        let dg0 = dot(&g0, &d);
        let mut g = [0.0; 3];
        let mut best = (0.0, f64::INFINITY);
        for i in 1..=100_000 {
            let al = i as f64 * 2e-5;
            let xt: Vec<f64> = (0..3).map(|k| x[k] + al * d[k]).collect();
            let f = obj(&xt, &mut g);
            if f < best.1 {
                best = (al, f);
            }
        }
        let xt: Vec<f64> = (0..3).map(|k| x[k] + r.step * d[k]).collect();
        let f = obj(&xt, &mut g);
        assert!(f <= f0 + opts.wolfe_c1 * r.step * dg0);
        assert!(dot(&g, &d).abs() <= opts.wolfe_c2 * dg0.abs());
        assert!((r.step - best.0).abs() < 0.2 * best.0, "{} vs {}", r.step, best.0);
    }

    #[test]
    fn line_search_rejects_ascent() {
        let x = [1.0, 1.0];
        let mut g0 = [0.0; 2];
        let f0 = sphere(&x, &mut g0);
        let r = strong_wolfe_search(&mut sphere, &x, &g0.clone(), f0, &g0, 1.0, &SolverOptions::default());
        assert!(matches!(r, Err(SolverError::NotDescent(_))));
    }

    #[test]
    fn bb_two_step_trace_on_sphere() {
        let opts = SolverOptions {
            grad_tolerance: 0.0,
            ..Default::default()
        };
        let mut first = Vec::new();
        let r = bb_minimize_with(&mut sphere, &[1.0, 1.0], &opts, &mut |_, x, _| {
            first = x.to_vec();
            true
        })
        .unwrap();
        // the first step is a plain scaled gradient step, the second uses
        // s'y/y'y = 1/2 and lands on the minimizer exactly
        assert!(first.iter().all(|v| *v != 0.0));
        assert_eq!(r.iterations, 2);
        assert_eq!(r.x, vec![0.0, 0.0]);
        assert_eq!(r.status, SolveStatus::Converged);
    }

    #[test]
    fn stationary_start_needs_no_iterations() {
        let r = bb_minimize(&mut sphere, &[0.0, 0.0], &SolverOptions::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.status, SolveStatus::Converged);
        let r = lbfgs_minimize(&mut sphere, &[0.0, 0.0], &SolverOptions::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.status, SolveStatus::Converged);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let mut bad = |_: &[f64], g: &mut [f64]| {
            g[0] = 0.0;
            f64::NAN
        };
        assert_eq!(
            lbfgs_minimize(&mut bad, &[1.0], &SolverOptions::default()).unwrap_err(),
            SolverError::NonFiniteStart
        );
    }

    #[test]
    fn invalid_wolfe_constants_rejected() {
        let opts = SolverOptions {
            wolfe_c1: 0.5,
            wolfe_c2: 0.4,
            ..Default::default()
        };
        assert!(lbfgs_minimize(&mut sphere, &[1.0], &opts).is_err());
    }

    #[test]
    fn curvature_guard_keeps_memory() {
        let mut m = LbfgsMemory::new(3, BbScaling::default());
        assert!(m.push(vec![1.0, 0.0], vec![2.0, 0.0]));
        assert!(!m.push(vec![1.0, 0.0], vec![-1.0, 0.0]));
        assert!(!m.push(vec![1e-7, 0.0], vec![1e-7, 0.0]));
        assert_eq!(m.len(), 1);
    }

    /// Dense `H_{k+1} = V' H V + rho s s'` recursion.
    pub(crate) fn dense_inverse_hessian(mem: &LbfgsMemory, n: usize) -> DMatrix<f64> {
        let mut h = DMatrix::<f64>::identity(n, n) * mem.initial_scaling();
        for (s, y) in mem.pairs() {
            let s = DVector::from_column_slice(s);
            let y = DVector::from_column_slice(y);
            let rho = 1.0 / s.dot(&y);
            let v = DMatrix::<f64>::identity(n, n) - &y * s.transpose() * rho;
            h = v.transpose() * h * v + &s * s.transpose() * rho;
        }
        h
    }

    #[test]
    fn two_loop_matches_dense_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..50 {
            let n = 2 + trial % 9;
            let m = 1 + trial % 5;
            let mut mem = LbfgsMemory::new(m, BbScaling::default());
            // SPD curvature model so pairs are accepted
            let b = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let a = &b * b.transpose() + DMatrix::<f64>::identity(n, n);
            for _ in 0..m + 2 {
                let s = DVector::<f64>::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
                let y = &a * &s;
                mem.push(s.as_slice().to_vec(), y.as_slice().to_vec());
            }
            let g = DVector::<f64>::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let fast = mem.apply(g.as_slice());
            let dense = dense_inverse_hessian(&mem, n) * &g;
            for i in 0..n {
                assert!((fast[i] - dense[i]).abs() < 1e-10 * dense.amax().max(1.0));
            }
        }
    }

    #[test]
    fn restart_never_gives_ascent_direction() {
        // clear memory mid-run on an ill-conditioned quadratic; every direction
        // produced afterwards must still be a descent direction
        let diag = [1.0, 10.0, 100.0, 0.5];
        let mut obj = |x: &[f64], g: &mut [f64]| {
            let mut f = 0.0;
            for i in 0..4 {
                g[i] = diag[i] * x[i];
                f += 0.5 * diag[i] * x[i] * x[i];
            }
            f
        };
        let opts = SolverOptions::default();
        let mut mem = LbfgsMemory::new(opts.memory, opts.scaling);
        let mut x = vec![1.0, -1.0, 0.5, 2.0];
        let mut g = vec![0.0; 4];
        let mut f = obj(&x, &mut g);
        for it in 0..20 {
            if it % 3 == 2 {
                mem.clear();
            }
            let d: Vec<f64> = mem.apply(&g).iter().map(|v| -v).collect();
            assert!(dot(&d, &g) < 0.0);
            let ls = strong_wolfe_search(&mut obj, &x, &d, f, &g, 1.0, &opts).unwrap();
            assert!(ls.f <= f);
            let s: Vec<f64> = ls.x.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = ls.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
            mem.push(s, y);
            x = ls.x;
            g = ls.grad;
            f = ls.f;
            if inf_norm(&g) < 1e-12 {
                break;
            }
        }
    }
}
