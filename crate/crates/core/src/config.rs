//! Flat `key = value` configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::{ConfigError, PenaltyConfig};
use crate::planner::PlannerConfig;
use crate::solver::{BbScaling, SolverOptions};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Invalid(#[from] ConfigError),
    #[error("invalid value: {0}")]
    Value(String),
}

/// Everything the planner reads from a config file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub penalty: PenaltyConfig,
    pub solver: SolverOptions,
    pub planner: PlannerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FlatConfig {
    lambda_smooth: f64,
    lambda_collision: f64,
    lambda_feasible: f64,
    lambda_fit: f64,
    w_v: f64,
    w_a: f64,
    w_j: f64,
    s_f: f64,
    v_max: f64,
    a_max: f64,
    j_max: f64,
    lambda_elastic: f64,
    cj_ratio: f64,
    fit_a: f64,
    fit_b: f64,

    lbfgs_memory: usize,
    grad_tol: f64,
    rel_f_tol: f64,
    max_iters: usize,
    max_function_evals: usize,
    wolfe_c1: f64,
    wolfe_c2: f64,
    bb_scaling: String,

    horizon: f64,
    ctrl_pt_spacing: f64,
    degree: usize,
    pipe_radius: f64,
    replan_period: f64,
    max_rebound_iterations: usize,
    rebound_mode: String,
    solver: String,
    fit_subdivisions: usize,
    resolution: f64,
    inflation: f64,
    unknown_is_occupied: bool,
}

impl Default for FlatConfig {
    fn default() -> Self {
        Self::from_config(&Config::default())
    }
}

impl FlatConfig {
    fn from_config(c: &Config) -> Self {
        let (p, s, l) = (&c.penalty, &c.solver, &c.planner);
        Self {
            lambda_smooth: p.lambda_smooth,
            lambda_collision: p.lambda_collision,
            lambda_feasible: p.lambda_feasible,
            lambda_fit: p.lambda_fit,
            w_v: p.w_v,
            w_a: p.w_a,
            w_j: p.w_j,
            s_f: p.s_f,
            v_max: p.v_max,
            a_max: p.a_max,
            j_max: p.j_max,
            lambda_elastic: p.lambda_elastic,
            cj_ratio: p.cj_ratio,
            fit_a: p.fit_a,
            fit_b: p.fit_b,
            lbfgs_memory: s.memory,
            grad_tol: s.grad_tolerance,
            rel_f_tol: s.rel_f_tolerance,
            max_iters: s.max_iterations,
            max_function_evals: s.max_function_evals,
            wolfe_c1: s.wolfe_c1,
            wolfe_c2: s.wolfe_c2,
            bb_scaling: match s.scaling {
                BbScaling::GradientNormalized => "sy_yy".into(),
                BbScaling::StepNormalized => "ss_sy".into(),
            },
            horizon: l.horizon,
            ctrl_pt_spacing: l.ctrl_pt_spacing,
            degree: l.degree,
            pipe_radius: l.pipe_radius,
            replan_period: l.replan_period,
            max_rebound_iterations: l.max_rebound_iterations,
            rebound_mode: l.rebound_mode.name().into(),
            solver: l.solver.name().into(),
            fit_subdivisions: l.fit_subdivisions,
            resolution: l.resolution,
            inflation: l.inflation,
            unknown_is_occupied: l.unknown_is_occupied,
        }
    }

    fn into_config(self) -> Result<Config, LoadError> {
        let penalty = PenaltyConfig {
            lambda_smooth: self.lambda_smooth,
            lambda_collision: self.lambda_collision,
            lambda_feasible: self.lambda_feasible,
            lambda_fit: self.lambda_fit,
            w_v: self.w_v,
            w_a: self.w_a,
            w_j: self.w_j,
            s_f: self.s_f,
            v_max: self.v_max,
            a_max: self.a_max,
            j_max: self.j_max,
            lambda_elastic: self.lambda_elastic,
            cj_ratio: self.cj_ratio,
            fit_a: self.fit_a,
            fit_b: self.fit_b,
        };
        let scaling = match self.bb_scaling.as_str() {
            "sy_yy" => BbScaling::GradientNormalized,
            "ss_sy" => BbScaling::StepNormalized,
            other => return Err(LoadError::Value(format!("bb_scaling = {other:?} (expected sy_yy or ss_sy)"))),
        };
        let solver = SolverOptions {
            memory: self.lbfgs_memory,
            max_iterations: self.max_iters,
            grad_tolerance: self.grad_tol,
            rel_f_tolerance: self.rel_f_tol,
            wolfe_c1: self.wolfe_c1,
            wolfe_c2: self.wolfe_c2,
            max_function_evals: self.max_function_evals,
            scaling,
            ..SolverOptions::default()
        };
        let planner = PlannerConfig {
            horizon: self.horizon,
            ctrl_pt_spacing: self.ctrl_pt_spacing,
            degree: self.degree,
            pipe_radius: self.pipe_radius,
            replan_period: self.replan_period,
            max_rebound_iterations: self.max_rebound_iterations,
            rebound_mode: self.rebound_mode.parse().map_err(LoadError::Value)?,
            solver: self.solver.parse().map_err(LoadError::Value)?,
            fit_subdivisions: self.fit_subdivisions,
            resolution: self.resolution,
            inflation: self.inflation,
            unknown_is_occupied: self.unknown_is_occupied,
        };
        let cfg = Config { penalty, solver, planner };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), LoadError> {
        self.penalty.validate()?;
        self.solver
            .validate()
            .map_err(|e| LoadError::Value(e.to_string()))?;
        self.planner.validate().map_err(LoadError::Value)?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, LoadError> {
        let flat: FlatConfig = toml::from_str(text)?;
        flat.into_config()
    }

    pub fn load(path: &Path) -> Result<Self, LoadError> {
        let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&FlatConfig::from_config(self)).expect("flat config serializes")
    }
}
