pub mod bench;
pub mod bspline;
pub mod config;
pub mod gridmap;
pub mod io;
pub mod objective;
pub mod planner;
pub mod rebound;
pub mod refine;
pub mod service;
pub mod solver;

pub type Vec3 = nalgebra::Vector3<f64>;
