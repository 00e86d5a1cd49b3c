//! Backstepping compensator design for heterodirectional hyperbolic
//! PDE-ODE systems: kernel solvers, decoupling, observer design,
//! closed-loop analysis and simulation.

pub mod expr;
pub mod linalg;
pub mod model;
pub mod characteristics;
pub mod volterra;
pub mod propagate;
pub mod placement;
pub mod kernel;
pub mod decoupling;
pub mod observer;
pub mod simulator;
pub mod design;
pub mod analysis;
pub mod output;
pub mod verify;
pub mod config;
