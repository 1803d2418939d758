//! On-road path planning for heavy-duty vehicles.
//!
//! Plans paths for buses and tractor-trailers in road-aligned coordinates by
//! solving a receding-horizon nonlinear program. The lane-centering weight in
//! the objective is derived geometrically so that the vehicle's swept area is
//! balanced about the lane center.
//!
//! Module map:
//! - [`road`]: reference path, global reconstruction, projection.
//! - [`vehicle`]: bus / tractor-trailer kinematics, auxiliary axle errors,
//!   finite-difference linearizations, simulation.
//! - [`tuning`]: geometrically optimal turning radii and objective weights.
//! - [`qp`]: sparse convex QP solver (operator splitting plus polish).
//! - [`planner`]: SQP / RTI solution of the planning problem, receding
//!   horizon driver.
//! - [`envelope`]: swept-area widths about the lane center.

pub mod envelope;
pub mod planner;
pub mod qp;
pub mod road;
pub mod tuning;
pub mod vehicle;
