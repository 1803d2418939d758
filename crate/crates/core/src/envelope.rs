//! Swept-area analysis about the lane center.
//!
//! Places rectangular body outlines at every trajectory pose (tractor and
//! trailer bodies for articulated vehicles), samples the outline edges, and
//! projects each sample onto the road. Per road sample the extreme signed
//! lateral offsets form the swept profile; their maxima are the left/right
//! swept widths whose difference the tuned planner is designed to null.

use crate::road::{project_point, GlobalPath, GlobalPose, RoadError, RoadPath};
use crate::vehicle::{BusParams, Trajectory, TractorTrailerParams, VehicleParams};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Default outline edge sampling spacing, m.
pub const DEFAULT_EDGE_SPACING: f64 = 0.05;

/// Default entry/exit transient margin excluded from steady widths, m.
pub const DEFAULT_TRANSIENT_MARGIN: f64 = 20.0;

#[derive(Debug, thiserror::Error)]
pub enum EnvelopeError {
    #[error(transparent)]
    Projection(#[from] RoadError),
    #[error("trajectory does not match the vehicle parameters")]
    KindMismatch,
    #[error("envelope i/o error: {msg}")]
    Io { msg: String },
}

/// Rectangular body outline in a body frame anchored at the guiding axle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyOutline {
    /// Counter-clockwise corners: rear-right, front-right, front-left,
    /// rear-left.
    pub corners: [[f64; 2]; 4],
}

impl BodyOutline {
    fn rect(x_back: f64, x_front: f64, half_width: f64) -> Self {
        BodyOutline {
            corners: [
                [x_back, -half_width],
                [x_front, -half_width],
                [x_front, half_width],
                [x_back, half_width],
            ],
        }
    }

    /// Bus (or tractor) body: rear overhang to front overhang.
    pub fn bus(p: &BusParams) -> Self {
        Self::rect(-p.l1r, p.l1 + p.l1f, p.w / 2.0)
    }

    /// Trailer body anchored at the trailer axle: rear overhang to hitch.
    pub fn trailer(p: &TractorTrailerParams) -> Self {
        Self::rect(-p.l2r, p.l2, p.w_trailer / 2.0)
    }
}

/// Swept extents per road sample plus their aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct SweptEnvelope {
    /// Arc length of each road sample, m.
    pub grid: Vec<f64>,
    /// Maximum signed lateral extent per sample (left positive), m.
    pub left: Vec<Option<f64>>,
    /// Minimum signed lateral extent per sample, m.
    pub right: Vec<Option<f64>>,
    /// Maximum width swept to the left of the center, m.
    pub max_left_width: f64,
    /// Maximum width swept to the right of the center, m.
    pub max_right_width: f64,
    /// |max_left_width - max_right_width|, m.
    pub imbalance: f64,
}

impl SweptEnvelope {
    fn aggregate(grid: Vec<f64>, left: Vec<Option<f64>>, right: Vec<Option<f64>>) -> Self {
        let max_left_width = left.iter().flatten().fold(f64::NEG_INFINITY, |m, &v| m.max(v)).max(0.0);
        let max_right_width = right.iter().flatten().fold(f64::INFINITY, |m, &v| m.min(v)).min(0.0).abs();
        SweptEnvelope {
            grid,
            left,
            right,
            max_left_width,
            max_right_width,
            imbalance: (max_left_width - max_right_width).abs(),
        }
    }

    /// First and last covered arc lengths, if any sample is covered.
    pub fn covered_range(&self) -> Option<(f64, f64)> {
        let first = self.left.iter().position(|v| v.is_some())?;
        let last = self.left.iter().rposition(|v| v.is_some())?;
        Some((self.grid[first], self.grid[last]))
    }
}

fn body_pose_points(pose: &GlobalPose, outline: &BodyOutline, spacing: f64) -> Vec<(f64, [f64; 2])> {
    let (sin, cos) = pose.heading.sin_cos();
    let mut pts = Vec::new();
    for e in 0..4 {
        let a = outline.corners[e];
        let b = outline.corners[(e + 1) % 4];
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let segs = (len / spacing).ceil().max(1.0) as usize;
        // The closing corner of each edge is the opening corner of the next.
        for t in 0..segs {
            let f = t as f64 / segs as f64;
            let bx = a[0] + f * (b[0] - a[0]);
            let by = a[1] + f * (b[1] - a[1]);
            let wx = pose.x + cos * bx - sin * by;
            let wy = pose.y + sin * bx + cos * by;
            pts.push((bx, [wx, wy]));
        }
    }
    pts
}

/// Computes the swept envelope of a driven trajectory with the default edge
/// sampling spacing.
pub fn swept_envelope(
    road: &RoadPath,
    globals: &GlobalPath,
    traj: &Trajectory,
    params: &VehicleParams,
) -> Result<SweptEnvelope, EnvelopeError> {
    swept_envelope_with_spacing(road, globals, traj, params, DEFAULT_EDGE_SPACING)
}

pub fn swept_envelope_with_spacing(
    road: &RoadPath,
    globals: &GlobalPath,
    traj: &Trajectory,
    params: &VehicleParams,
    spacing: f64,
) -> Result<SweptEnvelope, EnvelopeError> {
    let n_bins = road.samples().len();
    let ds = road.delta_s();
    let mut left: Vec<Option<f64>> = vec![None; n_bins];
    let mut right: Vec<Option<f64>> = vec![None; n_bins];

    for (k, state) in traj.states.iter().enumerate() {
        if state.kind() != params.kind() {
            return Err(EnvelopeError::KindMismatch);
        }
        let s_k = traj.s_at(k);
        let pose = traj.poses[k];
        let mut bodies: Vec<(GlobalPose, BodyOutline, f64)> = Vec::with_capacity(2);
        match params {
            VehicleParams::Bus(p) => bodies.push((pose, BodyOutline::bus(p), 0.0)),
            VehicleParams::TractorTrailer(p) => {
                bodies.push((pose, BodyOutline::bus(&p.tractor), 0.0));
                let beta1 = state.beta1().expect("tt state");
                let (sin, cos) = pose.heading.sin_cos();
                let hx = pose.x - p.m1 * cos;
                let hy = pose.y - p.m1 * sin;
                let psi_t = pose.heading - beta1;
                let axle = GlobalPose {
                    x: hx - p.l2 * psi_t.cos(),
                    y: hy - p.l2 * psi_t.sin(),
                    heading: psi_t,
                };
                bodies.push((axle, BodyOutline::trailer(p), -(p.m1 + p.l2)));
            }
        }
        for (body_pose, outline, s_offset) in &bodies {
            for (bx, point) in body_pose_points(body_pose, outline, spacing) {
                let hint = (s_k + s_offset + bx).clamp(0.0, globals.s_max());
                let pr = project_point(road, globals, (point[0], point[1]), hint)?;
                let bin = ((pr.s / ds).round() as usize).min(n_bins - 1);
                left[bin] = Some(left[bin].map_or(pr.lateral, |v: f64| v.max(pr.lateral)));
                right[bin] = Some(right[bin].map_or(pr.lateral, |v: f64| v.min(pr.lateral)));
            }
        }
    }

    let grid = road.samples().iter().map(|s| s.s).collect();
    Ok(SweptEnvelope::aggregate(grid, left, right))
}

/// Summary metrics of an envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub max_left_width: f64,
    pub max_right_width: f64,
    pub imbalance: f64,
    /// Widths measured away from the entry/exit transients.
    pub interior_left_width: f64,
    pub interior_right_width: f64,
    pub interior_imbalance: f64,
    /// Transient margin excluded at each end, m.
    pub margin_m: f64,
    /// Balanced width predicted geometrically on constant-curvature roads.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_width: Option<f64>,
    pub covered_from: f64,
    pub covered_to: f64,
}

/// Aggregates an envelope into report metrics, excluding `margin_m` meters of
/// entry/exit transient from the interior widths.
pub fn envelope_report(env: &SweptEnvelope, margin_m: f64, expected_width: Option<f64>) -> EnvelopeReport {
    let (from, to) = env.covered_range().unwrap_or((0.0, 0.0));
    let lo = from + margin_m;
    let hi = to - margin_m;
    let mut il = 0.0_f64;
    let mut ir = 0.0_f64;
    for (i, &s) in env.grid.iter().enumerate() {
        if s < lo || s > hi {
            continue;
        }
        if let Some(v) = env.left[i] {
            il = il.max(v);
        }
        if let Some(v) = env.right[i] {
            ir = ir.max(-v);
        }
    }
    EnvelopeReport {
        max_left_width: env.max_left_width,
        max_right_width: env.max_right_width,
        imbalance: env.imbalance,
        interior_left_width: il,
        interior_right_width: ir,
        interior_imbalance: (il - ir).abs(),
        margin_m,
        expected_width,
        covered_from: from,
        covered_to: to,
    }
}

/// Writes the envelope CSV schema `s,left,right` (uncovered samples empty).
pub fn write_envelope_csv(out: &mut impl Write, env: &SweptEnvelope) -> Result<(), EnvelopeError> {
    let io_err = |e: std::io::Error| EnvelopeError::Io { msg: e.to_string() };
    writeln!(out, "s,left,right").map_err(io_err)?;
    for i in 0..env.grid.len() {
        let left = env.left[i].map(|v| v.to_string()).unwrap_or_default();
        let right = env.right[i].map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{}", env.grid[i], left, right).map_err(io_err)?;
    }
    Ok(())
}
