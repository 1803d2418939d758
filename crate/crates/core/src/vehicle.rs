//! Road-aligned kinematics for the bus and the tractor-trailer.
//!
//! Both vehicles evolve in the spatial domain: the rear-axle lateral error
//! `e_y` and heading error `e_psi` follow the standard road-aligned model,
//! the trailer adds the joint angle `beta1`, and each vehicle carries an
//! auxiliary lateral error (front axle for the bus, trailer axle for the
//! tractor-trailer) that is evaluated exactly by projecting the axle onto
//! the reference path. Discrete steps are Euler-forward over the sampling
//! distance; Jacobians of the step map and of the auxiliary error are
//! computed with central finite differences.

use crate::road::{project_point, GlobalPath, GlobalPose, RoadError, RoadPath};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};

/// Central finite-difference step (m for e_y, rad for e_psi / beta1).
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum VehicleError {
    #[error("state outside model domain: {msg}")]
    Domain { msg: String },
    #[error("state outside model domain at step {step}: {msg}")]
    DomainAtStep { step: usize, msg: String },
    #[error("invalid vehicle parameters: {msg}")]
    InvalidParams { msg: String },
    #[error("state kind does not match vehicle parameters")]
    KindMismatch,
    #[error(transparent)]
    Road(#[from] RoadError),
    #[error("trajectory i/o error: {msg}")]
    TrajectoryIo { msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleKind {
    Bus,
    TractorTrailer,
}

/// Bus geometry and curvature limits. Also describes the tractor body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusParams {
    /// Wheelbase, m.
    pub l1: f64,
    /// Front overhang ahead of the front axle, m.
    pub l1f: f64,
    /// Rear overhang behind the rear axle, m.
    pub l1r: f64,
    /// Body width, m.
    pub w: f64,
    /// Maximum curvature, 1/m.
    pub kappa_max: f64,
    /// Maximum curvature rate per meter of travel, 1/m^2.
    pub kappa_rate_max: f64,
}

impl BusParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        let err = |msg: String| Err(VehicleError::InvalidParams { msg });
        if !(self.l1 > 0.0) {
            return err(format!("wheelbase must be positive, got {}", self.l1));
        }
        if self.l1f < 0.0 || self.l1r < 0.0 {
            return err("overhangs must be non-negative".into());
        }
        if !(self.w > 0.0) {
            return err(format!("width must be positive, got {}", self.w));
        }
        if !(self.kappa_max > 0.0) || !(self.kappa_rate_max > 0.0) {
            return err("curvature limits must be positive".into());
        }
        if 1.0 / self.kappa_max <= self.w / 2.0 {
            return err(format!(
                "minimum turning radius {} must exceed half the width {}",
                1.0 / self.kappa_max,
                self.w / 2.0
            ));
        }
        Ok(())
    }

    /// A 12 m city bus.
    pub fn default_city_bus() -> Self {
        BusParams { l1: 4.0, l1f: 1.0, l1r: 2.0, w: 2.5, kappa_max: 0.2, kappa_rate_max: 0.05 }
    }
}

/// Tractor-trailer geometry: a tractor body plus trailer lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TractorTrailerParams {
    pub tractor: BusParams,
    /// Hitch to trailer-axle distance, m.
    pub l2: f64,
    /// Trailer rear overhang behind its axle, m.
    pub l2r: f64,
    /// Signed hitch offset, m; negative puts the hitch ahead of the tractor
    /// rear axle.
    pub m1: f64,
    /// Trailer body width, m.
    pub w_trailer: f64,
}

impl TractorTrailerParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        self.tractor.validate()?;
        let err = |msg: String| Err(VehicleError::InvalidParams { msg });
        if !(self.l2 > 0.0) {
            return err(format!("trailer length must be positive, got {}", self.l2));
        }
        if self.l2r < 0.0 {
            return err("trailer overhang must be non-negative".into());
        }
        if self.l2 <= self.m1.abs() {
            return err(format!("need l2 > |m1| for jackknife-free equilibria ({} <= {})", self.l2, self.m1.abs()));
        }
        if !(self.w_trailer > 0.0) {
            return err("trailer width must be positive".into());
        }
        Ok(())
    }

    pub fn default_semitrailer() -> Self {
        TractorTrailerParams {
            tractor: BusParams { l1: 3.8, l1f: 1.4, l1r: 0.8, w: 2.5, kappa_max: 0.18, kappa_rate_max: 0.05 },
            l2: 7.0,
            l2r: 1.0,
            m1: -0.3,
            w_trailer: 2.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VehicleParams {
    Bus(BusParams),
    TractorTrailer(TractorTrailerParams),
}

impl VehicleParams {
    pub fn kind(&self) -> VehicleKind {
        match self {
            VehicleParams::Bus(_) => VehicleKind::Bus,
            VehicleParams::TractorTrailer(_) => VehicleKind::TractorTrailer,
        }
    }

    pub fn tractor(&self) -> &BusParams {
        match self {
            VehicleParams::Bus(p) => p,
            VehicleParams::TractorTrailer(p) => &p.tractor,
        }
    }

    pub fn validate(&self) -> Result<(), VehicleError> {
        match self {
            VehicleParams::Bus(p) => p.validate(),
            VehicleParams::TractorTrailer(p) => p.validate(),
        }
    }

    /// Full state dimension: 3 for the bus, 4 for the tractor-trailer.
    pub fn state_dim(&self) -> usize {
        match self.kind() {
            VehicleKind::Bus => 3,
            VehicleKind::TractorTrailer => 4,
        }
    }

    /// Dimension without the auxiliary error component.
    pub fn core_dim(&self) -> usize {
        self.state_dim() - 1
    }

    /// Body width relevant for the auxiliary-error corridor.
    pub fn aux_body_width(&self) -> f64 {
        match self {
            VehicleParams::Bus(p) => p.w,
            VehicleParams::TractorTrailer(p) => p.w_trailer,
        }
    }
}

/// Bus state: rear-axle errors plus the front-axle lateral error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusState {
    pub e_y: f64,
    pub e_psi: f64,
    /// Front-axle lateral error, m.
    pub e_y_bus: f64,
}

/// Tractor-trailer state: tractor rear-axle errors, joint angle, and the
/// trailer-axle lateral error. `beta1` is the tractor heading minus the
/// trailer heading, positive in a left turn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TractorTrailerState {
    pub e_y: f64,
    pub e_psi: f64,
    pub beta1: f64,
    /// Trailer-axle lateral error, m.
    pub e_y_tt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VehicleState {
    Bus(BusState),
    TractorTrailer(TractorTrailerState),
}

impl VehicleState {
    pub fn kind(&self) -> VehicleKind {
        match self {
            VehicleState::Bus(_) => VehicleKind::Bus,
            VehicleState::TractorTrailer(_) => VehicleKind::TractorTrailer,
        }
    }

    pub fn e_y(&self) -> f64 {
        match self {
            VehicleState::Bus(s) => s.e_y,
            VehicleState::TractorTrailer(s) => s.e_y,
        }
    }

    pub fn e_psi(&self) -> f64 {
        match self {
            VehicleState::Bus(s) => s.e_psi,
            VehicleState::TractorTrailer(s) => s.e_psi,
        }
    }

    pub fn beta1(&self) -> Option<f64> {
        match self {
            VehicleState::Bus(_) => None,
            VehicleState::TractorTrailer(s) => Some(s.beta1),
        }
    }

    /// Auxiliary lateral error component (front axle / trailer axle).
    pub fn aux(&self) -> f64 {
        match self {
            VehicleState::Bus(s) => s.e_y_bus,
            VehicleState::TractorTrailer(s) => s.e_y_tt,
        }
    }

    /// Core components (e_y, e_psi[, beta1]) as a short vector.
    pub fn core(&self) -> Vec<f64> {
        match self {
            VehicleState::Bus(s) => vec![s.e_y, s.e_psi],
            VehicleState::TractorTrailer(s) => vec![s.e_y, s.e_psi, s.beta1],
        }
    }

    /// Full component vector in state order, aux last.
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            VehicleState::Bus(s) => vec![s.e_y, s.e_psi, s.e_y_bus],
            VehicleState::TractorTrailer(s) => vec![s.e_y, s.e_psi, s.beta1, s.e_y_tt],
        }
    }

    pub fn from_core(kind: VehicleKind, core: &[f64], aux: f64) -> Self {
        match kind {
            VehicleKind::Bus => VehicleState::Bus(BusState { e_y: core[0], e_psi: core[1], e_y_bus: aux }),
            VehicleKind::TractorTrailer => VehicleState::TractorTrailer(TractorTrailerState {
                e_y: core[0],
                e_psi: core[1],
                beta1: core[2],
                e_y_tt: aux,
            }),
        }
    }

    pub fn zero(kind: VehicleKind) -> Self {
        match kind {
            VehicleKind::Bus => VehicleState::Bus(BusState { e_y: 0.0, e_psi: 0.0, e_y_bus: 0.0 }),
            VehicleKind::TractorTrailer => VehicleState::TractorTrailer(TractorTrailerState {
                e_y: 0.0,
                e_psi: 0.0,
                beta1: 0.0,
                e_y_tt: 0.0,
            }),
        }
    }
}

fn check_domain(e_y: f64, e_psi: f64, beta1: Option<f64>, kappa_gamma: f64) -> Result<(), VehicleError> {
    let g = 1.0 - e_y * kappa_gamma;
    if g <= 0.0 {
        return Err(VehicleError::Domain { msg: format!("1 - e_y*kappa_gamma = {g} <= 0") });
    }
    if e_psi.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(VehicleError::Domain { msg: format!("|e_psi| = {} >= pi/2", e_psi.abs()) });
    }
    if let Some(b) = beta1 {
        if b.abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(VehicleError::Domain { msg: format!("|beta1| = {} >= pi/2 (jackknife)", b.abs()) });
        }
    }
    Ok(())
}

/// Spatial derivatives (e_y', e_psi') of the bus rear-axle errors.
pub fn spatial_deriv_bus(state: &BusState, kappa: f64, kappa_gamma: f64) -> Result<(f64, f64), VehicleError> {
    check_domain(state.e_y, state.e_psi, None, kappa_gamma)?;
    let g = 1.0 - state.e_y * kappa_gamma;
    let e_y_p = g * state.e_psi.tan();
    let e_psi_p = g / state.e_psi.cos() * kappa - kappa_gamma;
    Ok((e_y_p, e_psi_p))
}

/// Spatial derivatives (e_y', e_psi', beta1') of the tractor-trailer.
pub fn spatial_deriv_tt(
    state: &TractorTrailerState,
    kappa: f64,
    kappa_gamma: f64,
    params: &TractorTrailerParams,
) -> Result<(f64, f64, f64), VehicleError> {
    check_domain(state.e_y, state.e_psi, Some(state.beta1), kappa_gamma)?;
    let g = 1.0 - state.e_y * kappa_gamma;
    let e_y_p = g * state.e_psi.tan();
    let scale = g / state.e_psi.cos();
    let e_psi_p = scale * kappa - kappa_gamma;
    let beta1_p =
        scale * (kappa - state.beta1.sin() / params.l2 + params.m1 / params.l2 * state.beta1.cos() * kappa);
    Ok((e_y_p, e_psi_p, beta1_p))
}

/// Euler-forward step of the core components over `delta_s`.
fn step_core(core: &[f64], kappa: f64, kappa_gamma: f64, delta_s: f64, params: &VehicleParams) -> Result<Vec<f64>, VehicleError> {
    match params {
        VehicleParams::Bus(_) => {
            let st = BusState { e_y: core[0], e_psi: core[1], e_y_bus: 0.0 };
            let (dy, dpsi) = spatial_deriv_bus(&st, kappa, kappa_gamma)?;
            Ok(vec![core[0] + delta_s * dy, core[1] + delta_s * dpsi])
        }
        VehicleParams::TractorTrailer(p) => {
            let st = TractorTrailerState { e_y: core[0], e_psi: core[1], beta1: core[2], e_y_tt: 0.0 };
            let (dy, dpsi, db) = spatial_deriv_tt(&st, kappa, kappa_gamma, p)?;
            Ok(vec![core[0] + delta_s * dy, core[1] + delta_s * dpsi, core[2] + delta_s * db])
        }
    }
}

/// One discrete step from sample `i` to `i + 1`. The core components are
/// Euler-forward; the auxiliary error is refreshed by exact projection at the
/// new arc length so that simulation truth stays independent of the planner's
/// linear auxiliary model.
pub fn step(
    road: &RoadPath,
    globals: &GlobalPath,
    i: usize,
    state: &VehicleState,
    kappa: f64,
    params: &VehicleParams,
) -> Result<VehicleState, VehicleError> {
    if state.kind() != params.kind() {
        return Err(VehicleError::KindMismatch);
    }
    let ds = road.delta_s();
    let kg = road.samples()[i].kappa;
    let core_next = step_core(&state.core(), kappa, kg, ds, params)?;
    let s_next = (i + 1) as f64 * ds;
    let aux = match params {
        VehicleParams::Bus(p) => aux_error_bus(road, globals, s_next, core_next[0], core_next[1], p)?,
        VehicleParams::TractorTrailer(p) => {
            aux_error_tt(road, globals, s_next, core_next[0], core_next[1], core_next[2], p)?
        }
    };
    Ok(VehicleState::from_core(params.kind(), &core_next, aux))
}

/// Global rear-axle pose of a state at arc length `s`.
pub fn rear_axle_pose(globals: &GlobalPath, s: f64, e_y: f64, e_psi: f64) -> GlobalPose {
    let (x, y) = globals.offset_point(s, e_y);
    GlobalPose { x, y, heading: crate::road::normalize_angle(globals.theta_at(s) + e_psi) }
}

/// Signed lateral error of the bus front axle, by exact projection.
pub fn aux_error_bus(
    road: &RoadPath,
    globals: &GlobalPath,
    s: f64,
    e_y: f64,
    e_psi: f64,
    params: &BusParams,
) -> Result<f64, VehicleError> {
    let (rx, ry) = globals.offset_point(s, e_y);
    let psi = globals.theta_at(s) + e_psi;
    let front = (rx + params.l1 * psi.cos(), ry + params.l1 * psi.sin());
    let hint = (s + params.l1).clamp(0.0, globals.s_max());
    let pr = project_point(road, globals, front, hint)?;
    Ok(pr.lateral)
}

/// Signed lateral error of the trailer axle, by exact projection. The hitch
/// sits `m1` behind the tractor rear axle and the trailer axle `l2` behind
/// the hitch along the trailer heading (tractor heading minus `beta1`).
pub fn aux_error_tt(
    road: &RoadPath,
    globals: &GlobalPath,
    s: f64,
    e_y: f64,
    e_psi: f64,
    beta1: f64,
    params: &TractorTrailerParams,
) -> Result<f64, VehicleError> {
    let (rx, ry) = globals.offset_point(s, e_y);
    let psi = globals.theta_at(s) + e_psi;
    let hx = rx - params.m1 * psi.cos();
    let hy = ry - params.m1 * psi.sin();
    let psi_t = psi - beta1;
    let axle = (hx - params.l2 * psi_t.cos(), hy - params.l2 * psi_t.sin());
    let hint = (s - (params.m1 + params.l2)).clamp(0.0, globals.s_max());
    let pr = project_point(road, globals, axle, hint)?;
    Ok(pr.lateral)
}

/// Linear model of the auxiliary error around a state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxErrorModel {
    /// Exact auxiliary error at the linearization point, m.
    pub base: f64,
    pub d_dey: f64,
    pub d_depsi: f64,
    /// Present for the tractor-trailer only.
    pub d_dbeta1: Option<f64>,
}

impl AuxErrorModel {
    /// Predicted auxiliary error at core state `core`, linearized at `bar`.
    pub fn predict(&self, core: &[f64], bar: &[f64]) -> f64 {
        let mut v = self.base + self.d_dey * (core[0] - bar[0]) + self.d_depsi * (core[1] - bar[1]);
        if let Some(db) = self.d_dbeta1 {
            v += db * (core[2] - bar[2]);
        }
        v
    }
}

/// Central finite differences of the exact auxiliary error in each core
/// component.
pub fn linearize_aux(
    road: &RoadPath,
    globals: &GlobalPath,
    s: f64,
    state: &VehicleState,
    params: &VehicleParams,
) -> Result<AuxErrorModel, VehicleError> {
    if state.kind() != params.kind() {
        return Err(VehicleError::KindMismatch);
    }
    let core = state.core();
    let eval = |c: &[f64]| -> Result<f64, VehicleError> {
        match params {
            VehicleParams::Bus(p) => aux_error_bus(road, globals, s, c[0], c[1], p),
            VehicleParams::TractorTrailer(p) => aux_error_tt(road, globals, s, c[0], c[1], c[2], p),
        }
    };
    let base = eval(&core)?;
    let mut partials = Vec::with_capacity(core.len());
    for j in 0..core.len() {
        let mut plus = core.clone();
        let mut minus = core.clone();
        plus[j] += FD_STEP;
        minus[j] -= FD_STEP;
        partials.push((eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP));
    }
    Ok(AuxErrorModel {
        base,
        d_dey: partials[0],
        d_depsi: partials[1],
        d_dbeta1: partials.get(2).copied(),
    })
}

/// Affine model of one discrete step: `z_next ~ A z + B kappa + c`.
///
/// Rows/columns follow the full state layout (aux last). The auxiliary row
/// is zero: its evolution is expressed through [`AuxErrorModel`] constraints
/// rather than the transition map.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsLinearization {
    pub dim: usize,
    pub a: [[f64; 4]; 4],
    pub b: [f64; 4],
    pub c: [f64; 4],
}

impl DynamicsLinearization {
    pub fn core_dim(&self) -> usize {
        self.dim - 1
    }
}

/// Central finite-difference Jacobians of the Euler step map around
/// `(state, kappa)`.
pub fn linearize_dynamics(
    state: &VehicleState,
    kappa: f64,
    kappa_gamma: f64,
    delta_s: f64,
    params: &VehicleParams,
) -> Result<DynamicsLinearization, VehicleError> {
    if state.kind() != params.kind() {
        return Err(VehicleError::KindMismatch);
    }
    let core = state.core();
    let nc = core.len();
    let f = |c: &[f64], k: f64| step_core(c, k, kappa_gamma, delta_s, params);
    let nominal = f(&core, kappa)?;
    let mut a = [[0.0; 4]; 4];
    let mut b = [0.0; 4];
    let mut c = [0.0; 4];
    for j in 0..nc {
        let mut plus = core.clone();
        let mut minus = core.clone();
        plus[j] += FD_STEP;
        minus[j] -= FD_STEP;
        let fp = f(&plus, kappa)?;
        let fm = f(&minus, kappa)?;
        for r in 0..nc {
            a[r][j] = (fp[r] - fm[r]) / (2.0 * FD_STEP);
        }
    }
    let fp = f(&core, kappa + FD_STEP)?;
    let fm = f(&core, kappa - FD_STEP)?;
    for r in 0..nc {
        b[r] = (fp[r] - fm[r]) / (2.0 * FD_STEP);
    }
    for r in 0..nc {
        let mut az = 0.0;
        for j in 0..nc {
            az += a[r][j] * core[j];
        }
        c[r] = nominal[r] - az - b[r] * kappa;
    }
    Ok(DynamicsLinearization { dim: nc + 1, a, b, c })
}

/// kappa = tan(phi) / L1.
pub fn steering_to_curvature(phi: f64, params: &BusParams) -> f64 {
    phi.tan() / params.l1
}

/// phi = arctan(kappa * L1).
pub fn curvature_to_steering(kappa: f64, params: &BusParams) -> f64 {
    (kappa * params.l1).atan()
}

/// A discrete trajectory on the road grid, with global rear-axle poses.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Road sample index of the first state.
    pub start_index: usize,
    pub delta_s: f64,
    /// N + 1 states.
    pub states: Vec<VehicleState>,
    /// N controls; `kappas[i]` acts from state i to state i + 1.
    pub kappas: Vec<f64>,
    /// Rear-axle pose per state.
    pub poses: Vec<GlobalPose>,
}

impl Trajectory {
    pub fn s_at(&self, i: usize) -> f64 {
        (self.start_index + i) as f64 * self.delta_s
    }
}

/// Rolls the vehicle forward from `z0` at sample `start_index`, applying one
/// control per grid step. Fails fast with the offending step index.
pub fn simulate(
    road: &RoadPath,
    globals: &GlobalPath,
    start_index: usize,
    z0: &VehicleState,
    controls: &[f64],
    params: &VehicleParams,
) -> Result<Trajectory, VehicleError> {
    if start_index + controls.len() > road.n_steps() {
        return Err(VehicleError::TrajectoryIo {
            msg: format!(
                "controls run past the road: start {} + {} controls > {} steps",
                start_index,
                controls.len(),
                road.n_steps()
            ),
        });
    }
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut poses = Vec::with_capacity(controls.len() + 1);
    states.push(*z0);
    poses.push(rear_axle_pose(globals, start_index as f64 * road.delta_s(), z0.e_y(), z0.e_psi()));
    for (k, &kappa) in controls.iter().enumerate() {
        let i = start_index + k;
        let next = step(road, globals, i, states.last().unwrap(), kappa, params).map_err(|e| match e {
            VehicleError::Domain { msg } => VehicleError::DomainAtStep { step: k, msg },
            other => other,
        })?;
        let s_next = (i + 1) as f64 * road.delta_s();
        poses.push(rear_axle_pose(globals, s_next, next.e_y(), next.e_psi()));
        states.push(next);
    }
    Ok(Trajectory { start_index, delta_s: road.delta_s(), states, kappas: controls.to_vec(), poses })
}

/// Writes the trajectory CSV schema
/// `s,e_y,e_psi,beta1,e_y_aux,kappa,x,y,heading` (beta1 empty for the bus,
/// kappa empty on the final row).
pub fn write_trajectory_csv(out: &mut impl Write, traj: &Trajectory) -> Result<(), VehicleError> {
    let io_err = |e: std::io::Error| VehicleError::TrajectoryIo { msg: e.to_string() };
    writeln!(out, "s,e_y,e_psi,beta1,e_y_aux,kappa,x,y,heading").map_err(io_err)?;
    for (i, st) in traj.states.iter().enumerate() {
        let beta1 = st.beta1().map(|b| b.to_string()).unwrap_or_default();
        let kappa = traj.kappas.get(i).map(|k| k.to_string()).unwrap_or_default();
        let pose = traj.poses[i];
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            traj.s_at(i),
            st.e_y(),
            st.e_psi(),
            beta1,
            st.aux(),
            kappa,
            pose.x,
            pose.y,
            pose.heading
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// Reads the trajectory CSV schema back; the vehicle kind is inferred from
/// the beta1 column.
pub fn read_trajectory_csv(input: impl Read) -> Result<Trajectory, VehicleError> {
    let reader = BufReader::new(input);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or(VehicleError::TrajectoryIo { msg: "empty file".into() })
        .and_then(|l| l.map_err(|e| VehicleError::TrajectoryIo { msg: e.to_string() }))?;
    if header.trim() != "s,e_y,e_psi,beta1,e_y_aux,kappa,x,y,heading" {
        return Err(VehicleError::TrajectoryIo { msg: format!("unexpected header: {header}") });
    }
    let mut ss = Vec::new();
    let mut states = Vec::new();
    let mut kappas = Vec::new();
    let mut poses = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line.map_err(|e| VehicleError::TrajectoryIo { msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(VehicleError::TrajectoryIo { msg: format!("line {}: expected 9 fields", ln + 2) });
        }
        let num = |i: usize| -> Result<f64, VehicleError> {
            fields[i]
                .trim()
                .parse()
                .map_err(|e| VehicleError::TrajectoryIo { msg: format!("line {}: field {i}: {e}", ln + 2) })
        };
        ss.push(num(0)?);
        let e_y = num(1)?;
        let e_psi = num(2)?;
        let beta1 = if fields[3].trim().is_empty() { None } else { Some(num(3)?) };
        let aux = num(4)?;
        if !fields[5].trim().is_empty() {
            kappas.push(num(5)?);
        }
        poses.push(GlobalPose { x: num(6)?, y: num(7)?, heading: num(8)? });
        states.push(match beta1 {
            None => VehicleState::Bus(BusState { e_y, e_psi, e_y_bus: aux }),
            Some(b) => VehicleState::TractorTrailer(TractorTrailerState { e_y, e_psi, beta1: b, e_y_tt: aux }),
        });
    }
    if ss.len() < 2 {
        return Err(VehicleError::TrajectoryIo { msg: "need at least 2 rows".into() });
    }
    let delta_s = ss[1] - ss[0];
    let start_index = (ss[0] / delta_s).round() as usize;
    Ok(Trajectory { start_index, delta_s, states, kappas, poses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::road::RoadSample;
    use approx::assert_abs_diff_eq;

    fn straight(length: f64, ds: f64) -> RoadPath {
        let n = (length / ds).round() as usize;
        let samples = (0..=n)
            .map(|i| RoadSample { s: i as f64 * ds, kappa: 0.0, w_left: 5.0, w_right: 5.0 })
            .collect();
        RoadPath::new(samples, None).unwrap()
    }

    fn ring(radius: f64, length: f64, ds: f64) -> RoadPath {
        let n = (length / ds).round() as usize;
        let samples = (0..=n)
            .map(|i| RoadSample { s: i as f64 * ds, kappa: 1.0 / radius, w_left: 5.0, w_right: 5.0 })
            .collect();
        RoadPath::new(samples, None).unwrap()
    }

    #[test]
    fn bus_derivatives() {
        let eq = BusState { e_y: 0.0, e_psi: 0.0, e_y_bus: 0.0 };
        let (dy, dpsi) = spatial_deriv_bus(&eq, 0.1, 0.1).unwrap();
        assert_abs_diff_eq!(dy, 0.0);
        assert_abs_diff_eq!(dpsi, 0.0, epsilon = 1e-15);

        let st = BusState { e_y: 0.0, e_psi: 0.1, e_y_bus: 0.0 };
        let (dy, dpsi) = spatial_deriv_bus(&st, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(dy, 0.1_f64.tan(), epsilon = 1e-15);
        assert_abs_diff_eq!(dpsi, 0.0);

        let st = BusState { e_y: 0.5, e_psi: 0.1, e_y_bus: 0.0 };
        let (dy, dpsi) = spatial_deriv_bus(&st, 0.05, 0.1).unwrap();
        assert_abs_diff_eq!(dy, 0.09531793848117802, epsilon = 1e-14);
        assert_abs_diff_eq!(dpsi, -0.05226150637597837, epsilon = 1e-14);
    }

    #[test]
    fn bus_domain_errors() {
        let st = BusState { e_y: 11.0, e_psi: 0.0, e_y_bus: 0.0 };
        assert!(matches!(spatial_deriv_bus(&st, 0.0, 0.1), Err(VehicleError::Domain { .. })));
        let st = BusState { e_y: 0.0, e_psi: 1.6, e_y_bus: 0.0 };
        assert!(matches!(spatial_deriv_bus(&st, 0.0, 0.0), Err(VehicleError::Domain { .. })));
    }

    #[test]
    fn tt_derivatives() {
        let p = TractorTrailerParams::default_semitrailer();
        let st = TractorTrailerState { e_y: 0.0, e_psi: 0.0, beta1: 0.0, e_y_tt: 0.0 };
        let mut p0 = p;
        p0.m1 = 0.0;
        let (_, _, db) = spatial_deriv_tt(&st, 0.0, 0.0, &p0).unwrap();
        assert_abs_diff_eq!(db, 0.0);

        let st = TractorTrailerState { e_y: 0.3, e_psi: 0.08, beta1: 0.2, e_y_tt: 0.0 };
        let (dy, dpsi, db) = spatial_deriv_tt(&st, 0.06, 0.09, &p).unwrap();
        assert_abs_diff_eq!(dy, 0.0780064848809546, epsilon = 1e-14);
        assert_abs_diff_eq!(dpsi, -0.03143268452404074, epsilon = 1e-14);
        assert_abs_diff_eq!(db, 0.02840367975165985, epsilon = 1e-14);
    }

    #[test]
    fn derivative_sign_symmetry() {
        let p = TractorTrailerParams::default_semitrailer();
        let mut rng = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..100 {
            let e_y = next();
            let e_psi = 0.8 * next();
            let beta1 = 0.8 * next();
            let kappa = 0.2 * next();
            let kg = 0.2 * next();
            let st = TractorTrailerState { e_y, e_psi, beta1, e_y_tt: 0.0 };
            let mirrored = TractorTrailerState { e_y: -e_y, e_psi: -e_psi, beta1: -beta1, e_y_tt: 0.0 };
            let (a1, b1, c1) = spatial_deriv_tt(&st, kappa, kg, &p).unwrap();
            let (a2, b2, c2) = spatial_deriv_tt(&mirrored, -kappa, -kg, &p).unwrap();
            assert_abs_diff_eq!(a1, -a2, epsilon = 1e-13);
            assert_abs_diff_eq!(b1, -b2, epsilon = 1e-13);
            assert_abs_diff_eq!(c1, -c2, epsilon = 1e-13);
        }
    }

    #[test]
    fn one_step_on_straight_road() {
        let road = straight(10.0, 0.5);
        let gp = GlobalPath::new(&road);
        let params = VehicleParams::Bus(BusParams::default_city_bus());
        let z = VehicleState::Bus(BusState { e_y: 0.0, e_psi: 0.1, e_y_bus: 0.0 });
        let next = step(&road, &gp, 0, &z, 0.0, &params).unwrap();
        assert_abs_diff_eq!(next.e_y(), 0.5 * 0.1_f64.tan(), epsilon = 1e-12);
        assert_abs_diff_eq!(next.e_psi(), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn aux_error_bus_cases() {
        let road = straight(30.0, 0.5);
        let gp = GlobalPath::new(&road);
        let p = BusParams::default_city_bus();
        assert_abs_diff_eq!(aux_error_bus(&road, &gp, 10.0, 0.0, 0.0, &p).unwrap(), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(aux_error_bus(&road, &gp, 10.0, 0.2, 0.0, &p).unwrap(), 0.2, epsilon = 1e-9);

        // Rear axle on the centerline of an R = 8 circle, tangent heading:
        // the front axle sits at radius sqrt(R^2 + L1^2), outside the lane
        // center, which is to the right (negative) on a left turn.
        let road = ring(8.0, 40.0, 0.1);
        let gp = GlobalPath::new(&road);
        let aux = aux_error_bus(&road, &gp, 20.0, 0.0, 0.0, &p).unwrap();
        assert_abs_diff_eq!(aux, -0.9442719099991592, epsilon = 1e-6);
    }

    #[test]
    fn aux_error_tt_cases() {
        let road = straight(40.0, 0.5);
        let gp = GlobalPath::new(&road);
        let p = TractorTrailerParams::default_semitrailer();
        assert_abs_diff_eq!(aux_error_tt(&road, &gp, 20.0, 0.0, 0.0, 0.0, &p).unwrap(), 0.0, epsilon = 1e-9);

        // Degenerate trailer: axle collapses onto the hitch at the rear axle.
        let mut tiny = p;
        tiny.m1 = 0.0;
        tiny.l2 = 1e-6;
        let aux = aux_error_tt(&road, &gp, 20.0, 0.3, 0.05, 0.0, &tiny).unwrap();
        assert_abs_diff_eq!(aux, 0.3, epsilon = 1e-4);
    }

    #[test]
    fn aux_linearization_straight_road() {
        let road = straight(40.0, 0.5);
        let gp = GlobalPath::new(&road);
        let bus = VehicleParams::Bus(BusParams::default_city_bus());
        let m = linearize_aux(&road, &gp, 20.0, &VehicleState::zero(VehicleKind::Bus), &bus).unwrap();
        assert_abs_diff_eq!(m.base, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(m.d_dey, 1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(m.d_depsi, 4.0, epsilon = 1e-4);
        assert!(m.d_dbeta1.is_none());

        // e_y_aux = e_y + (|m1| + l2 with signs) ... on a straight road the
        // trailer axle lateral is e_y - (m1 + l2) sin(e_psi) + l2 sin(beta1)
        // to first order; partials follow.
        let tt = VehicleParams::TractorTrailer(TractorTrailerParams::default_semitrailer());
        let m = linearize_aux(&road, &gp, 20.0, &VehicleState::zero(VehicleKind::TractorTrailer), &tt).unwrap();
        assert_abs_diff_eq!(m.d_dey, 1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(m.d_depsi, -(7.0 - 0.3), epsilon = 1e-4);
        assert_abs_diff_eq!(m.d_dbeta1.unwrap(), 7.0, epsilon = 1e-4);
    }

    #[test]
    fn aux_model_predicts_small_perturbations() {
        let road = ring(10.0, 60.0, 0.5);
        let gp = GlobalPath::new(&road);
        let p = TractorTrailerParams::default_semitrailer();
        let params = VehicleParams::TractorTrailer(p);
        let st = VehicleState::TractorTrailer(TractorTrailerState {
            e_y: -0.4,
            e_psi: 0.03,
            beta1: 0.5,
            e_y_tt: 0.0,
        });
        let m = linearize_aux(&road, &gp, 30.0, &st, &params).unwrap();
        let bar = st.core();
        let mut pert = bar.clone();
        pert[0] += 8e-4;
        pert[1] -= 5e-4;
        pert[2] += 6e-4;
        let exact = aux_error_tt(&road, &gp, 30.0, pert[0], pert[1], pert[2], &p).unwrap();
        assert_abs_diff_eq!(m.predict(&pert, &bar), exact, epsilon = 1e-5);
    }

    #[test]
    fn dynamics_linearization_zero_state() {
        let params = VehicleParams::Bus(BusParams::default_city_bus());
        let lin = linearize_dynamics(&VehicleState::zero(VehicleKind::Bus), 0.0, 0.0, 0.5, &params).unwrap();
        assert_eq!(lin.dim, 3);
        assert_abs_diff_eq!(lin.a[0][0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(lin.a[0][1], 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(lin.a[1][0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(lin.a[1][1], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(lin.b[1], 0.5, epsilon = 1e-9);
        for j in 0..3 {
            assert_eq!(lin.a[2][j], 0.0);
        }
    }

    #[test]
    fn dynamics_linearization_tt_beta_row() {
        let p = TractorTrailerParams::default_semitrailer();
        let params = VehicleParams::TractorTrailer(p);
        let (e_y, e_psi, beta1, kappa, kg, ds) = (-0.5, 0.02, 0.55, 0.08, 0.083, 0.5);
        let st = VehicleState::TractorTrailer(TractorTrailerState { e_y, e_psi, beta1, e_y_tt: 0.0 });
        let lin = linearize_dynamics(&st, kappa, kg, ds, &params).unwrap();
        let g = (1.0 - e_y * kg) / e_psi.cos();
        let expected = 1.0 - g * (beta1.cos() / p.l2 + p.m1 / p.l2 * beta1.sin() * kappa) * ds;
        assert_abs_diff_eq!(lin.a[2][2], expected, epsilon = 1e-6);
    }

    #[test]
    fn linearization_matches_directional_derivative() {
        let p = TractorTrailerParams::default_semitrailer();
        let params = VehicleParams::TractorTrailer(p);
        let core = [0.2, -0.05, 0.3];
        let st = VehicleState::from_core(VehicleKind::TractorTrailer, &core, 0.0);
        let lin = linearize_dynamics(&st, 0.05, 0.07, 0.5, &params).unwrap();
        let dir = [3e-4, -2e-4, 1e-4];
        let plus: Vec<f64> = core.iter().zip(dir).map(|(c, d)| c + d).collect();
        let minus: Vec<f64> = core.iter().zip(dir).map(|(c, d)| c - d).collect();
        let fp = step_core(&plus, 0.05, 0.07, 0.5, &params).unwrap();
        let fm = step_core(&minus, 0.05, 0.07, 0.5, &params).unwrap();
        for r in 0..3 {
            let fd = (fp[r] - fm[r]) / 2.0;
            let lin_dir: f64 = (0..3).map(|j| lin.a[r][j] * dir[j]).sum();
            assert_abs_diff_eq!(fd, lin_dir, epsilon = 1e-6 * (1.0 + lin_dir.abs()));
        }
    }

    #[test]
    fn linearization_second_order_remainder() {
        let params = VehicleParams::Bus(BusParams::default_city_bus());
        let core = [0.3, 0.08];
        let st = VehicleState::from_core(VehicleKind::Bus, &core, 0.0);
        let lin = linearize_dynamics(&st, 0.06, 0.05, 0.5, &params).unwrap();
        let mut rng = 42u64;
        let mut next = move || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 2e-3
        };
        for _ in 0..50 {
            let d = [next(), next()];
            let dmax = d[0].abs().max(d[1].abs());
            let pert = [core[0] + d[0], core[1] + d[1]];
            let actual = step_core(&pert, 0.06, 0.05, 0.5, &params).unwrap();
            for r in 0..2 {
                let predicted: f64 =
                    (0..2).map(|j| lin.a[r][j] * pert[j]).sum::<f64>() + lin.b[r] * 0.06 + lin.c[r];
                assert!(
                    (actual[r] - predicted).abs() <= 5.0 * dmax * dmax,
                    "remainder {} above bound {}",
                    (actual[r] - predicted).abs(),
                    5.0 * dmax * dmax
                );
            }
        }
    }

    #[test]
    fn steering_round_trip() {
        let p = BusParams::default_city_bus();
        assert_abs_diff_eq!(steering_to_curvature(0.0, &p), 0.0);
        assert_abs_diff_eq!(curvature_to_steering(0.1, &p), 0.4_f64.atan(), epsilon = 1e-15);
        let phi = 0.35;
        assert_abs_diff_eq!(curvature_to_steering(steering_to_curvature(phi, &p), &p), phi, epsilon = 1e-12);
    }

    #[test]
    fn simulate_zero_controls() {
        let road = straight(20.0, 0.5);
        let gp = GlobalPath::new(&road);
        let params = VehicleParams::Bus(BusParams::default_city_bus());
        let traj = simulate(&road, &gp, 0, &VehicleState::zero(VehicleKind::Bus), &vec![0.0; 20], &params).unwrap();
        for st in &traj.states {
            assert_abs_diff_eq!(st.e_y(), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(st.aux(), 0.0, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(traj.poses[10].x, 5.0, epsilon = 1e-9);
    }

    #[test]
    fn simulate_reports_domain_step() {
        let road = straight(40.0, 0.5);
        let gp = GlobalPath::new(&road);
        let params = VehicleParams::Bus(BusParams::default_city_bus());
        // Constant max curvature on a straight road winds e_psi past pi/2.
        let err = simulate(&road, &gp, 0, &VehicleState::zero(VehicleKind::Bus), &vec![0.2; 40], &params);
        match err {
            Err(VehicleError::DomainAtStep { step, .. }) => assert!(step > 5),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn euler_discretization_order() {
        // Fixed maneuver on a straight road: sinusoidal curvature controls.
        let params = VehicleParams::TractorTrailer(TractorTrailerParams::default_semitrailer());
        let length = 20.0;
        let terminal = |ds: f64| -> Vec<f64> {
            let road = straight(length, ds);
            let gp = GlobalPath::new(&road);
            let n = road.n_steps();
            let controls: Vec<f64> =
                (0..n).map(|i| 0.08 * (2.0 * std::f64::consts::PI * (i as f64 * ds) / 17.0).sin()).collect();
            let traj = simulate(&road, &gp, 0, &VehicleState::zero(VehicleKind::TractorTrailer), &controls, &params)
                .unwrap();
            traj.states.last().unwrap().core()
        };
        let reference = terminal(0.5 / 64.0);
        let err = |ds: f64| -> f64 {
            terminal(ds)
                .iter()
                .zip(&reference)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let e1 = err(0.5);
        let e2 = err(0.25);
        assert!(e1 / e2 >= 1.8, "Euler order ratio {} too small", e1 / e2);
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let road = straight(10.0, 0.5);
        let gp = GlobalPath::new(&road);
        let params = VehicleParams::TractorTrailer(TractorTrailerParams::default_semitrailer());
        let z0 = VehicleState::TractorTrailer(TractorTrailerState { e_y: 0.1, e_psi: 0.0, beta1: 0.02, e_y_tt: 0.1 });
        let traj = simulate(&road, &gp, 0, &z0, &[0.01, 0.02, 0.0], &params).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj).unwrap();
        let back = read_trajectory_csv(&buf[..]).unwrap();
        assert_eq!(back.states.len(), traj.states.len());
        assert_eq!(back.kappas, traj.kappas);
        assert_abs_diff_eq!(back.states[2].beta1().unwrap(), traj.states[2].beta1().unwrap(), epsilon = 1e-15);
        assert_abs_diff_eq!(back.poses[3].x, traj.poses[3].x, epsilon = 1e-15);
    }
}
