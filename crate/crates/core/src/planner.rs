//! Receding-horizon path planning via SQP over sparse QPs.
//!
//! The planning problem minimizes a curvature-smoothness term plus the
//! weighted lateral objective `sum (K_i e_y,i + e_y,i^aux)^2` subject to the
//! discrete vehicle model, initial state/curvature, lateral corridor bounds
//! realizing the road limits, and curvature magnitude/rate limits. Each SQP
//! iteration linearizes the dynamics and the auxiliary-error map around the
//! current iterate and solves one sparse QP; RTI mode performs exactly one
//! such iteration per replan and relies on warm starts.

use crate::qp::{solve_qp_warm, QpError, QpProblem, QpSettings, QpStatus, SparseMatrix};
use crate::road::{GlobalPath, RoadPath, RoadSample};
use crate::tuning::{self, TuningError};
use crate::vehicle::{
    self, linearize_aux, linearize_dynamics, simulate, Trajectory, VehicleError, VehicleParams, VehicleState,
};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum PlannerError {
    #[error("linearization failed at step {step}: {source}")]
    LinearizationFailed {
        step: usize,
        #[source]
        source: VehicleError,
    },
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
    #[error(transparent)]
    Tuning(#[from] TuningError),
    #[error("invalid plan problem: {msg}")]
    InvalidProblem { msg: String },
    #[error("window {window} (start index {start_index}): {source}")]
    Window {
        window: usize,
        start_index: usize,
        #[source]
        source: Box<PlannerError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Sqp,
    Rti,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// Weighted two-axle objective with the geometric K schedule.
    Tuned,
    /// Penalizes the rear-axle error only (prior-work baseline); the
    /// auxiliary state is still tracked for the corridor constraints.
    RearAxleOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub horizon_m: f64,
    pub delta_s: f64,
    pub execute_m: f64,
    pub omega_kappa: f64,
    pub mode: PlanMode,
    pub objective: ObjectiveMode,
    pub sqp_tol: f64,
    pub sqp_max_iter: usize,
    pub qp: QpSettings,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            horizon_m: 100.0,
            delta_s: 0.5,
            execute_m: 5.0,
            omega_kappa: 10.0,
            mode: PlanMode::Sqp,
            objective: ObjectiveMode::Tuned,
            sqp_tol: 1e-6,
            sqp_max_iter: 30,
            qp: QpSettings::default(),
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        let bad = |msg: String| Err(PlannerError::InvalidProblem { msg });
        if !(self.delta_s > 0.0) {
            return bad(format!("delta_s must be positive, got {}", self.delta_s));
        }
        let steps = self.horizon_m / self.delta_s;
        if (steps - steps.round()).abs() > 1e-9 || steps < 1.0 {
            return bad(format!("horizon {} m is not a multiple of delta_s {}", self.horizon_m, self.delta_s));
        }
        let exec = self.execute_m / self.delta_s;
        if (exec - exec.round()).abs() > 1e-9 || exec < 1.0 {
            return bad(format!("execute {} m is not a multiple of delta_s {}", self.execute_m, self.delta_s));
        }
        if self.execute_m > self.horizon_m {
            return bad("execute_m must not exceed horizon_m".into());
        }
        if !(self.omega_kappa > 0.0) {
            return bad("omega_kappa must be positive".into());
        }
        Ok(())
    }

    pub fn horizon_steps(&self) -> usize {
        (self.horizon_m / self.delta_s).round() as usize
    }

    pub fn execute_steps(&self) -> usize {
        (self.execute_m / self.delta_s).round() as usize
    }
}

/// A contiguous slice of the road grid: samples `start ..= start + steps`.
#[derive(Debug, Clone, Copy)]
pub struct RoadWindow<'a> {
    pub road: &'a RoadPath,
    pub globals: &'a GlobalPath,
    pub start: usize,
    pub steps: usize,
}

impl<'a> RoadWindow<'a> {
    pub fn new(road: &'a RoadPath, globals: &'a GlobalPath, start: usize, steps: usize) -> Result<Self, PlannerError> {
        if start + steps > road.n_steps() {
            return Err(PlannerError::InvalidProblem {
                msg: format!("window {start}+{steps} runs past the road ({} steps)", road.n_steps()),
            });
        }
        if steps == 0 {
            return Err(PlannerError::InvalidProblem { msg: "empty window".into() });
        }
        Ok(RoadWindow { road, globals, start, steps })
    }

    pub fn s_at(&self, i: usize) -> f64 {
        (self.start + i) as f64 * self.road.delta_s()
    }

    pub fn sample(&self, i: usize) -> &RoadSample {
        &self.road.samples()[self.start + i]
    }
}

/// Per-step lateral bounds on e_y and on the auxiliary error.
#[derive(Debug, Clone, PartialEq)]
pub struct Corridor {
    pub ey_lo: Vec<f64>,
    pub ey_hi: Vec<f64>,
    pub aux_lo: Vec<f64>,
    pub aux_hi: Vec<f64>,
}

impl Corridor {
    /// Uniform symmetric corridor of half-width `bound` on both errors.
    pub fn uniform(steps: usize, bound: f64) -> Self {
        Corridor {
            ey_lo: vec![-bound; steps + 1],
            ey_hi: vec![bound; steps + 1],
            aux_lo: vec![-bound; steps + 1],
            aux_hi: vec![bound; steps + 1],
        }
    }

    /// Road-limit corridor: the tracked axles must keep the relevant body
    /// half-width inside the lane at every sample.
    pub fn from_road(window: &RoadWindow, params: &VehicleParams) -> Self {
        let w_main = params.tractor().w;
        let w_aux = params.aux_body_width();
        let n = window.steps;
        let mut c = Corridor {
            ey_lo: Vec::with_capacity(n + 1),
            ey_hi: Vec::with_capacity(n + 1),
            aux_lo: Vec::with_capacity(n + 1),
            aux_hi: Vec::with_capacity(n + 1),
        };
        for i in 0..=n {
            let smp = window.sample(i);
            c.ey_lo.push(-smp.w_right + w_main / 2.0);
            c.ey_hi.push(smp.w_left - w_main / 2.0);
            c.aux_lo.push(-smp.w_right + w_aux / 2.0);
            c.aux_hi.push(smp.w_left - w_aux / 2.0);
        }
        c
    }

    fn validate(&self, steps: usize) -> Result<(), PlannerError> {
        let n = steps + 1;
        if self.ey_lo.len() != n || self.ey_hi.len() != n || self.aux_lo.len() != n || self.aux_hi.len() != n {
            return Err(PlannerError::InvalidProblem { msg: "corridor length mismatch".into() });
        }
        for i in 0..n {
            if !(self.ey_lo[i] < self.ey_hi[i]) || !(self.aux_lo[i] < self.aux_hi[i]) {
                return Err(PlannerError::InvalidProblem {
                    msg: format!("corridor empty at step {i} (road too narrow for the vehicle)"),
                });
            }
        }
        Ok(())
    }
}

/// One planning instance over a road window.
#[derive(Debug, Clone)]
pub struct PlanProblem<'a> {
    pub window: RoadWindow<'a>,
    pub z_start: VehicleState,
    pub kappa_start: f64,
    /// Objective weights per window sample (length steps + 1).
    pub k_values: Vec<f64>,
    pub corridor: Corridor,
    pub params: &'a VehicleParams,
}

impl<'a> PlanProblem<'a> {
    pub fn new(
        window: RoadWindow<'a>,
        z_start: VehicleState,
        kappa_start: f64,
        k_values: Vec<f64>,
        corridor: Corridor,
        params: &'a VehicleParams,
    ) -> Result<Self, PlannerError> {
        if z_start.kind() != params.kind() {
            return Err(PlannerError::InvalidProblem { msg: "start state kind mismatch".into() });
        }
        if k_values.len() != window.steps + 1 {
            return Err(PlannerError::InvalidProblem {
                msg: format!("k_values has {} entries, expected {}", k_values.len(), window.steps + 1),
            });
        }
        corridor.validate(window.steps)?;
        if kappa_start.abs() > params.tractor().kappa_max + 1e-9 {
            return Err(PlannerError::InvalidProblem {
                msg: format!("kappa_start {} exceeds the curvature limit", kappa_start),
            });
        }
        Ok(PlanProblem { window, z_start, kappa_start, k_values, corridor, params })
    }

    fn n_steps(&self) -> usize {
        self.window.steps
    }
}

/// An SQP iterate: states on the window grid plus one control per step.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanIterate {
    pub states: Vec<VehicleState>,
    pub kappas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub sqp_iters: usize,
    pub qp_solves: usize,
    /// Total inner QP iterations across all solves.
    pub qp_iters: usize,
    pub solve_time_s: f64,
    pub converged: bool,
    /// Infinity norm of curvature/rate/corridor violations of the result.
    pub constraint_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub kappas: Vec<f64>,
    pub states: Vec<VehicleState>,
    pub objective: f64,
    pub stats: SolveStats,
}

/// The planning objective: smoothness plus weighted lateral terms
/// (`omega * sum (dk)^2 + sum (K_i e_y,i + e_aux,i)^2`).
pub fn objective_eval(states: &[VehicleState], kappas: &[f64], k_values: &[f64], omega_kappa: f64) -> f64 {
    objective_for_mode(states, kappas, k_values, omega_kappa, ObjectiveMode::Tuned)
}

fn objective_for_mode(
    states: &[VehicleState],
    kappas: &[f64],
    k_values: &[f64],
    omega_kappa: f64,
    mode: ObjectiveMode,
) -> f64 {
    let mut j_kappa = 0.0;
    for i in 1..kappas.len() {
        j_kappa += (kappas[i] - kappas[i - 1]).powi(2);
    }
    let mut j_lat = 0.0;
    for i in 1..states.len() {
        let term = match mode {
            ObjectiveMode::Tuned => k_values[i] * states[i].e_y() + states[i].aux(),
            ObjectiveMode::RearAxleOnly => states[i].e_y(),
        };
        j_lat += term * term;
    }
    omega_kappa * j_kappa + j_lat
}

/// Quadratic penalty weight on the corridor slacks. Stationarity makes each
/// slack the sum of its corridor duals over 2w, so slacks are nonnegative by
/// construction, exactly zero while the corridor rows are inactive, and
/// bounded by ~5e-6 m per unit of constraint pressure when they bind.
const SLACK_QUAD_WEIGHT: f64 = 1e5;

/// Variable layout per stage: `[z_i, kappa_i, t_i]` where `t_i >= 0` is the
/// stage's corridor slack; the final stage holds `[z_N, t_N]`. Keeping the
/// slack inside its stage block preserves the banded QP structure.
struct Layout {
    nx: usize,
    nc: usize,
    n_steps: usize,
}

impl Layout {
    fn new(problem: &PlanProblem) -> Self {
        Layout { nx: problem.params.state_dim(), nc: problem.params.core_dim(), n_steps: problem.n_steps() }
    }

    fn stride(&self) -> usize {
        self.nx + 2
    }

    fn n_vars(&self) -> usize {
        self.n_steps * self.stride() + self.nx + 1
    }

    fn state(&self, i: usize, comp: usize) -> usize {
        i * self.stride() + comp
    }

    fn aux(&self, i: usize) -> usize {
        self.state(i, self.nx - 1)
    }

    fn kappa(&self, i: usize) -> usize {
        i * self.stride() + self.nx
    }

    fn slack(&self, i: usize) -> usize {
        if i < self.n_steps {
            i * self.stride() + self.nx + 1
        } else {
            self.n_steps * self.stride() + self.nx
        }
    }

    fn n_rows(&self) -> usize {
        // initial state + initial curvature + dynamics + aux ties
        // + four soft corridor rows per predicted step
        // + curvature bounds + rate bounds
        (self.nx + 1) + self.n_steps * self.nc + self.n_steps + 4 * self.n_steps + 2 * (self.n_steps - 1)
    }
}

/// Infinity norm of the QP step over the planner's own coordinates (states
/// and controls); the corridor slacks are internal QP variables.
fn plan_step_norm(layout: &Layout, x_bar: &[f64], x_sol: &[f64]) -> f64 {
    let mut norm: f64 = 0.0;
    for i in 0..=layout.n_steps {
        for c in 0..layout.nx {
            let idx = layout.state(i, c);
            norm = norm.max((x_sol[idx] - x_bar[idx]).abs());
        }
        if i < layout.n_steps {
            let idx = layout.kappa(i);
            norm = norm.max((x_sol[idx] - x_bar[idx]).abs());
        }
    }
    norm
}

fn flatten(layout: &Layout, iterate: &PlanIterate) -> Vec<f64> {
    let mut x = vec![0.0; layout.n_vars()];
    for (i, st) in iterate.states.iter().enumerate() {
        let full = st.to_vec();
        for (c, v) in full.iter().enumerate() {
            x[layout.state(i, c)] = *v;
        }
        if i < layout.n_steps {
            x[layout.kappa(i)] = iterate.kappas[i];
        }
    }
    x
}

/// Builds the sparse QP of one SQP iteration around `iterate`: exact
/// quadratic cost, linearized dynamics and auxiliary-error equalities, soft
/// corridor bounds with exact-penalty slacks, and hard curvature limits.
pub fn build_qp(
    problem: &PlanProblem,
    iterate: &PlanIterate,
    config: &PlanConfig,
) -> Result<QpProblem, PlannerError> {
    let layout = Layout::new(problem);
    let n_steps = layout.n_steps;
    let nx = layout.nx;
    let nc = layout.nc;
    let n = layout.n_vars();
    let ds = problem.window.road.delta_s();
    let tractor = problem.params.tractor();

    if iterate.states.len() != n_steps + 1 || iterate.kappas.len() != n_steps {
        return Err(PlannerError::InvalidProblem { msg: "iterate length mismatch".into() });
    }

    // Quadratic cost. The objective is already quadratic in the decision
    // variables, so P is exact and q vanishes.
    let mut p = SparseMatrix::zeros(n, n);
    for i in 1..n_steps {
        let k0 = layout.kappa(i - 1);
        let k1 = layout.kappa(i);
        let w = 2.0 * config.omega_kappa;
        p.add(k1, k1, w);
        p.add(k0, k0, w);
        p.add(k1, k0, -w);
        p.add(k0, k1, -w);
    }
    for i in 1..=n_steps {
        match config.objective {
            ObjectiveMode::Tuned => {
                let k = problem.k_values[i];
                let ey = layout.state(i, 0);
                let aux = layout.aux(i);
                p.add(ey, ey, 2.0 * k * k);
                p.add(aux, aux, 2.0);
                p.add(ey, aux, 2.0 * k);
                p.add(aux, ey, 2.0 * k);
            }
            ObjectiveMode::RearAxleOnly => {
                let ey = layout.state(i, 0);
                p.add(ey, ey, 2.0);
            }
        }
    }
    let q = vec![0.0; n];
    for i in 0..=n_steps {
        let t = layout.slack(i);
        p.add(t, t, 2.0 * SLACK_QUAD_WEIGHT);
    }

    let m = layout.n_rows();
    let mut a = SparseMatrix::zeros(m, n);
    let mut l = vec![0.0; m];
    let mut u = vec![0.0; m];
    let mut row = 0;

    let z_start = problem.z_start.to_vec();
    for c in 0..nx {
        a.add(row, layout.state(0, c), 1.0);
        l[row] = z_start[c];
        u[row] = z_start[c];
        row += 1;
    }
    a.add(row, layout.kappa(0), 1.0);
    l[row] = problem.kappa_start;
    u[row] = problem.kappa_start;
    row += 1;

    // Dynamics of the core components, linearized around the iterate.
    for i in 0..n_steps {
        let kappa_gamma = problem.window.sample(i).kappa;
        let lin = linearize_dynamics(&iterate.states[i], iterate.kappas[i], kappa_gamma, ds, problem.params)
            .map_err(|source| PlannerError::LinearizationFailed { step: i, source })?;
        for r in 0..nc {
            a.add(row, layout.state(i + 1, r), 1.0);
            for c in 0..nc {
                a.add(row, layout.state(i, c), -lin.a[r][c]);
            }
            a.add(row, layout.kappa(i), -lin.b[r]);
            l[row] = lin.c[r];
            u[row] = lin.c[r];
            row += 1;
        }
    }

    // Auxiliary-error ties at each predicted step.
    for i in 1..=n_steps {
        let s = problem.window.s_at(i);
        let model = linearize_aux(problem.window.road, problem.window.globals, s, &iterate.states[i], problem.params)
            .map_err(|source| PlannerError::LinearizationFailed { step: i, source })?;
        let bar = iterate.states[i].core();
        a.add(row, layout.aux(i), 1.0);
        a.add(row, layout.state(i, 0), -model.d_dey);
        a.add(row, layout.state(i, 1), -model.d_depsi);
        let mut rhs = model.base - model.d_dey * bar[0] - model.d_depsi * bar[1];
        if let Some(db) = model.d_dbeta1 {
            a.add(row, layout.state(i, 2), -db);
            rhs -= db * bar[2];
        }
        l[row] = rhs;
        u[row] = rhs;
        row += 1;
    }

    // Soft corridor: e - t <= hi and e + t >= lo with a quadratically
    // penalized stage slack t. Slacks vanish while the hard corridor is
    // inactive and absorb the re-linearization drift when the vehicle rides
    // an active bound (the initial state and curvature are pinned, so early
    // predicted states are not freely placeable).
    for i in 1..=n_steps {
        let t = layout.slack(i);
        a.add(row, layout.state(i, 0), 1.0);
        a.add(row, t, -1.0);
        l[row] = f64::NEG_INFINITY;
        u[row] = problem.corridor.ey_hi[i];
        row += 1;
        a.add(row, layout.state(i, 0), 1.0);
        a.add(row, t, 1.0);
        l[row] = problem.corridor.ey_lo[i];
        u[row] = f64::INFINITY;
        row += 1;
        a.add(row, layout.aux(i), 1.0);
        a.add(row, t, -1.0);
        l[row] = f64::NEG_INFINITY;
        u[row] = problem.corridor.aux_hi[i];
        row += 1;
        a.add(row, layout.aux(i), 1.0);
        a.add(row, t, 1.0);
        l[row] = problem.corridor.aux_lo[i];
        u[row] = f64::INFINITY;
        row += 1;
    }
    for i in 1..n_steps {
        a.add(row, layout.kappa(i), 1.0);
        l[row] = -tractor.kappa_max;
        u[row] = tractor.kappa_max;
        row += 1;
    }
    let rate = tractor.kappa_rate_max * ds;
    for i in 1..n_steps {
        a.add(row, layout.kappa(i), 1.0);
        a.add(row, layout.kappa(i - 1), -1.0);
        l[row] = -rate;
        u[row] = rate;
        row += 1;
    }
    debug_assert_eq!(row, m);

    Ok(QpProblem::new(p, q, a, l, u)?)
}

/// Initial iterate: forward rollout at the road curvature, clipped to the
/// curvature limit.
fn rollout_iterate(problem: &PlanProblem) -> Result<PlanIterate, PlannerError> {
    let n_steps = problem.n_steps();
    let kappa_max = problem.params.tractor().kappa_max;
    let controls: Vec<f64> =
        (0..n_steps).map(|i| problem.window.sample(i).kappa.clamp(-kappa_max, kappa_max)).collect();
    let traj = simulate(
        problem.window.road,
        problem.window.globals,
        problem.window.start,
        &problem.z_start,
        &controls,
        problem.params,
    )?;
    Ok(PlanIterate { states: traj.states, kappas: controls })
}

/// Rebuilds an iterate from a QP solution: the start state and curvature are
/// pinned exactly, controls are projected onto the curvature box and rate
/// chain (the QP honors them only to its tolerance), and every auxiliary
/// component is refreshed by exact projection at its arc length.
fn iterate_from_x(problem: &PlanProblem, layout: &Layout, x: &[f64]) -> Result<PlanIterate, PlannerError> {
    let n_steps = layout.n_steps;
    let kind = problem.params.kind();
    let tractor = problem.params.tractor();
    let rate = tractor.kappa_rate_max * problem.window.road.delta_s();
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut kappas: Vec<f64> = Vec::with_capacity(n_steps);
    states.push(problem.z_start);
    kappas.push(problem.kappa_start);
    for i in 1..=n_steps {
        let core: Vec<f64> = (0..layout.nc).map(|c| x[layout.state(i, c)]).collect();
        let s = problem.window.s_at(i);
        let aux = match problem.params {
            VehicleParams::Bus(p) => {
                vehicle::aux_error_bus(problem.window.road, problem.window.globals, s, core[0], core[1], p)
            }
            VehicleParams::TractorTrailer(p) => vehicle::aux_error_tt(
                problem.window.road,
                problem.window.globals,
                s,
                core[0],
                core[1],
                core[2],
                p,
            ),
        }
        .map_err(|source| PlannerError::LinearizationFailed { step: i, source })?;
        states.push(VehicleState::from_core(kind, &core, aux));
        if i < n_steps {
            let prev = kappas[i - 1];
            let lo = (prev - rate).max(-tractor.kappa_max);
            let hi = (prev + rate).min(tractor.kappa_max);
            kappas.push(x[layout.kappa(i)].clamp(lo, hi));
        }
    }
    Ok(PlanIterate { states, kappas })
}

fn blend(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x0, x1)| x0 + alpha * (x1 - x0)).collect()
}

fn constraint_violation(problem: &PlanProblem, iterate: &PlanIterate) -> f64 {
    let tractor = problem.params.tractor();
    let rate = tractor.kappa_rate_max * problem.window.road.delta_s();
    let mut v: f64 = 0.0;
    for (i, st) in iterate.states.iter().enumerate().skip(1) {
        v = v.max(problem.corridor.ey_lo[i] - st.e_y());
        v = v.max(st.e_y() - problem.corridor.ey_hi[i]);
        v = v.max(problem.corridor.aux_lo[i] - st.aux());
        v = v.max(st.aux() - problem.corridor.aux_hi[i]);
    }
    for (i, k) in iterate.kappas.iter().enumerate() {
        if i >= 1 {
            v = v.max(k.abs() - tractor.kappa_max);
            v = v.max((k - iterate.kappas[i - 1]).abs() - rate);
        }
    }
    v.max(0.0)
}

fn finish_result(
    problem: &PlanProblem,
    config: &PlanConfig,
    iterate: PlanIterate,
    sqp_iters: usize,
    qp_solves: usize,
    qp_iters: usize,
    converged: bool,
    t0: Instant,
) -> PlanResult {
    let objective = objective_for_mode(
        &iterate.states,
        &iterate.kappas,
        &problem.k_values,
        config.omega_kappa,
        config.objective,
    );
    let violation = constraint_violation(problem, &iterate);
    PlanResult {
        objective,
        stats: SolveStats {
            sqp_iters,
            qp_solves,
            qp_iters,
            solve_time_s: t0.elapsed().as_secs_f64(),
            converged,
            constraint_violation: violation,
        },
        kappas: iterate.kappas,
        states: iterate.states,
    }
}

/// Full SQP: iterate linearize-and-solve until the QP step vanishes.
///
/// Damping is two-level: full steps, halved once if the objective increases.
/// Non-convergence is not an error; the best iterate is returned with
/// `converged = false`.
pub fn sqp_solve(
    problem: &PlanProblem,
    config: &PlanConfig,
    warm: Option<&PlanIterate>,
) -> Result<PlanResult, PlannerError> {
    let t0 = Instant::now();
    let layout = Layout::new(problem);
    let mut iterate = match warm {
        Some(w) => w.clone(),
        None => rollout_iterate(problem)?,
    };
    let mut prev_step_norm = f64::INFINITY;
    let mut qp_iters = 0;
    let mut qp_solves = 0;

    // Each QP is solved cold: warm-starting the splitting solver with the
    // previous linearization's duals biases the marginal active set and can
    // lock the outer iteration into a flip cycle near saturated limits.
    for it in 1..=config.sqp_max_iter {
        let qp = build_qp(problem, &iterate, config)?;
        let sol = solve_qp_warm(&qp, &config.qp, None)?;
        qp_iters += sol.iterations;
        qp_solves += 1;
        let x_bar = flatten(&layout, &iterate);
        let step_norm = plan_step_norm(&layout, &x_bar, &sol.x);

        log::debug!("sqp iteration {it}: step norm {step_norm:.3e}, qp iters {}", sol.iterations);
        if step_norm < config.sqp_tol {
            // A vanishing step only counts as convergence when the final QP
            // itself solved to tolerance.
            let converged = sol.status == QpStatus::Solved;
            let final_iterate = iterate_from_x(problem, &layout, &sol.x)?;
            return Ok(finish_result(problem, config, final_iterate, it, qp_solves, qp_iters, converged, t0));
        }

        // Full Newton-type steps while the step norms contract; halve on
        // expansion (a divergence guard) or when the full step leaves the
        // model's validity domain.
        let expanding = step_norm > prev_step_norm;
        prev_step_norm = step_norm;
        let full = if expanding { None } else { iterate_from_x(problem, &layout, &sol.x).ok() };
        let next = match full {
            Some(candidate) => candidate,
            None => {
                let half_x = blend(&x_bar, &sol.x, 0.5);
                iterate_from_x(problem, &layout, &half_x)?
            }
        };
        iterate = next;
        if it == config.sqp_max_iter {
            return Ok(finish_result(problem, config, iterate, it, qp_solves, qp_iters, false, t0));
        }
    }
    unreachable!("sqp loop always returns");
}

/// Real-time iteration: exactly one linearize-and-solve from the warm start
/// (or the rollout when cold), with a full update.
pub fn rti_step(
    problem: &PlanProblem,
    config: &PlanConfig,
    warm: Option<&PlanIterate>,
) -> Result<PlanResult, PlannerError> {
    let t0 = Instant::now();
    let layout = Layout::new(problem);
    let iterate = match warm {
        Some(w) => w.clone(),
        None => rollout_iterate(problem)?,
    };
    let qp = build_qp(problem, &iterate, config)?;
    let sol = solve_qp_warm(&qp, &config.qp, None)?;
    let x_bar = flatten(&layout, &iterate);
    let step_norm = plan_step_norm(&layout, &x_bar, &sol.x);
    let next = iterate_from_x(problem, &layout, &sol.x)?;
    let converged = step_norm < config.sqp_tol && sol.status == QpStatus::Solved;
    Ok(finish_result(problem, config, next, 1, 1, sol.iterations, converged, t0))
}

/// Per-window statistics of a receding-horizon run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub window: usize,
    pub start_index: usize,
    pub sqp_iters: usize,
    pub qp_solves: usize,
    pub qp_iters: usize,
    pub solve_time_s: f64,
    pub converged: bool,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct DriveResult {
    pub driven: Trajectory,
    pub windows: Vec<WindowStats>,
    pub mode: PlanMode,
}

impl DriveResult {
    pub fn mean_solve_time_s(&self) -> f64 {
        if self.windows.is_empty() {
            return 0.0;
        }
        self.windows.iter().map(|w| w.solve_time_s).sum::<f64>() / self.windows.len() as f64
    }

    pub fn max_solve_time_s(&self) -> f64 {
        self.windows.iter().map(|w| w.solve_time_s).fold(0.0, f64::max)
    }
}

/// Shifts a plan by `exec` steps for the next window's warm start. The
/// freshly exposed tail repeats the last control and holds the terminal
/// state; a rollout there can wind up the heading error across curvature
/// transitions, while held states stay valid linearization points whose
/// model mismatch the QP absorbs in its affine term.
fn shift_warm_start(result: &PlanResult, exec: usize) -> PlanIterate {
    let mut states: Vec<VehicleState> = result.states[exec..].to_vec();
    let mut kappas: Vec<f64> = result.kappas[exec..].to_vec();
    let last_kappa = *kappas.last().expect("non-empty plan");
    let last_state = *states.last().expect("non-empty plan");
    for _ in 0..exec {
        states.push(last_state);
        kappas.push(last_kappa);
    }
    PlanIterate { states, kappas }
}

/// Receding-horizon drive: plan, execute the first `execute_m` meters through
/// the simulator, shift, and repeat while a full horizon fits on the road.
pub fn receding_horizon_run(
    road: &RoadPath,
    globals: &GlobalPath,
    z0: &VehicleState,
    kappa0: f64,
    params: &VehicleParams,
    config: &PlanConfig,
) -> Result<DriveResult, PlannerError> {
    config.validate()?;
    if (road.delta_s() - config.delta_s).abs() > 1e-9 {
        return Err(PlannerError::InvalidProblem {
            msg: format!("config delta_s {} does not match road grid {}", config.delta_s, road.delta_s()),
        });
    }
    let n = config.horizon_steps();
    let exec = config.execute_steps();
    if road.n_steps() < n {
        return Err(PlannerError::InvalidProblem {
            msg: format!("road has {} steps, shorter than the horizon {n}", road.n_steps()),
        });
    }

    let k_full: Vec<f64> = match config.objective {
        ObjectiveMode::Tuned => tuning::k_schedule(road, params)?.values,
        ObjectiveMode::RearAxleOnly => vec![1.0; road.samples().len()],
    };

    let mut driven_states = vec![*z0];
    let mut driven_kappas: Vec<f64> = Vec::new();
    let mut driven_poses = vec![vehicle::rear_axle_pose(globals, 0.0, z0.e_y(), z0.e_psi())];
    let mut windows = Vec::new();
    let mut warm: Option<PlanIterate> = None;
    let mut z_current = *z0;
    let mut kappa_current = kappa0;
    let mut start = 0usize;
    let mut window_idx = 0usize;

    while start + n <= road.n_steps() {
        let wrap = |source: PlannerError| PlannerError::Window {
            window: window_idx,
            start_index: start,
            source: Box::new(source),
        };
        let window = RoadWindow::new(road, globals, start, n).map_err(&wrap)?;
        let corridor = Corridor::from_road(&window, params);
        let problem = PlanProblem::new(
            window,
            z_current,
            kappa_current,
            k_full[start..=start + n].to_vec(),
            corridor,
            params,
        )
        .map_err(&wrap)?;
        let result = match config.mode {
            PlanMode::Sqp => sqp_solve(&problem, config, warm.as_ref()),
            PlanMode::Rti => rti_step(&problem, config, warm.as_ref()),
        }
        .map_err(&wrap)?;
        log::debug!(
            "window {window_idx} at index {start}: {} sqp iters, {:.4} s, converged {}",
            result.stats.sqp_iters,
            result.stats.solve_time_s,
            result.stats.converged
        );
        windows.push(WindowStats {
            window: window_idx,
            start_index: start,
            sqp_iters: result.stats.sqp_iters,
            qp_solves: result.stats.qp_solves,
            qp_iters: result.stats.qp_iters,
            solve_time_s: result.stats.solve_time_s,
            converged: result.stats.converged,
            objective: result.objective,
        });

        let executed = &result.kappas[..exec];
        let sim = simulate(road, globals, start, &z_current, executed, params).map_err(|e| wrap(e.into()))?;
        driven_states.extend_from_slice(&sim.states[1..]);
        driven_poses.extend_from_slice(&sim.poses[1..]);
        driven_kappas.extend_from_slice(executed);
        z_current = *sim.states.last().unwrap();
        kappa_current = executed[exec - 1];

        let next_start = start + exec;
        if next_start + n <= road.n_steps() {
            warm = Some(shift_warm_start(&result, exec));
        }
        start = next_start;
        window_idx += 1;
    }

    Ok(DriveResult {
        driven: Trajectory {
            start_index: 0,
            delta_s: road.delta_s(),
            states: driven_states,
            kappas: driven_kappas,
            poses: driven_poses,
        },
        windows,
        mode: config.mode,
    })
}

#[cfg(test)]
mod tests {
// temporary: locate the violation

    use super::*;
    use crate::road::RoadPath;
    use crate::tuning::{bus_optimal_k, k_schedule};
    use crate::vehicle::{BusParams, BusState, VehicleKind};
    use approx::assert_abs_diff_eq;

    fn straight(length: f64, ds: f64) -> RoadPath {
        let n = (length / ds).round() as usize;
        let samples = (0..=n)
            .map(|i| RoadSample { s: i as f64 * ds, kappa: 0.0, w_left: 3.5, w_right: 3.5 })
            .collect();
        RoadPath::new(samples, None).unwrap()
    }

    fn ring(radius: f64, length: f64, ds: f64) -> RoadPath {
        let n = (length / ds).round() as usize;
        let samples = (0..=n)
            .map(|i| RoadSample { s: i as f64 * ds, kappa: 1.0 / radius, w_left: 3.5, w_right: 3.5 })
            .collect();
        RoadPath::new(samples, None).unwrap()
    }

    fn bus_params() -> VehicleParams {
        VehicleParams::Bus(BusParams::default_city_bus())
    }

    #[test]
    fn objective_identities() {
        let kind = VehicleKind::Bus;
        let states = vec![VehicleState::zero(kind); 5];
        let kappas = vec![0.1; 4];
        let ks = vec![1.0; 5];
        assert_eq!(objective_eval(&states, &kappas, &ks, 3.0), 0.0);

        // e_y = 1, e_aux = -K everywhere: the lateral term vanishes and only
        // smoothness remains.
        let states: Vec<VehicleState> =
            (0..5).map(|_| VehicleState::Bus(BusState { e_y: 1.0, e_psi: 0.0, e_y_bus: -2.0 })).collect();
        let kappas = vec![0.0, 0.01, 0.0, 0.01];
        let ks = vec![2.0; 5];
        let j = objective_eval(&states, &kappas, &ks, 5.0);
        assert_abs_diff_eq!(j, 5.0 * 3.0 * 0.01_f64.powi(2), epsilon = 1e-15);
    }

    #[test]
    fn qp_dimensions_small_problem() {
        let road = straight(2.0, 1.0);
        let gp = GlobalPath::new(&road);
        let params = bus_params();
        let window = RoadWindow::new(&road, &gp, 0, 2).unwrap();
        let problem = PlanProblem::new(
            window,
            VehicleState::zero(VehicleKind::Bus),
            0.0,
            vec![1.0; 3],
            Corridor::uniform(2, 3.0),
            &params,
        )
        .unwrap();
        let config = PlanConfig { delta_s: 1.0, horizon_m: 2.0, execute_m: 1.0, ..PlanConfig::default() };
        let iterate = rollout_iterate(&problem).unwrap();
        let qp = build_qp(&problem, &iterate, &config).unwrap();
        // Variables: 3 states of dim 3, 2 controls, 3 corridor slacks.
        assert_eq!(qp.n(), 14);
        // Rows: 4 initial + 2*2 dynamics + 2 aux + 8 soft corridor
        // + 1 curvature bound + 1 rate bound.
        assert_eq!(qp.m(), 20);
    }

    #[test]
    fn zero_iterate_is_qp_fixed_point_on_straight_road() {
        let road = straight(20.0, 0.5);
        let gp = GlobalPath::new(&road);
        let params = bus_params();
        let n = 40;
        let window = RoadWindow::new(&road, &gp, 0, n).unwrap();
        let problem = PlanProblem::new(
            window,
            VehicleState::zero(VehicleKind::Bus),
            0.0,
            vec![1.0; n + 1],
            Corridor::uniform(n, 3.0),
            &params,
        )
        .unwrap();
        let config = PlanConfig { horizon_m: 20.0, ..PlanConfig::default() };
        let iterate = PlanIterate {
            states: vec![VehicleState::zero(VehicleKind::Bus); n + 1],
            kappas: vec![0.0; n],
        };
        let qp = build_qp(&problem, &iterate, &config).unwrap();
        let sol = crate::qp::solve_qp(&qp, &config.qp).unwrap();
        let layout = Layout::new(&problem);
        let x_bar = flatten(&layout, &iterate);
        let step: f64 = sol.x.iter().zip(&x_bar).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(step < 1e-9, "zero iterate moved by {step}");
    }

    #[test]
    fn geometric_optimum_is_qp_stationary_on_ring() {
        let r_road = 8.0;
        let road = ring(r_road, 60.0, 0.5);
        // Fine integration substeps keep path-geometry error well below the
        // stationarity tolerance under test.
        let gp = GlobalPath::with_substeps(&road, 100);
        let params = bus_params();
        let sol_geo = bus_optimal_k(r_road, &BusParams::default_city_bus()).unwrap();
        let n = 100;
        let window = RoadWindow::new(&road, &gp, 0, n).unwrap();
        let k_values = vec![sol_geo.k; n + 1];

        // Equilibrium state with the exact projected auxiliary error.
        let layout_state = {
            let aux =
                vehicle::aux_error_bus(&road, &gp, 0.0, sol_geo.e_y, 0.0, &BusParams::default_city_bus()).unwrap();
            VehicleState::Bus(BusState { e_y: sol_geo.e_y, e_psi: 0.0, e_y_bus: aux })
        };
        let problem = PlanProblem::new(
            window,
            layout_state,
            sol_geo.kappa(),
            k_values,
            Corridor::uniform(n, 3.0),
            &params,
        )
        .unwrap();
        let config = PlanConfig { horizon_m: 50.0, ..PlanConfig::default() };
        let iterate = PlanIterate {
            states: (0..=n)
                .map(|i| {
                    let s = i as f64 * 0.5;
                    let aux = vehicle::aux_error_bus(&road, &gp, s, sol_geo.e_y, 0.0, &BusParams::default_city_bus())
                        .unwrap();
                    VehicleState::Bus(BusState { e_y: sol_geo.e_y, e_psi: 0.0, e_y_bus: aux })
                })
                .collect(),
            kappas: vec![sol_geo.kappa(); n],
        };
        let qp = build_qp(&problem, &iterate, &config).unwrap();
        let sol = crate::qp::solve_qp(&qp, &config.qp).unwrap();
        let layout = Layout::new(&problem);
        let x_bar = flatten(&layout, &iterate);
        let step: f64 = sol.x.iter().zip(&x_bar).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(step < 1e-6, "stationary iterate moved by {step}");
    }

    #[test]
    fn sqp_converges_immediately_on_straight_road() {
        let road = straight(100.0, 0.5);
        let gp = GlobalPath::new(&road);
        let params = bus_params();
        let n = 100;
        let window = RoadWindow::new(&road, &gp, 0, n).unwrap();
        let problem = PlanProblem::new(
            window,
            VehicleState::zero(VehicleKind::Bus),
            0.0,
            vec![1.0; n + 1],
            Corridor::uniform(n, 3.0),
            &params,
        )
        .unwrap();
        let config = PlanConfig { horizon_m: 50.0, ..PlanConfig::default() };
        let result = sqp_solve(&problem, &config, None).unwrap();
        assert!(result.stats.converged);
        assert!(result.stats.sqp_iters <= 2, "took {} iterations", result.stats.sqp_iters);
        assert!(result.objective < 1e-12);
        for st in &result.states {
            assert!(st.e_y().abs() < 1e-8);
        }
    }

    #[test]
    fn sqp_reaches_geometric_curvature_on_ring() {
        let r_road = 8.0;
        let road = ring(r_road, 80.0, 0.5);
        let gp = GlobalPath::new(&road);
        let params = bus_params();
        let sol_geo = bus_optimal_k(r_road, &BusParams::default_city_bus()).unwrap();
        let n = 120;
        let window = RoadWindow::new(&road, &gp, 0, n).unwrap();
        let k_values = k_schedule(&road, &params).unwrap().values[..=n].to_vec();
        let aux0 = vehicle::aux_error_bus(&road, &gp, 0.0, 0.0, 0.0, &BusParams::default_city_bus()).unwrap();
        let problem = PlanProblem::new(
            window,
            VehicleState::Bus(BusState { e_y: 0.0, e_psi: 0.0, e_y_bus: aux0 }),
            1.0 / r_road,
            k_values,
            Corridor::uniform(n, 3.0),
            &params,
        )
        .unwrap();
        let config = PlanConfig { horizon_m: 60.0, ..PlanConfig::default() };
        let result = sqp_solve(&problem, &config, None).unwrap();
        assert!(result.stats.converged);
        assert!(result.stats.constraint_violation <= 1e-8, "violation {}", result.stats.constraint_violation);
        // Interior curvature settles at the geometric optimum.
        let kappa_opt = sol_geo.kappa();
        for i in 60..100 {
            assert!(
                (result.kappas[i] - kappa_opt).abs() <= 0.01 * kappa_opt,
                "kappa[{i}] = {} vs optimal {kappa_opt}",
                result.kappas[i]
            );
        }
    }

    #[test]
    fn narrow_corridor_pins_centerline() {
        let r_road = 12.0;
        let road = ring(r_road, 60.0, 0.5);
        let gp = GlobalPath::new(&road);
        let params = bus_params();
        let n = 80;
        let window = RoadWindow::new(&road, &gp, 0, n).unwrap();
        let k_values = k_schedule(&road, &params).unwrap().values[..=n].to_vec();
        let mut corridor = Corridor::uniform(n, 3.0);
        for i in 0..=n {
            corridor.ey_lo[i] = -1e-6;
            corridor.ey_hi[i] = 1e-6;
        }
        let aux0 = vehicle::aux_error_bus(&road, &gp, 0.0, 0.0, 0.0, &BusParams::default_city_bus()).unwrap();
        let problem = PlanProblem::new(
            window,
            VehicleState::Bus(BusState { e_y: 0.0, e_psi: 0.0, e_y_bus: aux0 }),
            1.0 / r_road,
            k_values,
            corridor,
            &params,
        )
        .unwrap();
        let config = PlanConfig { horizon_m: 40.0, ..PlanConfig::default() };
        let result = sqp_solve(&problem, &config, None).unwrap();
        // The soft corridor leaves lambda/(2 w) of slack under pressure, so
        // the pin is tight only to sub-millimeter scale.
        for st in result.states.iter().skip(1) {
            assert!(st.e_y().abs() < 1e-3, "e_y = {}", st.e_y());
        }
        assert!(result.objective > 1e-4, "lateral objective should not vanish, got {}", result.objective);
    }

    #[test]
    fn rti_fixed_point_after_sqp() {
        let road = ring(10.0, 60.0, 0.5);
        let gp = GlobalPath::new(&road);
        let params = bus_params();
        let n = 80;
        let window = RoadWindow::new(&road, &gp, 0, n).unwrap();
        let k_values = k_schedule(&road, &params).unwrap().values[..=n].to_vec();
        let aux0 = vehicle::aux_error_bus(&road, &gp, 0.0, 0.0, 0.0, &BusParams::default_city_bus()).unwrap();
        let problem = PlanProblem::new(
            window,
            VehicleState::Bus(BusState { e_y: 0.0, e_psi: 0.0, e_y_bus: aux0 }),
            0.1,
            k_values,
            Corridor::uniform(n, 3.0),
            &params,
        )
        .unwrap();
        let config = PlanConfig { horizon_m: 40.0, ..PlanConfig::default() };
        let sqp = sqp_solve(&problem, &config, None).unwrap();
        assert!(sqp.stats.converged);
        let warm = PlanIterate { states: sqp.states.clone(), kappas: sqp.kappas.clone() };
        let rti = rti_step(&problem, &config, Some(&warm)).unwrap();
        assert_eq!(rti.stats.sqp_iters, 1);
        assert_eq!(rti.stats.qp_solves, 1);
        assert!(rti.stats.converged);
        let drift: f64 = rti
            .kappas
            .iter()
            .zip(&sqp.kappas)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-6, "warm-started RTI drifted by {drift}");
    }

    #[test]
    fn receding_run_tracks_straight_road() {
        let road = straight(300.0, 0.5);
        let gp = GlobalPath::new(&road);
        let params = bus_params();
        let config = PlanConfig::default();
        let result =
            receding_horizon_run(&road, &gp, &VehicleState::zero(VehicleKind::Bus), 0.0, &params, &config).unwrap();
        assert!(!result.windows.is_empty());
        let max_ey = result.driven.states.iter().map(|s| s.e_y().abs()).fold(0.0, f64::max);
        assert!(max_ey < 1e-3, "driven |e_y| reached {max_ey}");
    }

    #[test]
    fn receding_run_reaches_ring_equilibrium() {
        let r_road = 12.0;
        let road = ring(r_road, 260.0, 0.5);
        let gp = GlobalPath::new(&road);
        let params = bus_params();
        let config = PlanConfig::default();
        let sol_geo = bus_optimal_k(r_road, &BusParams::default_city_bus()).unwrap();
        let aux0 = vehicle::aux_error_bus(&road, &gp, 0.0, 0.0, 0.0, &BusParams::default_city_bus()).unwrap();
        let z0 = VehicleState::Bus(BusState { e_y: 0.0, e_psi: 0.0, e_y_bus: aux0 });
        let result = receding_horizon_run(&road, &gp, &z0, 1.0 / r_road, &params, &config).unwrap();
        // Steady interior: past the entry transient, before the final state.
        let n_driven = result.driven.states.len();
        for i in (n_driven / 2)..(n_driven - 1) {
            let st = &result.driven.states[i];
            assert!(
                (st.e_y() - sol_geo.e_y).abs() < 0.02,
                "e_y[{i}] = {} vs equilibrium {}",
                st.e_y(),
                sol_geo.e_y
            );
            let k = result.driven.kappas[i.min(result.driven.kappas.len() - 1)];
            assert!((k - sol_geo.kappa()).abs() < 0.01 * sol_geo.kappa());
        }
    }

    #[test]
    fn rear_axle_mode_centers_rear_axle() {
        let r_road = 12.0;
        let road = ring(r_road, 160.0, 0.5);
        let gp = GlobalPath::new(&road);
        let params = bus_params();
        let config = PlanConfig {
            objective: ObjectiveMode::RearAxleOnly,
            horizon_m: 60.0,
            ..PlanConfig::default()
        };
        let aux0 = vehicle::aux_error_bus(&road, &gp, 0.0, 0.0, 0.0, &BusParams::default_city_bus()).unwrap();
        let z0 = VehicleState::Bus(BusState { e_y: 0.0, e_psi: 0.0, e_y_bus: aux0 });
        let result = receding_horizon_run(&road, &gp, &z0, 1.0 / r_road, &params, &config).unwrap();
        let n_driven = result.driven.states.len();
        for i in (n_driven / 2)..(n_driven - 1) {
            assert!(result.driven.states[i].e_y().abs() < 5e-3);
        }
    }
}
