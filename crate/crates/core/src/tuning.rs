//! Geometric derivation of the lane-centering objective weight.
//!
//! On a road of constant radius the balanced swept width pins a unique
//! turning radius for the guiding axle. For the bus it has a closed form;
//! for the tractor-trailer it is the root of a strictly monotone scalar
//! equation which is solved by bracketed bisection with a Newton polish.
//! From the radius follow the steady lateral errors of both tracked axles
//! and the weight `K` that makes the lateral objective vanish exactly at
//! that configuration. On roads with varying curvature the weight is
//! re-derived per sample.

use crate::road::RoadPath;
use crate::vehicle::{
    BusParams, BusState, TractorTrailerParams, TractorTrailerState, VehicleKind, VehicleParams, VehicleState,
};
use serde::{Deserialize, Serialize};

/// Samples with |kappa| below this are treated as straight, 1/m.
pub const KAPPA_STRAIGHT: f64 = 1e-4;

/// Weight used on straight samples, where both errors vanish at the optimum
/// for any positive weight.
pub const K_DEFAULT: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum TuningError {
    #[error("geometry infeasible: {msg}")]
    GeometryInfeasible { msg: String },
    #[error("root finding did not converge: {msg}")]
    NoConvergence { msg: String },
    #[error("sample {index}: {source}")]
    AtSample {
        index: usize,
        #[source]
        source: Box<TuningError>,
    },
}

/// Steady-state geometry of the balanced configuration on a constant-radius
/// road. All radii and errors are signed; negative radii describe right
/// turns, obtained from the left-turn solution by mirror symmetry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricSolution {
    pub kind: VehicleKind,
    /// Signed road radius, m.
    pub r_road: f64,
    /// Guiding-axle (bus / tractor rear axle) turning radius, m.
    pub r1: f64,
    /// Trailer-axle radius, tractor-trailer only, m.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    /// Inner swept radius (rear/trailer left wheel on a left turn), m.
    pub r_left: f64,
    /// Outer swept radius (front right body corner on a left turn), m.
    pub r_right: f64,
    /// Steady rear-axle lateral error, m.
    pub e_y: f64,
    /// Steady auxiliary (front axle / trailer axle) lateral error, m.
    pub e_y_aux: f64,
    /// Steady joint angle, tractor-trailer only, rad.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    /// Objective weight with K * e_y + e_y_aux = 0 at this configuration.
    pub k: f64,
}

impl GeometricSolution {
    /// Curvature of the guiding axle at the steady configuration, 1/m.
    pub fn kappa(&self) -> f64 {
        1.0 / self.r1
    }

    /// The steady state as a vehicle state (auxiliary error included).
    pub fn equilibrium_state(&self) -> VehicleState {
        match self.kind {
            VehicleKind::Bus => {
                VehicleState::Bus(BusState { e_y: self.e_y, e_psi: 0.0, e_y_bus: self.e_y_aux })
            }
            VehicleKind::TractorTrailer => VehicleState::TractorTrailer(TractorTrailerState {
                e_y: self.e_y,
                e_psi: 0.0,
                beta1: self.beta1.unwrap_or(0.0),
                e_y_tt: self.e_y_aux,
            }),
        }
    }
}

/// Per-sample objective weights along a road.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSchedule {
    pub kind: VehicleKind,
    pub values: Vec<f64>,
}

fn check_bus_radius(r: f64, r1: f64, p: &BusParams) -> Result<(), TuningError> {
    let infeasible = |msg: String| Err(TuningError::GeometryInfeasible { msg });
    if !(r > p.w / 2.0) {
        return infeasible(format!("road radius {r} must exceed half the width {}", p.w / 2.0));
    }
    if !(r1 > p.w / 2.0) {
        return infeasible(format!("turning radius {r1} must exceed half the width {}", p.w / 2.0));
    }
    if r1 < 1.0 / p.kappa_max {
        return infeasible(format!("turning radius {r1} below the minimum {}", 1.0 / p.kappa_max));
    }
    Ok(())
}

/// Turning radius that balances the bus swept width on a road of radius
/// `r_road` (closed form; signed).
pub fn bus_optimal_radius(r_road: f64, p: &BusParams) -> Result<f64, TuningError> {
    let r = r_road.abs();
    let l = p.l1 + p.l1f;
    let r1 = (-(l * l) + 4.0 * r * r + 2.0 * p.w * r) / (4.0 * r + 2.0 * p.w);
    check_bus_radius(r, r1, p)?;
    Ok(r1.copysign(r_road))
}

/// Full balanced-geometry solution for the bus.
pub fn bus_optimal_k(r_road: f64, p: &BusParams) -> Result<GeometricSolution, TuningError> {
    let r = r_road.abs();
    let r1 = bus_optimal_radius(r_road, p)?.abs();
    let l = p.l1 + p.l1f;
    // e_y = r - r1 simplifies exactly; the quotient form avoids cancellation
    // on near-straight roads.
    let e_y = l * l / (4.0 * r + 2.0 * p.w);
    let front_dist = (p.l1 * p.l1 + r1 * r1).sqrt();
    let e_aux = (r * r - p.l1 * p.l1 - r1 * r1) / (r + front_dist);
    if e_y <= 0.0 {
        return Err(TuningError::GeometryInfeasible { msg: "degenerate zero-length vehicle".into() });
    }
    let k = -e_aux / e_y;
    if !(k > 0.0) {
        return Err(TuningError::GeometryInfeasible {
            msg: format!("derived weight {k} is not positive (front overhang too long for this radius)"),
        });
    }
    let sign = r_road.signum();
    Ok(GeometricSolution {
        kind: VehicleKind::Bus,
        r_road,
        r1: sign * r1,
        r2: None,
        r_left: sign * (r1 - p.w / 2.0),
        r_right: sign * ((r1 + p.w / 2.0).powi(2) + l * l).sqrt(),
        e_y: sign * e_y,
        e_y_aux: sign * e_aux,
        beta1: None,
        k,
    })
}

/// Left-hand side of the balanced-width condition for the tractor-trailer:
/// the sum of inner and outer swept radii at tractor radius `r1`.
fn tt_swept_sum(r1: f64, p: &TractorTrailerParams) -> f64 {
    let t = &p.tractor;
    let l = t.l1 + t.l1f;
    let r2sq = r1 * r1 + p.m1 * p.m1 - p.l2 * p.l2;
    r2sq.max(0.0).sqrt() - t.w / 2.0 + ((r1 + t.w / 2.0).powi(2) + l * l).sqrt()
}

fn tt_swept_sum_deriv(r1: f64, p: &TractorTrailerParams) -> f64 {
    let t = &p.tractor;
    let l = t.l1 + t.l1f;
    let r2 = (r1 * r1 + p.m1 * p.m1 - p.l2 * p.l2).max(1e-12).sqrt();
    r1 / r2 + (r1 + t.w / 2.0) / ((r1 + t.w / 2.0).powi(2) + l * l).sqrt()
}

/// Tractor turning radius that balances the tractor-trailer swept width
/// (bracketed bisection with Newton polish; signed).
pub fn tt_optimal_radius(r_road: f64, p: &TractorTrailerParams) -> Result<f64, TuningError> {
    let r = r_road.abs();
    let t = &p.tractor;
    // The lower bracket keeps R2 real and above W/2 and respects the
    // curvature limit; the sum is strictly increasing in R1 beyond it.
    let lo0 = ((p.l2 * p.l2 - p.m1 * p.m1).max(0.0)).sqrt() + t.w / 2.0 + 1e-6;
    let lo0 = lo0.max(1.0 / t.kappa_max);
    let hi0 = 2.0 * r + t.l1 + t.l1f + t.w;
    let target = 2.0 * r;
    if tt_swept_sum(lo0, p) > target {
        return Err(TuningError::GeometryInfeasible {
            msg: format!("road radius {r} too small for this vehicle (no feasible tractor radius)"),
        });
    }
    if tt_swept_sum(hi0, p) < target {
        return Err(TuningError::GeometryInfeasible {
            msg: format!("no bracket: swept sum at {hi0} below 2 * {r}"),
        });
    }
    let mut lo = lo0;
    let mut hi = hi0;
    let mut iters = 0usize;
    while hi - lo > 1e-12 * hi.max(1.0) {
        iters += 1;
        if iters > 200 {
            return Err(TuningError::NoConvergence {
                msg: format!("bisection stalled at [{lo}, {hi}] after {iters} iterations"),
            });
        }
        let mid = 0.5 * (lo + hi);
        if tt_swept_sum(mid, p) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut r1 = 0.5 * (lo + hi);
    for _ in 0..3 {
        let f = tt_swept_sum(r1, p) - target;
        let d = tt_swept_sum_deriv(r1, p);
        let next = r1 - f / d;
        if next > lo0 && next < hi0 {
            r1 = next;
        }
    }
    let residual = (target - tt_swept_sum(r1, p)).abs();
    if residual > 1e-10 {
        return Err(TuningError::NoConvergence { msg: format!("residual {residual} above 1e-10") });
    }
    Ok(r1.copysign(r_road))
}

/// Full balanced-geometry solution for the tractor-trailer, including the
/// circular-equilibrium joint angle.
pub fn tt_optimal_k(r_road: f64, p: &TractorTrailerParams) -> Result<GeometricSolution, TuningError> {
    if p.l2 < 1e-3 {
        return Err(TuningError::GeometryInfeasible {
            msg: format!("trailer length {} below the 1e-3 m support threshold", p.l2),
        });
    }
    let r = r_road.abs();
    let t = &p.tractor;
    let r1 = tt_optimal_radius(r_road, p)?.abs();
    let r2 = (r1 * r1 + p.m1 * p.m1 - p.l2 * p.l2).sqrt();
    let beta1 = (p.m1 / r1).atan() + (p.l2 / r2).atan();
    let e_y = r - r1;
    let e_aux = r - r2;
    if e_y.abs() < 1e-12 || !(e_aux > 0.0) {
        return Err(TuningError::GeometryInfeasible {
            msg: format!("degenerate steady errors e_y = {e_y}, e_y_aux = {e_aux}"),
        });
    }
    let k = -e_aux / e_y;
    if !(k > 0.0) {
        return Err(TuningError::GeometryInfeasible {
            msg: format!("derived weight {k} is not positive (trailer too short for this radius)"),
        });
    }
    let l = t.l1 + t.l1f;
    let sign = r_road.signum();
    Ok(GeometricSolution {
        kind: VehicleKind::TractorTrailer,
        r_road,
        r1: sign * r1,
        r2: Some(sign * r2),
        r_left: sign * (r2 - t.w / 2.0),
        r_right: sign * ((r1 + t.w / 2.0).powi(2) + l * l).sqrt(),
        e_y: sign * e_y,
        e_y_aux: sign * e_aux,
        beta1: Some(sign * beta1),
        k,
    })
}

/// Balanced-geometry solution for either vehicle kind.
pub fn optimal_k(r_road: f64, params: &VehicleParams) -> Result<GeometricSolution, TuningError> {
    match params {
        VehicleParams::Bus(p) => bus_optimal_k(r_road, p),
        VehicleParams::TractorTrailer(p) => tt_optimal_k(r_road, p),
    }
}

/// Per-sample weight schedule: straight samples get [`K_DEFAULT`], curved
/// samples the stationary solution at the local radius.
pub fn k_schedule(road: &RoadPath, params: &VehicleParams) -> Result<KSchedule, TuningError> {
    let mut values = Vec::with_capacity(road.samples().len());
    for (index, smp) in road.samples().iter().enumerate() {
        if smp.kappa.abs() < KAPPA_STRAIGHT {
            values.push(K_DEFAULT);
        } else {
            let sol = optimal_k(1.0 / smp.kappa, params)
                .map_err(|e| TuningError::AtSample { index, source: Box::new(e) })?;
            values.push(sol.k);
        }
    }
    Ok(KSchedule { kind: params.kind(), values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::road::RoadSample;
    use crate::vehicle::spatial_deriv_tt;
    use approx::assert_abs_diff_eq;

    fn bus() -> BusParams {
        BusParams::default_city_bus()
    }

    fn tt() -> TractorTrailerParams {
        TractorTrailerParams::default_semitrailer()
    }

    #[test]
    fn bus_radius_closed_form() {
        // Point vehicle: the formula collapses to the road radius.
        let p = BusParams { l1: 0.0, l1f: 0.0, ..bus() };
        assert_abs_diff_eq!(bus_optimal_radius(8.0, &p).unwrap(), 8.0, epsilon = 1e-12);

        // Zero width: R1 = R - L^2 / (4R).
        let p = BusParams { w: 1e-12, ..bus() };
        let l = p.l1 + p.l1f;
        assert_abs_diff_eq!(
            bus_optimal_radius(8.0, &p).unwrap(),
            8.0 - l * l / 32.0,
            epsilon = 1e-9
        );

        assert_abs_diff_eq!(bus_optimal_radius(8.0, &bus()).unwrap(), 271.0 / 37.0, epsilon = 1e-12);
    }

    #[test]
    fn bus_solution_case() {
        let sol = bus_optimal_k(8.0, &bus()).unwrap();
        assert_abs_diff_eq!(sol.r1, 7.324324324324325, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.e_y, 0.6756756756756754, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.e_y_aux, -0.3454015366481311, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.k, 0.5111942742392342, epsilon = 1e-12);
        // Balanced swept widths.
        assert_abs_diff_eq!(sol.r_road - sol.r_left, sol.r_right - sol.r_road, epsilon = 1e-9);
        // Defining identity.
        assert_abs_diff_eq!(sol.k * sol.e_y + sol.e_y_aux, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn bus_mirror_symmetry() {
        let left = bus_optimal_k(8.0, &bus()).unwrap();
        let right = bus_optimal_k(-8.0, &bus()).unwrap();
        assert_abs_diff_eq!(left.k, right.k, epsilon = 0.0);
        assert_abs_diff_eq!(left.e_y, -right.e_y, epsilon = 0.0);
        assert_abs_diff_eq!(left.e_y_aux, -right.e_y_aux, epsilon = 0.0);
        assert_abs_diff_eq!(left.r_right, -right.r_right, epsilon = 0.0);
    }

    #[test]
    fn bus_identity_random_draws() {
        let mut seed = 7u64;
        let mut rnd = move |lo: f64, hi: f64| {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            lo + (hi - lo) * ((seed >> 11) as f64 / (1u64 << 53) as f64)
        };
        let mut tried = 0;
        for _ in 0..100 {
            let p = BusParams {
                l1: rnd(2.0, 7.0),
                l1f: rnd(0.0, 1.5),
                l1r: 1.0,
                w: rnd(2.0, 2.6),
                kappa_max: 0.25,
                kappa_rate_max: 0.05,
            };
            let r = rnd(6.0, 60.0);
            if let Ok(sol) = bus_optimal_k(r, &p) {
                tried += 1;
                assert_abs_diff_eq!(sol.k * sol.e_y + sol.e_y_aux, 0.0, epsilon = 1e-12);
                assert_abs_diff_eq!(sol.r_road - sol.r_left, sol.r_right - sol.r_road, epsilon = 1e-9);
            }
        }
        assert!(tried > 60, "too few feasible draws: {tried}");
    }

    #[test]
    fn bus_infeasible_radius() {
        assert!(matches!(bus_optimal_radius(2.0, &bus()), Err(TuningError::GeometryInfeasible { .. })));
        assert!(matches!(bus_optimal_radius(1.0, &bus()), Err(TuningError::GeometryInfeasible { .. })));
    }

    #[test]
    fn tt_radius_degenerate_collapse() {
        // L2 = |M1|, zero vehicle length and width: the swept sum is 2 R1.
        let p = TractorTrailerParams {
            tractor: BusParams { l1: 1e-9, l1f: 0.0, l1r: 0.0, w: 1e-9, kappa_max: 1.0, kappa_rate_max: 1.0 },
            l2: 0.3,
            l2r: 0.0,
            m1: 0.3,
            w_trailer: 1e-9,
        };
        assert_abs_diff_eq!(tt_optimal_radius(12.0, &p).unwrap(), 12.0, epsilon = 1e-9);
    }

    #[test]
    fn tt_radius_case() {
        let r1 = tt_optimal_radius(12.0, &tt()).unwrap();
        assert_abs_diff_eq!(r1, 12.588339306683036, epsilon = 1e-9);
        assert!((2.0 * 12.0 - tt_swept_sum(r1, &tt())).abs() < 1e-10);
    }

    #[test]
    fn tt_swept_sum_monotone() {
        let mut seed = 99u64;
        let mut rnd = move |lo: f64, hi: f64| {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            lo + (hi - lo) * ((seed >> 11) as f64 / (1u64 << 53) as f64)
        };
        for _ in 0..100 {
            let p = TractorTrailerParams {
                tractor: BusParams {
                    l1: rnd(3.0, 5.0),
                    l1f: rnd(0.5, 1.5),
                    l1r: 0.8,
                    w: rnd(2.2, 2.6),
                    kappa_max: 0.2,
                    kappa_rate_max: 0.05,
                },
                l2: rnd(4.0, 9.0),
                l2r: 1.0,
                m1: rnd(-0.8, 0.8),
                w_trailer: 2.5,
            };
            let lo = ((p.l2 * p.l2 - p.m1 * p.m1).max(0.0)).sqrt() + p.tractor.w / 2.0 + 1e-6;
            let r1 = lo + rnd(0.1, 30.0);
            assert!(tt_swept_sum(r1 + 1.0, &p) > tt_swept_sum(r1, &p));
        }
    }

    #[test]
    fn tt_solution_case() {
        let sol = tt_optimal_k(12.0, &tt()).unwrap();
        assert_abs_diff_eq!(sol.r1, 12.588339306683036, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.r2.unwrap(), 10.46691389570876, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.beta1.unwrap(), 0.565633047682009, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.e_y, -0.5883393066830358, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.e_y_aux, 1.5330861042912396, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.k, 2.6057856187351094, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.k * sol.e_y + sol.e_y_aux, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.r_road - sol.r_left, sol.r_right - sol.r_road, epsilon = 1e-8);
    }

    #[test]
    fn tt_equilibrium_zeroes_joint_rate() {
        for r_road in [9.0, 12.0, 20.0, -15.0] {
            let p = tt();
            let sol = tt_optimal_k(r_road, &p).unwrap();
            let st = TractorTrailerState {
                e_y: sol.e_y,
                e_psi: 0.0,
                beta1: sol.beta1.unwrap(),
                e_y_tt: sol.e_y_aux,
            };
            let kappa_gamma = 1.0 / r_road;
            let (_, dpsi, dbeta) = spatial_deriv_tt(&st, sol.kappa(), kappa_gamma, &p).unwrap();
            assert_abs_diff_eq!(dbeta, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(dpsi, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn tt_degenerate_trailer_rejected() {
        let mut p = tt();
        p.l2 = 5e-4;
        p.m1 = 0.0;
        assert!(matches!(tt_optimal_k(12.0, &p), Err(TuningError::GeometryInfeasible { .. })));
    }

    #[test]
    fn limits_at_huge_radius() {
        let bus_sol = bus_optimal_k(1e6, &bus()).unwrap();
        assert!(bus_sol.e_y.abs() < 1e-5);
        assert!(bus_sol.e_y_aux.abs() < 1e-5);
        assert!(bus_sol.k > 0.0 && bus_sol.k.is_finite());

        let tt_sol = tt_optimal_k(1e6, &tt()).unwrap();
        assert!(tt_sol.e_y.abs() < 1e-4);
        assert!(tt_sol.e_y_aux.abs() < 1e-4);
        assert!(tt_sol.k > 0.0 && tt_sol.k.is_finite());
        assert!(tt_sol.beta1.unwrap().abs() < 1e-4);
    }

    fn road_from_kappas(kappas: &[f64], ds: f64) -> RoadPath {
        let samples = kappas
            .iter()
            .enumerate()
            .map(|(i, &k)| RoadSample { s: i as f64 * ds, kappa: k, w_left: 3.5, w_right: 3.5 })
            .collect();
        RoadPath::new(samples, None).unwrap()
    }

    #[test]
    fn schedule_straight_and_ring() {
        let params = VehicleParams::Bus(bus());
        let road = road_from_kappas(&vec![0.0; 21], 0.5);
        let sched = k_schedule(&road, &params).unwrap();
        assert!(sched.values.iter().all(|&k| k == K_DEFAULT));

        let road = road_from_kappas(&vec![0.125; 21], 0.5);
        let sched = k_schedule(&road, &params).unwrap();
        let single = bus_optimal_k(8.0, &bus()).unwrap().k;
        assert!(sched.values.iter().all(|&k| (k - single).abs() < 1e-12));
    }

    #[test]
    fn schedule_monotone_on_clothoid() {
        // Curvature ramps 0 -> 1/10 over 30 m, holds, and ramps back down.
        let ds = 0.5;
        let ramp = 60usize;
        let hold = 40usize;
        let mut kappas = Vec::new();
        for i in 0..=ramp {
            kappas.push(0.1 * i as f64 / ramp as f64);
        }
        for _ in 0..hold {
            kappas.push(0.1);
        }
        for i in (0..ramp).rev() {
            kappas.push(0.1 * i as f64 / ramp as f64);
        }
        let road = road_from_kappas(&kappas, ds);
        let params = VehicleParams::Bus(bus());
        let sched = k_schedule(&road, &params).unwrap();
        // K grows with curvature along the entry ramp (ignoring the straight
        // default ahead of the threshold).
        let entry: Vec<f64> = (0..=ramp)
            .filter(|&i| kappas[i] >= KAPPA_STRAIGHT)
            .map(|i| sched.values[i])
            .collect();
        for w in entry.windows(2) {
            assert!(w[1] > w[0] - 1e-12, "schedule not monotone on the clothoid: {} -> {}", w[0], w[1]);
        }

        let infeasible = road_from_kappas(&[0.0, 0.5, 0.5], 0.5);
        match k_schedule(&infeasible, &params) {
            Err(TuningError::AtSample { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected per-sample failure, got {other:?}"),
        }
    }
}
