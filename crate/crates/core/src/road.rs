//! Reference path representation and geometry.
//!
//! A road is a uniformly sampled curvature profile `kappa_gamma(s)` over arc
//! length `s`, with per-sample lane half-widths. Global (x, y, heading) poses
//! are reconstructed by integrating the curvature from an anchor pose, and
//! arbitrary points can be projected back onto the path to recover their arc
//! length and signed lateral offset (positive to the left of the tangent).

use serde::{Deserialize, Serialize};
use std::io::Read;

/// Default lane half-width used when an input file omits the width columns.
pub const DEFAULT_HALF_WIDTH: f64 = 1.75;

/// Sanity bound on |kappa_gamma| accepted by validation, 1/m.
pub const DEFAULT_MAX_CURVATURE: f64 = 1.0;

/// Sub-steps per sample interval used by the global reconstruction.
pub const DEFAULT_SUBSTEPS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum RoadError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error at sample {index}: {msg}")]
    Validation { index: usize, msg: String },
    #[error("arc length {s} outside [0, {max}]")]
    OutOfRange { s: f64, max: f64 },
    #[error("projection diverged near s = {hint}: {msg}")]
    ProjectionDiverged { hint: f64, msg: String },
}

/// One sample of the reference path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadSample {
    /// Arc length, m.
    pub s: f64,
    /// Signed curvature, 1/m; positive bends left.
    pub kappa: f64,
    /// Lane half-width to the left of center, m.
    #[serde(default = "default_half_width")]
    pub w_left: f64,
    /// Lane half-width to the right of center, m.
    #[serde(default = "default_half_width")]
    pub w_right: f64,
}

fn default_half_width() -> f64 {
    DEFAULT_HALF_WIDTH
}

/// A global pose; heading is normalized to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl GlobalPose {
    pub fn origin() -> Self {
        GlobalPose { x: 0.0, y: 0.0, heading: 0.0 }
    }
}

/// Normalize an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Uniformly sampled reference path (lane center).
#[derive(Debug, Clone, PartialEq)]
pub struct RoadPath {
    samples: Vec<RoadSample>,
    delta_s: f64,
    anchor: GlobalPose,
}

impl RoadPath {
    /// Builds a validated path. `s` values must form the exact uniform grid
    /// `i * delta_s` starting at zero.
    pub fn new(samples: Vec<RoadSample>, anchor: Option<GlobalPose>) -> Result<Self, RoadError> {
        Self::with_curvature_limit(samples, anchor, DEFAULT_MAX_CURVATURE)
    }

    pub fn with_curvature_limit(
        samples: Vec<RoadSample>,
        anchor: Option<GlobalPose>,
        max_abs_kappa: f64,
    ) -> Result<Self, RoadError> {
        if samples.len() < 2 {
            return Err(RoadError::Validation {
                index: 0,
                msg: format!("need at least 2 samples, got {}", samples.len()),
            });
        }
        if samples[0].s != 0.0 {
            return Err(RoadError::Validation {
                index: 0,
                msg: format!("first sample must be at s = 0, got {}", samples[0].s),
            });
        }
        let delta_s = samples[1].s - samples[0].s;
        if !(delta_s > 0.0) || !delta_s.is_finite() {
            return Err(RoadError::Validation {
                index: 1,
                msg: format!("sampling step must be positive, got {delta_s}"),
            });
        }
        let tol = 1e-9 * (1.0 + samples.last().unwrap().s.abs());
        for (i, smp) in samples.iter().enumerate() {
            if (smp.s - i as f64 * delta_s).abs() > tol {
                return Err(RoadError::Validation {
                    index: i,
                    msg: format!(
                        "non-uniform grid: s = {} but expected {}",
                        smp.s,
                        i as f64 * delta_s
                    ),
                });
            }
            if !smp.kappa.is_finite() || smp.kappa.abs() > max_abs_kappa {
                return Err(RoadError::Validation {
                    index: i,
                    msg: format!("curvature {} exceeds |kappa| <= {max_abs_kappa}", smp.kappa),
                });
            }
            if !(smp.w_left > 0.0) || !(smp.w_right > 0.0) {
                return Err(RoadError::Validation {
                    index: i,
                    msg: format!("half-widths must be positive, got ({}, {})", smp.w_left, smp.w_right),
                });
            }
        }
        let anchor = anchor.unwrap_or_else(GlobalPose::origin);
        Ok(RoadPath { samples, delta_s, anchor })
    }

    pub fn samples(&self) -> &[RoadSample] {
        &self.samples
    }

    pub fn delta_s(&self) -> f64 {
        self.delta_s
    }

    pub fn anchor(&self) -> GlobalPose {
        self.anchor
    }

    /// Number of intervals N; samples run 0..=N.
    pub fn n_steps(&self) -> usize {
        self.samples.len() - 1
    }

    pub fn length(&self) -> f64 {
        self.delta_s * self.n_steps() as f64
    }

    pub fn max_half_width(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.w_left.max(s.w_right))
            .fold(0.0, f64::max)
    }

    /// Piecewise-linear curvature, exact at grid points.
    pub fn curvature_at(&self, s: f64) -> Result<f64, RoadError> {
        let max = self.length();
        if s < -1e-12 || s > max + 1e-12 {
            return Err(RoadError::OutOfRange { s, max });
        }
        let s = s.clamp(0.0, max);
        let t = s / self.delta_s;
        let i = (t.floor() as usize).min(self.samples.len() - 2);
        let frac = t - i as f64;
        let k0 = self.samples[i].kappa;
        let k1 = self.samples[i + 1].kappa;
        Ok(k0 + frac * (k1 - k0))
    }

    /// Linearly interpolated half-widths (left, right) at arc length `s`.
    pub fn half_widths_at(&self, s: f64) -> Result<(f64, f64), RoadError> {
        let max = self.length();
        if s < -1e-12 || s > max + 1e-12 {
            return Err(RoadError::OutOfRange { s, max });
        }
        let s = s.clamp(0.0, max);
        let t = s / self.delta_s;
        let i = (t.floor() as usize).min(self.samples.len() - 2);
        let frac = t - i as f64;
        let a = &self.samples[i];
        let b = &self.samples[i + 1];
        Ok((
            a.w_left + frac * (b.w_left - a.w_left),
            a.w_right + frac * (b.w_right - a.w_right),
        ))
    }
}

/// Reads a road from CSV (`s,kappa[,w_left[,w_right]]` header) or JSON.
pub fn load_road(reader: impl Read, format: RoadFormat) -> Result<RoadPath, RoadError> {
    match format {
        RoadFormat::Csv => load_csv(reader),
        RoadFormat::Json => load_json(reader),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoadFormat {
    Csv,
    Json,
}

fn load_csv(reader: impl Read) -> Result<RoadPath, RoadError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| RoadError::Parse { line: 1, msg: e.to_string() })?
        .clone();
    let expect = ["s", "kappa", "w_left", "w_right"];
    if headers.len() < 2 || headers.len() > 4 {
        return Err(RoadError::Parse {
            line: 1,
            msg: format!("expected header s,kappa[,w_left[,w_right]], got {headers:?}"),
        });
    }
    for (i, h) in headers.iter().enumerate() {
        if h != expect[i] {
            return Err(RoadError::Parse {
                line: 1,
                msg: format!("unexpected column {i}: {h:?} (want {:?})", expect[i]),
            });
        }
    }
    let mut samples = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| RoadError::Parse { line, msg: e.to_string() })?;
        let field = |idx: usize| -> Result<Option<f64>, RoadError> {
            match rec.get(idx) {
                None | Some("") => Ok(None),
                Some(v) => v
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|e| RoadError::Parse { line, msg: format!("column {idx}: {e}") }),
            }
        };
        let s = field(0)?.ok_or(RoadError::Parse { line, msg: "missing s".into() })?;
        let kappa = field(1)?.ok_or(RoadError::Parse { line, msg: "missing kappa".into() })?;
        let w_left = field(2)?.unwrap_or(DEFAULT_HALF_WIDTH);
        let w_right = field(3)?.unwrap_or(DEFAULT_HALF_WIDTH);
        samples.push(RoadSample { s, kappa, w_left, w_right });
    }
    RoadPath::new(samples, None)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RoadJson {
    delta_s: f64,
    #[serde(default)]
    anchor: Option<[f64; 3]>,
    samples: Vec<RoadSample>,
}

fn load_json(reader: impl Read) -> Result<RoadPath, RoadError> {
    let doc: RoadJson =
        serde_json::from_reader(reader).map_err(|e| RoadError::Parse { line: e.line(), msg: e.to_string() })?;
    let anchor = doc.anchor.map(|[x, y, heading]| GlobalPose { x, y, heading });
    let path = RoadPath::new(doc.samples, anchor)?;
    if (path.delta_s() - doc.delta_s).abs() > 1e-9 * (1.0 + doc.delta_s.abs()) {
        return Err(RoadError::Validation {
            index: 1,
            msg: format!("declared delta_s {} does not match sample grid {}", doc.delta_s, path.delta_s()),
        });
    }
    Ok(path)
}

/// Densified global geometry of a road, integrated from the anchor.
///
/// Headings are the exact integral of the piecewise-linear curvature;
/// positions use midpoint-rule sub-steps (second order in the sub-step).
#[derive(Debug, Clone)]
pub struct GlobalPath {
    substeps: usize,
    h: f64,
    delta_s: f64,
    s_max: f64,
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Unnormalized headings at dense nodes.
    thetas: Vec<f64>,
    /// Curvature at sample grid points, for exact in-interval heading integrals.
    kappas: Vec<f64>,
    guard_dist: f64,
}

impl GlobalPath {
    pub fn new(road: &RoadPath) -> Self {
        Self::with_substeps(road, DEFAULT_SUBSTEPS)
    }

    pub fn with_substeps(road: &RoadPath, substeps: usize) -> Self {
        assert!(substeps >= 1);
        let n = road.n_steps();
        let ds = road.delta_s();
        let h = ds / substeps as f64;
        let mut xs = Vec::with_capacity(n * substeps + 1);
        let mut ys = Vec::with_capacity(n * substeps + 1);
        let mut thetas = Vec::with_capacity(n * substeps + 1);
        let anchor = road.anchor();
        xs.push(anchor.x);
        ys.push(anchor.y);
        thetas.push(anchor.heading);
        let kappas: Vec<f64> = road.samples().iter().map(|s| s.kappa).collect();
        for i in 0..n {
            let k0 = kappas[i];
            let dk = (kappas[i + 1] - k0) / ds;
            let theta_i = thetas[i * substeps];
            for j in 0..substeps {
                let sig0 = j as f64 * h;
                let sig1 = sig0 + h;
                let sig_mid = sig0 + 0.5 * h;
                // theta(sigma) = theta_i + k0*sigma + dk*sigma^2/2 (exact)
                let theta_mid = theta_i + k0 * sig_mid + 0.5 * dk * sig_mid * sig_mid;
                let theta_end = theta_i + k0 * sig1 + 0.5 * dk * sig1 * sig1;
                let x = *xs.last().unwrap() + h * theta_mid.cos();
                let y = *ys.last().unwrap() + h * theta_mid.sin();
                xs.push(x);
                ys.push(y);
                thetas.push(theta_end);
            }
        }
        GlobalPath {
            substeps,
            h,
            delta_s: ds,
            s_max: road.length(),
            xs,
            ys,
            thetas,
            kappas,
            guard_dist: road.max_half_width() + 50.0,
        }
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    /// Exact integrated heading (unnormalized) at arc length `s`.
    pub fn theta_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.s_max);
        let t = s / self.delta_s;
        let i = (t.floor() as usize).min(self.kappas.len() - 2);
        let sig = s - i as f64 * self.delta_s;
        let k0 = self.kappas[i];
        let dk = (self.kappas[i + 1] - k0) / self.delta_s;
        self.thetas[i * self.substeps] + k0 * sig + 0.5 * dk * sig * sig
    }

    pub fn kappa_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.s_max);
        let t = s / self.delta_s;
        let i = (t.floor() as usize).min(self.kappas.len() - 2);
        let frac = t - i as f64;
        self.kappas[i] + frac * (self.kappas[i + 1] - self.kappas[i])
    }

    /// Centerline point at arc length `s` (clamped to the domain).
    pub fn point_at(&self, s: f64) -> (f64, f64) {
        let s = s.clamp(0.0, self.s_max);
        let k = ((s / self.h).floor() as usize).min(self.xs.len() - 1);
        let r = s - k as f64 * self.h;
        if r <= 0.0 {
            return (self.xs[k], self.ys[k]);
        }
        let theta_mid = self.theta_at(k as f64 * self.h + 0.5 * r);
        (self.xs[k] + r * theta_mid.cos(), self.ys[k] + r * theta_mid.sin())
    }

    pub fn pose_at(&self, s: f64) -> GlobalPose {
        let (x, y) = self.point_at(s);
        GlobalPose { x, y, heading: normalize_angle(self.theta_at(s)) }
    }

    /// Left unit normal at arc length `s`.
    pub fn normal_at(&self, s: f64) -> (f64, f64) {
        let th = self.theta_at(s);
        (-th.sin(), th.cos())
    }

    /// Offsets a centerline point laterally: positive `d` to the left.
    pub fn offset_point(&self, s: f64, d: f64) -> (f64, f64) {
        let (x, y) = self.point_at(s);
        let (nx, ny) = self.normal_at(s);
        (x + d * nx, y + d * ny)
    }
}

/// Per-sample global poses of the road (`reconstruct_global`).
pub fn reconstruct_global(road: &RoadPath) -> Vec<GlobalPose> {
    let gp = GlobalPath::new(road);
    (0..=road.n_steps())
        .map(|i| gp.pose_at(i as f64 * road.delta_s()))
        .collect()
}

/// Result of projecting a point onto the path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length of the closest path point near the hint, m.
    pub s: f64,
    /// Signed lateral offset, positive to the left of the tangent, m.
    pub lateral: f64,
}

const MAX_WINDOW_SLIDES: usize = 200;

/// Projects `p` onto the path by locally minimizing the squared distance in a
/// window of +-2 sample steps around `hint_s`. The window slides toward the
/// minimizer when it lands on a window edge; projection fails if it keeps
/// sliding or the point is farther than the guard distance from the path.
pub fn project_point(
    road: &RoadPath,
    globals: &GlobalPath,
    p: (f64, f64),
    hint_s: f64,
) -> Result<Projection, RoadError> {
    let half_window = 2.0 * road.delta_s();
    let smax = globals.s_max();
    let mut center = hint_s.clamp(0.0, smax);

    let fprime = |s: f64| -> f64 {
        let (x, y) = globals.point_at(s);
        let th = globals.theta_at(s);
        (x - p.0) * th.cos() + (y - p.1) * th.sin()
    };
    let fsecond = |s: f64| -> f64 {
        let (x, y) = globals.point_at(s);
        let th = globals.theta_at(s);
        let k = globals.kappa_at(s);
        1.0 + k * ((x - p.0) * (-th.sin()) + (y - p.1) * th.cos())
    };
    let dist2 = |s: f64| -> f64 {
        let (x, y) = globals.point_at(s);
        (x - p.0).powi(2) + (y - p.1).powi(2)
    };

    // Fast path: safeguarded Newton from the hint. Accepted only when it
    // converges to an interior stationary point of the current window.
    let newton = |lo: f64, hi: f64, start: f64| -> Option<f64> {
        let mut s = start;
        for _ in 0..30 {
            let g = fprime(s);
            if g.abs() < 1e-12 {
                return Some(s);
            }
            let h = fsecond(s);
            if h <= 1e-9 {
                return None;
            }
            let next = s - g / h;
            if next < lo || next > hi {
                return None;
            }
            if (next - s).abs() < 1e-13 {
                return Some(next);
            }
            s = next;
        }
        None
    };

    for _ in 0..MAX_WINDOW_SLIDES {
        let lo = (center - half_window).max(0.0);
        let hi = (center + half_window).min(smax);
        if let Some(s) = newton(lo, hi, center.clamp(lo, hi)) {
            return finish_projection(globals, p, s);
        }
        // Coarse scan for a bracketing minimum inside the window.
        const SCAN: usize = 16;
        let mut best_i = 0;
        let mut best_v = f64::INFINITY;
        for i in 0..=SCAN {
            let s = lo + (hi - lo) * i as f64 / SCAN as f64;
            let v = dist2(s);
            if v < best_v {
                best_v = v;
                best_i = i;
            }
        }
        let step = (hi - lo) / SCAN as f64;
        if best_i == 0 && lo > 0.0 {
            center = (lo - half_window).max(0.0) + half_window;
            continue;
        }
        if best_i == SCAN && hi < smax {
            center = (hi + half_window).min(smax) - half_window;
            continue;
        }
        // Golden-section refine, then polish with Newton.
        let mut a = lo + step * (best_i.saturating_sub(1)) as f64;
        let mut b = (lo + step * (best_i + 1) as f64).min(hi);
        let phi = 0.5 * (3.0 - 5.0_f64.sqrt());
        let mut c = a + phi * (b - a);
        let mut d = b - phi * (b - a);
        let mut fc = dist2(c);
        let mut fd = dist2(d);
        for _ in 0..60 {
            if b - a < 1e-11 {
                break;
            }
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = a + phi * (b - a);
                fc = dist2(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = b - phi * (b - a);
                fd = dist2(d);
            }
        }
        let s = 0.5 * (a + b);
        let s = newton(lo, hi, s).unwrap_or(s);
        return finish_projection(globals, p, s);
    }
    Err(RoadError::ProjectionDiverged {
        hint: hint_s,
        msg: "no local minimum found; window kept sliding".into(),
    })
}

fn finish_projection(globals: &GlobalPath, p: (f64, f64), s: f64) -> Result<Projection, RoadError> {
    let (x, y) = globals.point_at(s);
    let (nx, ny) = globals.normal_at(s);
    let lateral = (p.0 - x) * nx + (p.1 - y) * ny;
    let dist = ((p.0 - x).powi(2) + (p.1 - y).powi(2)).sqrt();
    if dist > globals.guard_dist {
        return Err(RoadError::ProjectionDiverged {
            hint: s,
            msg: format!("point is {dist:.1} m from the path (guard {:.1} m)", globals.guard_dist),
        });
    }
    Ok(Projection { s, lateral })
}
