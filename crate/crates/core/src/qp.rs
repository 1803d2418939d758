//! Sparse convex QP solver.
//!
//! Solves `min 0.5 x'Px + q'x  s.t.  l <= Ax <= u` with an operator-splitting
//! (ADMM) scheme over the sparse problem, followed by an active-set polish
//! that re-solves the KKT system of the detected active constraints. The
//! planning QPs are multiple-shooting problems whose coupling is local in
//! the horizon, so every linear solve uses a banded LDL' factorization; the
//! KKT unknowns are interleaved by stage to keep the bandwidth small.
//!
//! The solver is deterministic: identical problems and settings produce
//! bit-identical solutions.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum QpError {
    #[error("invalid problem: {msg}")]
    Invalid { msg: String },
    #[error("problem detected {} infeasible", if *dual { "dual" } else { "primal" })]
    InfeasibleDetected { dual: bool },
    #[error("linear solve failed: {msg}")]
    Factorization { msg: String },
}

/// Row-major sparse matrix; rows hold (column, value) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        SparseMatrix { nrows, ncols, rows: vec![Vec::new(); nrows] }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.rows[r]
    }

    /// Adds `v` to entry (r, c), merging with an existing entry.
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        assert!(r < self.nrows && c < self.ncols);
        if v == 0.0 {
            return;
        }
        if let Some(e) = self.rows[r].iter_mut().find(|(cc, _)| *cc == c) {
            e.1 += v;
        } else {
            self.rows[r].push((c, v));
        }
    }

    pub fn from_dense(d: &[Vec<f64>]) -> Self {
        let nrows = d.len();
        let ncols = d.first().map_or(0, |r| r.len());
        let mut m = SparseMatrix::zeros(nrows, ncols);
        for (i, row) in d.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    m.rows[i].push((j, v));
                }
            }
        }
        m
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(out.len(), self.nrows);
        for (r, row) in self.rows.iter().enumerate() {
            let mut acc = 0.0;
            for &(c, v) in row {
                acc += v * x[c];
            }
            out[r] = acc;
        }
    }

    pub fn t_matvec(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.nrows);
        debug_assert_eq!(out.len(), self.ncols);
        out.fill(0.0);
        for (r, row) in self.rows.iter().enumerate() {
            let w = y[r];
            if w != 0.0 {
                for &(c, v) in row {
                    out[c] += v * w;
                }
            }
        }
    }
}

/// `min 0.5 x'Px + q'x  s.t.  l <= Ax <= u`; `P` must be symmetric positive
/// semidefinite with both triangles stored.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p: SparseMatrix,
    pub q: Vec<f64>,
    pub a: SparseMatrix,
    pub l: Vec<f64>,
    pub u: Vec<f64>,
}

impl QpProblem {
    pub fn new(p: SparseMatrix, q: Vec<f64>, a: SparseMatrix, l: Vec<f64>, u: Vec<f64>) -> Result<Self, QpError> {
        let n = q.len();
        let m = l.len();
        if p.nrows() != n || p.ncols() != n {
            return Err(QpError::Invalid { msg: format!("P is {}x{}, expected {n}x{n}", p.nrows(), p.ncols()) });
        }
        if a.nrows() != m || a.ncols() != n {
            return Err(QpError::Invalid { msg: format!("A is {}x{}, expected {m}x{n}", a.nrows(), a.ncols()) });
        }
        if u.len() != m {
            return Err(QpError::Invalid { msg: "l and u length mismatch".into() });
        }
        for i in 0..m {
            if l[i] > u[i] {
                return Err(QpError::Invalid { msg: format!("row {i}: l = {} > u = {}", l[i], u[i]) });
            }
            if l[i].is_nan() || u[i].is_nan() {
                return Err(QpError::Invalid { msg: format!("row {i}: NaN bound") });
            }
        }
        Ok(QpProblem { p, q, a, l, u })
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn m(&self) -> usize {
        self.l.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut px = vec![0.0; self.n()];
        self.p.matvec(x, &mut px);
        0.5 * dot(&px, x) + dot(&self.q, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub rho: f64,
    pub check_interval: usize,
    pub adapt_interval: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            max_iter: 4000,
            sigma: 1e-6,
            alpha: 1.6,
            rho: 0.1,
            check_interval: 10,
            adapt_interval: 50,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    /// The iteration cap was reached; the best iterate is returned.
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Dual variables of the rows of A (positive when the upper bound binds).
    pub y: Vec<f64>,
    /// Projected row values z = clamp(Ax).
    pub z: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub prim_res: f64,
    pub dual_res: f64,
    pub polished: bool,
    pub objective: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Symmetric banded matrix in lower storage: `band[i][d] = M[i][i - d]`.
struct BandMatrix {
    n: usize,
    hb: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    fn zeros(n: usize, hb: usize) -> Self {
        BandMatrix { n, hb, data: vec![0.0; n * (hb + 1)] }
    }

    #[inline]
    fn idx(&self, i: usize, d: usize) -> usize {
        i * (self.hb + 1) + d
    }

    /// Adds `v` to M[i][j] (lower triangle; callers pass i >= j).
    fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i >= j && i - j <= self.hb);
        let d = i - j;
        let at = self.idx(i, d);
        self.data[at] += v;
    }

    /// In-place LDL' factorization without pivoting. Valid for symmetric
    /// positive definite and quasi-definite matrices.
    fn factor_ldl(&mut self) -> Result<(), QpError> {
        let hb = self.hb;
        for i in 0..self.n {
            let k_lo = i.saturating_sub(hb);
            for j in k_lo..=i {
                let mut sum = self.data[self.idx(i, i - j)];
                let kk_lo = k_lo.max(j.saturating_sub(hb));
                for k in kk_lo..j {
                    let lik = self.data[self.idx(i, i - k)];
                    let ljk = self.data[self.idx(j, j - k)];
                    let dk = self.data[self.idx(k, 0)];
                    sum -= lik * ljk * dk;
                }
                if j < i {
                    let dj = self.data[self.idx(j, 0)];
                    if dj.abs() < 1e-300 {
                        return Err(QpError::Factorization { msg: format!("zero pivot at column {j}") });
                    }
                    let at = self.idx(i, i - j);
                    self.data[at] = sum / dj;
                } else {
                    if sum.abs() < 1e-300 {
                        return Err(QpError::Factorization { msg: format!("zero pivot at column {i}") });
                    }
                    let at = self.idx(i, 0);
                    self.data[at] = sum;
                }
            }
        }
        Ok(())
    }

    /// Solves M x = b using the LDL' factors (factor_ldl must have run).
    fn solve(&self, b: &mut [f64]) {
        let hb = self.hb;
        for i in 0..self.n {
            let k_lo = i.saturating_sub(hb);
            let mut sum = b[i];
            for k in k_lo..i {
                sum -= self.data[self.idx(i, i - k)] * b[k];
            }
            b[i] = sum;
        }
        for i in 0..self.n {
            b[i] /= self.data[self.idx(i, 0)];
        }
        for i in (0..self.n).rev() {
            let k_hi = (i + hb).min(self.n - 1);
            let mut sum = b[i];
            for k in (i + 1)..=k_hi {
                sum -= self.data[self.idx(k, k - i)] * b[k];
            }
            b[i] = sum;
        }
    }
}

fn row_rho(base: f64, eq: bool) -> f64 {
    if eq {
        (base * 1e3).clamp(1e-6, 1e6)
    } else {
        base.clamp(1e-6, 1e6)
    }
}

/// Builds `M = P + sigma I + A' diag(rho) A` in banded storage.
fn build_admm_matrix(prob: &QpProblem, sigma: f64, rho_vec: &[f64]) -> Result<BandMatrix, QpError> {
    let n = prob.n();
    let mut hb = 0usize;
    for r in 0..n {
        for &(c, _) in prob.p.row(r) {
            hb = hb.max(r.abs_diff(c));
        }
    }
    for r in 0..prob.m() {
        let row = prob.a.row(r);
        if let (Some(min), Some(max)) = (row.iter().map(|e| e.0).min(), row.iter().map(|e| e.0).max()) {
            hb = hb.max(max - min);
        }
    }
    let mut m = BandMatrix::zeros(n, hb);
    for i in 0..n {
        m.add(i, i, sigma);
        for &(j, v) in prob.p.row(i) {
            if i >= j {
                m.add(i, j, v);
            }
        }
    }
    for r in 0..prob.m() {
        let row = prob.a.row(r);
        let rho = rho_vec[r];
        for (ei, &(ci, vi)) in row.iter().enumerate() {
            for &(cj, vj) in &row[ei..] {
                let (hi, lo) = if ci >= cj { (ci, cj) } else { (cj, ci) };
                m.add(hi, lo, rho * vi * vj);
            }
        }
    }
    m.factor_ldl()?;
    Ok(m)
}

pub fn solve_qp(prob: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    solve_qp_warm(prob, settings, None)
}

/// Ruiz equilibration factors: `x = d .* x_scaled`, `y = (e .* y_scaled)/c`.
struct Scaling {
    d: Vec<f64>,
    e: Vec<f64>,
    c: f64,
}

const RUIZ_ITERS: usize = 3;
const SCALE_MIN: f64 = 1e-4;
const SCALE_MAX: f64 = 1e4;

/// Scales the problem so that the stacked [P A'; A 0] columns have unit
/// infinity norm, plus a cost normalization. Returns the scaled problem and
/// the accumulated factors.
fn ruiz_equilibrate(prob: &QpProblem) -> (QpProblem, Scaling) {
    let n = prob.n();
    let m = prob.m();
    let mut scaled = prob.clone();
    let mut d = vec![1.0; n];
    let mut e = vec![1.0; m];
    let mut c = 1.0;

    for _ in 0..RUIZ_ITERS {
        // Column norms over the stacked [P; A] block. P is symmetric, so its
        // column norms equal its row norms.
        let mut col = vec![0.0_f64; n];
        for r in 0..n {
            for &(j, v) in scaled.p.row(r) {
                col[j] = col[j].max(v.abs());
            }
        }
        for r in 0..m {
            for &(j, v) in scaled.a.row(r) {
                col[j] = col[j].max(v.abs());
            }
        }
        let delta: Vec<f64> = col
            .iter()
            .map(|&v| (1.0 / v.max(1e-12).sqrt()).clamp(SCALE_MIN, SCALE_MAX))
            .collect();
        let mut row_norm = vec![0.0_f64; m];
        for r in 0..m {
            for &(j, v) in scaled.a.row(r) {
                row_norm[r] = row_norm[r].max((v * delta[j]).abs());
            }
        }
        let rho: Vec<f64> = row_norm
            .iter()
            .map(|&v| (1.0 / v.max(1e-12).sqrt()).clamp(SCALE_MIN, SCALE_MAX))
            .collect();

        for r in 0..n {
            for entry in &mut scaled.p.rows[r] {
                entry.1 *= delta[r] * delta[entry.0];
            }
            scaled.q[r] *= delta[r];
        }
        for r in 0..m {
            for entry in &mut scaled.a.rows[r] {
                entry.1 *= rho[r] * delta[entry.0];
            }
        }
        for j in 0..n {
            d[j] *= delta[j];
        }
        for r in 0..m {
            e[r] *= rho[r];
        }

        // Cost normalization toward unit scale.
        let mut p_col_sum = 0.0;
        for r in 0..n {
            let mut cmax = 0.0_f64;
            for &(_, v) in scaled.p.row(r) {
                cmax = cmax.max(v.abs());
            }
            p_col_sum += cmax;
        }
        let p_mean = p_col_sum / n as f64;
        let gamma = (1.0 / p_mean.max(norm_inf(&scaled.q)).max(1e-12)).clamp(SCALE_MIN, SCALE_MAX);
        if gamma != 1.0 {
            for r in 0..n {
                for entry in &mut scaled.p.rows[r] {
                    entry.1 *= gamma;
                }
                scaled.q[r] *= gamma;
            }
            c *= gamma;
        }
    }
    for r in 0..m {
        scaled.l[r] = e[r] * prob.l[r];
        scaled.u[r] = e[r] * prob.u[r];
    }
    (scaled, Scaling { d, e, c })
}

/// Solve with an optional warm start `(x0, y0)` from a related problem.
///
/// The solver equilibrates the problem (Ruiz scaling with a cost
/// normalization), runs the operator-splitting iteration on the scaled data,
/// and checks termination, infeasibility certificates, and the polish on
/// unscaled quantities.
pub fn solve_qp_warm(
    prob: &QpProblem,
    settings: &QpSettings,
    warm: Option<(&[f64], &[f64])>,
) -> Result<QpSolution, QpError> {
    let n = prob.n();
    let m = prob.m();
    let (sp, scaling) = ruiz_equilibrate(prob);
    let eq: Vec<bool> = (0..m)
        .map(|i| {
            sp.l[i].is_finite()
                && sp.u[i].is_finite()
                && sp.u[i] - sp.l[i] <= 1e-12 * (1.0 + sp.l[i].abs())
        })
        .collect();
    let mut rho_base = settings.rho;
    let mut rho_vec: Vec<f64> = eq.iter().map(|&e| row_rho(rho_base, e)).collect();
    let mut kkt = build_admm_matrix(&sp, settings.sigma, &rho_vec)?;

    // Scaled iterates.
    let mut x = vec![0.0; n];
    let mut y = vec![0.0; m];
    if let Some((x0, y0)) = warm {
        for j in 0..n {
            x[j] = x0[j] / scaling.d[j];
        }
        for i in 0..m {
            y[i] = scaling.c * y0[i] / scaling.e[i];
        }
    }
    let mut ax = vec![0.0; m];
    sp.a.matvec(&x, &mut ax);
    let mut z: Vec<f64> = (0..m).map(|i| ax[i].clamp(sp.l[i], sp.u[i])).collect();

    let mut rhs = vec![0.0; n];
    let mut tmp_m = vec![0.0; m];
    let mut x_prev = vec![0.0; n];
    let mut y_prev = vec![0.0; m];
    let mut px = vec![0.0; n];
    let mut aty = vec![0.0; n];

    let mut iterations = 0;

    for k in 1..=settings.max_iter {
        iterations = k;
        x_prev.copy_from_slice(&x);
        y_prev.copy_from_slice(&y);

        // x-tilde update: (P + sigma I + A' diag(rho) A) xt = sigma x - q + A'(rho z - y)
        for i in 0..m {
            tmp_m[i] = rho_vec[i] * z[i] - y[i];
        }
        sp.a.t_matvec(&tmp_m, &mut rhs);
        for i in 0..n {
            rhs[i] += settings.sigma * x[i] - sp.q[i];
        }
        kkt.solve(&mut rhs);
        let xt = &rhs;

        sp.a.matvec(xt, &mut tmp_m);
        let zt = &tmp_m;

        // Relaxed updates.
        for i in 0..n {
            x[i] = settings.alpha * xt[i] + (1.0 - settings.alpha) * x[i];
        }
        for i in 0..m {
            let w = settings.alpha * zt[i] + (1.0 - settings.alpha) * z[i];
            let z_new = (w + y[i] / rho_vec[i]).clamp(sp.l[i], sp.u[i]);
            y[i] += rho_vec[i] * (w - z_new);
            z[i] = z_new;
        }

        let last = k == settings.max_iter;
        if k % settings.check_interval == 0 || last {
            sp.a.matvec(&x, &mut ax);
            sp.p.matvec(&x, &mut px);
            sp.a.t_matvec(&y, &mut aty);
            // Residuals and their scales in unscaled units.
            let mut rp: f64 = 0.0;
            let mut scale_p: f64 = 0.0;
            for i in 0..m {
                let inv_e = 1.0 / scaling.e[i];
                rp = rp.max((ax[i] - z[i]).abs() * inv_e);
                scale_p = scale_p.max(ax[i].abs() * inv_e).max(z[i].abs() * inv_e);
            }
            let mut rd: f64 = 0.0;
            let mut scale_d: f64 = 0.0;
            for j in 0..n {
                let inv = 1.0 / (scaling.c * scaling.d[j]);
                rd = rd.max((px[j] + sp.q[j] + aty[j]).abs() * inv);
                scale_d = scale_d
                    .max(px[j].abs() * inv)
                    .max(aty[j].abs() * inv)
                    .max(prob.q[j].abs());
            }
            let eps_p = settings.eps_abs + settings.eps_rel * scale_p;
            let eps_d = settings.eps_abs + settings.eps_rel * scale_d;
            if rp <= eps_p && rd <= eps_d {
                break;
            }

            // Early polish rescue: once the iterate is coarsely converged
            // the projected active set is usually final, and one exact KKT
            // solve on it finishes the job orders of magnitude sooner than
            // the splitting iteration.
            if settings.polish && k % settings.adapt_interval == 0 && rp <= 1e3 * eps_p && rd <= 1e3 * eps_d {
                let uz: Vec<f64> = (0..m).map(|i| z[i] / scaling.e[i]).collect();
                if let Some(cand) = polish(prob, &uz) {
                    // Accept only a near-exact KKT point: a settled active
                    // set yields machine-precision residuals, anything
                    // looser means rows are still flickering.
                    if cand.prim_res <= 1e-9 && cand.dual_res <= 1e-9 * (1.0 + scale_d) {
                        let objective = prob.objective(&cand.x);
                        return Ok(QpSolution {
                            status: QpStatus::Solved,
                            iterations: k,
                            objective,
                            ..cand
                        });
                    }
                }
            }

            // Infeasibility certificates on the original problem.
            let ux: Vec<f64> = (0..n).map(|j| scaling.d[j] * x[j]).collect();
            let ux_prev: Vec<f64> = (0..n).map(|j| scaling.d[j] * x_prev[j]).collect();
            let uy: Vec<f64> = (0..m).map(|i| scaling.e[i] * y[i] / scaling.c).collect();
            let uy_prev: Vec<f64> = (0..m).map(|i| scaling.e[i] * y_prev[i] / scaling.c).collect();
            check_infeasibility(prob, &ux, &ux_prev, &uy, &uy_prev)?;

            if k % settings.adapt_interval == 0 && !last {
                let rp_rel = rp / scale_p.max(1e-12);
                let rd_rel = rd / scale_d.max(1e-12);
                let candidate = (rho_base * (rp_rel / rd_rel.max(1e-12)).sqrt()).clamp(1e-6, 1e6);
                if candidate > 5.0 * rho_base || candidate < rho_base / 5.0 {
                    rho_base = candidate;
                    rho_vec = eq.iter().map(|&e| row_rho(rho_base, e)).collect();
                    kkt = build_admm_matrix(&sp, settings.sigma, &rho_vec)?;
                }
            }
        }
    }

    let mut sol = QpSolution {
        x: (0..n).map(|j| scaling.d[j] * x[j]).collect(),
        y: (0..m).map(|i| scaling.e[i] * y[i] / scaling.c).collect(),
        z: (0..m).map(|i| z[i] / scaling.e[i]).collect(),
        status: QpStatus::MaxIterations,
        iterations,
        prim_res: 0.0,
        dual_res: 0.0,
        polished: false,
        objective: 0.0,
    };
    let (rp, rd) = residuals(prob, &sol.x, &sol.y, &sol.z);
    sol.prim_res = rp;
    sol.dual_res = rd;

    if settings.polish {
        if let Some(better) = polish(prob, &sol.z) {
            if better.prim_res <= sol.prim_res.max(1e-9) && better.dual_res <= sol.dual_res.max(1e-9) {
                sol = QpSolution { iterations, ..better };
            }
        }
    }

    // Reported residuals and the status come from the returned iterate.
    let (rp, rd) = residuals(prob, &sol.x, &sol.y, &sol.z);
    sol.prim_res = rp;
    sol.dual_res = rd;
    sol.objective = prob.objective(&sol.x);
    let scale_p = {
        let mut ax = vec![0.0; m];
        prob.a.matvec(&sol.x, &mut ax);
        norm_inf(&ax).max(norm_inf(&sol.z))
    };
    let scale_d = {
        let mut px = vec![0.0; n];
        prob.p.matvec(&sol.x, &mut px);
        let mut aty = vec![0.0; n];
        prob.a.t_matvec(&sol.y, &mut aty);
        norm_inf(&px).max(norm_inf(&aty)).max(norm_inf(&prob.q))
    };
    if rp <= settings.eps_abs + settings.eps_rel * scale_p
        && rd <= settings.eps_abs + settings.eps_rel * scale_d
    {
        sol.status = QpStatus::Solved;
    }
    Ok(sol)
}

fn residuals(prob: &QpProblem, x: &[f64], y: &[f64], z: &[f64]) -> (f64, f64) {
    let mut ax = vec![0.0; prob.m()];
    prob.a.matvec(x, &mut ax);
    let mut px = vec![0.0; prob.n()];
    prob.p.matvec(x, &mut px);
    let mut aty = vec![0.0; prob.n()];
    prob.a.t_matvec(y, &mut aty);
    let mut rp: f64 = 0.0;
    for i in 0..prob.m() {
        rp = rp.max((ax[i] - z[i]).abs());
    }
    let mut rd: f64 = 0.0;
    for i in 0..prob.n() {
        rd = rd.max((px[i] + prob.q[i] + aty[i]).abs());
    }
    (rp, rd)
}

fn check_infeasibility(
    prob: &QpProblem,
    x: &[f64],
    x_prev: &[f64],
    y: &[f64],
    y_prev: &[f64],
) -> Result<(), QpError> {
    const EPS_INF: f64 = 1e-6;
    let m = prob.m();
    let n = prob.n();

    // Primal infeasibility certificate from the dual direction.
    let dy: Vec<f64> = (0..m).map(|i| y[i] - y_prev[i]).collect();
    let dy_norm = norm_inf(&dy);
    if dy_norm > 1e-10 {
        let e: Vec<f64> = dy.iter().map(|v| v / dy_norm).collect();
        let mut ate = vec![0.0; n];
        prob.a.t_matvec(&e, &mut ate);
        if norm_inf(&ate) <= EPS_INF {
            let mut support = 0.0;
            let mut valid = true;
            for i in 0..m {
                let pos = e[i].max(0.0);
                let neg = e[i].min(0.0);
                if pos > EPS_INF && !prob.u[i].is_finite() {
                    valid = false;
                    break;
                }
                if neg < -EPS_INF && !prob.l[i].is_finite() {
                    valid = false;
                    break;
                }
                if prob.u[i].is_finite() {
                    support += prob.u[i] * pos;
                }
                if prob.l[i].is_finite() {
                    support += prob.l[i] * neg;
                }
            }
            if valid && support <= -EPS_INF {
                return Err(QpError::InfeasibleDetected { dual: false });
            }
        }
    }

    // Dual infeasibility certificate from the primal direction.
    let dx: Vec<f64> = (0..n).map(|i| x[i] - x_prev[i]).collect();
    let dx_norm = norm_inf(&dx);
    if dx_norm > 1e-10 {
        let e: Vec<f64> = dx.iter().map(|v| v / dx_norm).collect();
        let mut pe = vec![0.0; n];
        prob.p.matvec(&e, &mut pe);
        if norm_inf(&pe) <= EPS_INF && dot(&prob.q, &e) <= -EPS_INF {
            let mut ae = vec![0.0; prob.m()];
            prob.a.matvec(&e, &mut ae);
            let mut valid = true;
            for i in 0..m {
                if prob.u[i].is_finite() && ae[i] > EPS_INF {
                    valid = false;
                    break;
                }
                if prob.l[i].is_finite() && ae[i] < -EPS_INF {
                    valid = false;
                    break;
                }
            }
            if valid {
                return Err(QpError::InfeasibleDetected { dual: true });
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Activity {
    Lower,
    Upper,
    Equality,
}

/// Refines a solution by active-set iteration seeded from the projected row
/// values sitting on their bounds: each round solves the equality KKT system
/// of the working set with regularized banded LDL' plus iterative
/// refinement, drops rows with strongly wrong-signed multipliers, and adds
/// rows pushed past their bounds. Callers decide acceptance from the
/// returned residuals. Because the seed comes from the projection, the
/// polish also rescues coarse unconverged iterates.
fn polish(prob: &QpProblem, z: &[f64]) -> Option<QpSolution> {
    let m = prob.m();

    let mut side: Vec<Option<Activity>> = vec![None; m];
    for i in 0..m {
        let eq = prob.l[i].is_finite()
            && prob.u[i].is_finite()
            && prob.u[i] - prob.l[i] <= 1e-12 * (1.0 + prob.l[i].abs());
        if eq {
            side[i] = Some(Activity::Equality);
        } else if prob.l[i].is_finite() && z[i] - prob.l[i] <= 1e-9 * (1.0 + prob.l[i].abs()) {
            side[i] = Some(Activity::Lower);
        } else if prob.u[i].is_finite() && prob.u[i] - z[i] <= 1e-9 * (1.0 + prob.u[i].abs()) {
            side[i] = Some(Activity::Upper);
        }
    }

    // Primal-dual active-set iteration: pin the working set, then drop rows
    // whose multipliers come out strongly wrong-signed and add rows the
    // exact solve pushed past their bounds.
    let mut ax = vec![0.0; m];
    for _round in 0..8 {
        let active: Vec<(usize, Activity)> = side
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|a| (i, a)))
            .collect();
        let (x, y) = polish_kkt(prob, &active)?;
        let mut changed = false;
        for (i, s) in side.iter_mut().enumerate() {
            match s {
                Some(Activity::Lower) if y[i] > 1e-8 => {
                    *s = None;
                    changed = true;
                }
                Some(Activity::Upper) if y[i] < -1e-8 => {
                    *s = None;
                    changed = true;
                }
                _ => {}
            }
        }
        prob.a.matvec(&x, &mut ax);
        for i in 0..m {
            if side[i].is_some() {
                continue;
            }
            if prob.l[i].is_finite() && ax[i] < prob.l[i] - 1e-9 * (1.0 + prob.l[i].abs()) {
                side[i] = Some(Activity::Lower);
                changed = true;
            } else if prob.u[i].is_finite() && ax[i] > prob.u[i] + 1e-9 * (1.0 + prob.u[i].abs()) {
                side[i] = Some(Activity::Upper);
                changed = true;
            }
        }
        if changed {
            continue;
        }
        let z: Vec<f64> = (0..m).map(|i| ax[i].clamp(prob.l[i], prob.u[i])).collect();
        let (rp, rd) = residuals(prob, &x, &y, &z);
        return Some(QpSolution {
            x,
            y,
            z,
            status: QpStatus::Solved,
            iterations: 0,
            prim_res: rp,
            dual_res: rd,
            polished: true,
            objective: 0.0,
        });
    }
    None
}

/// One banded KKT solve on a fixed active set; rejects singular systems.
fn polish_kkt(prob: &QpProblem, active: &[(usize, Activity)]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = prob.n();
    let m = prob.m();
    let ma = active.len();
    // More active rows than variables means the set has not settled; the
    // KKT system would be singular.
    if ma > n {
        return None;
    }
    let total = n + ma;

    // Interleave multipliers with the variables their rows touch first, so
    // stage-local problems stay banded.
    let mut order: Vec<(usize, usize)> = (0..n).map(|j| (2 * j, j)).collect();
    for (k, &(r, _)) in active.iter().enumerate() {
        let anchor = prob.a.row(r).iter().map(|e| e.0).min().unwrap_or(0);
        order.push((2 * anchor + 1, n + k));
    }
    order.sort();
    let mut pos = vec![0usize; total];
    for (slot, &(_, unknown)) in order.iter().enumerate() {
        pos[unknown] = slot;
    }

    let mut hb = 0usize;
    let touch = |a: usize, b: usize, hb: &mut usize| {
        *hb = (*hb).max(pos[a].abs_diff(pos[b]));
    };
    for i in 0..n {
        for &(j, _) in prob.p.row(i) {
            touch(i, j, &mut hb);
        }
    }
    for (k, &(r, _)) in active.iter().enumerate() {
        for &(c, _) in prob.a.row(r) {
            touch(n + k, c, &mut hb);
        }
    }

    let delta = 1e-8;
    let build = |reg: f64| -> BandMatrix {
        let mut kkt = BandMatrix::zeros(total, hb);
        for j in 0..n {
            kkt.add(pos[j], pos[j], reg);
        }
        for i in 0..n {
            for &(j, v) in prob.p.row(i) {
                if pos[i] >= pos[j] {
                    kkt.add(pos[i], pos[j], v);
                }
            }
        }
        for (k, &(r, _)) in active.iter().enumerate() {
            kkt.add(pos[n + k], pos[n + k], -reg);
            for &(c, v) in prob.a.row(r) {
                let (hi, lo) = if pos[n + k] >= pos[c] { (pos[n + k], pos[c]) } else { (pos[c], pos[n + k]) };
                kkt.add(hi, lo, v);
            }
        }
        kkt
    };
    let mut reg_kkt = build(delta);
    reg_kkt.factor_ldl().ok()?;
    let plain_kkt = build(0.0);

    let mut rhs = vec![0.0; total];
    for j in 0..n {
        rhs[pos[j]] = -prob.q[j];
    }
    for (k, &(r, act)) in active.iter().enumerate() {
        rhs[pos[n + k]] = match act {
            Activity::Lower => prob.l[r],
            Activity::Upper | Activity::Equality => prob.u[r],
        };
    }

    // Solve with two rounds of iterative refinement against the
    // unregularized KKT matrix.
    let mut sol_v = rhs.clone();
    reg_kkt.solve(&mut sol_v);
    for _ in 0..2 {
        let mut resid = rhs.clone();
        // resid -= K0 * sol_v (banded symmetric multiply)
        for i in 0..total {
            let lo = i.saturating_sub(hb);
            for j in lo..=i {
                let v = plain_kkt.data[plain_kkt.idx(i, i - j)];
                if v != 0.0 {
                    resid[i] -= v * sol_v[j];
                    if j < i {
                        resid[j] -= v * sol_v[i];
                    }
                }
            }
        }
        reg_kkt.solve(&mut resid);
        for i in 0..total {
            sol_v[i] += resid[i];
        }
    }
    if sol_v.iter().any(|v| !v.is_finite()) {
        return None;
    }

    let mut x = vec![0.0; n];
    for j in 0..n {
        x[j] = sol_v[pos[j]];
    }
    let mut y = vec![0.0; m];
    for (k, &(r, _)) in active.iter().enumerate() {
        y[r] = sol_v[pos[n + k]];
    }
    Some((x, y))
}
