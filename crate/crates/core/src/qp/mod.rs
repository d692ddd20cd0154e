//! Operator-splitting (ADMM) solver for convex quadratic programs
//!
//! ```text
//! minimize    1/2 x'Px + q'x
//! subject to  l <= Ax <= u
//! ```
//!
//! Each iteration solves one quasi-definite KKT system. The unknowns are
//! ordered so that every constraint row sits right after the last variable
//! it touches; for stage-wise problems such as trajectory optimization the
//! KKT matrix is then banded and the factorization costs O(n * bw^2).
//! Problem data is equilibrated (modified Ruiz), the step size adapts to
//! the residual balance, and converged iterates are polished by solving
//! the KKT system of the guessed active set.

mod ldl;
mod sparse;

pub use ldl::{BandedLdl, ZeroPivot};
pub use sparse::CsrMatrix;

use serde::Serialize;

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;
const SCALE_MIN: f64 = 1e-4;
const SCALE_MAX: f64 = 1e4;

/// QP data. `p` holds both triangles of the symmetric cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct QpData {
    pub p: CsrMatrix,
    pub q: Vec<f64>,
    pub a: CsrMatrix,
    pub l: Vec<f64>,
    pub u: Vec<f64>,
}

impl QpData {
    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.l.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut px = vec![0.0; x.len()];
        self.p.mul_vec(x, &mut px);
        0.5 * dot(x, &px) + dot(&self.q, x)
    }

    /// Largest violation of `l <= Ax <= u`.
    pub fn constraint_violation(&self, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; self.num_constraints()];
        self.a.mul_vec(x, &mut ax);
        ax.iter()
            .zip(self.l.iter().zip(&self.u))
            .map(|(v, (lo, hi))| (lo - v).max(v - hi).max(0.0))
            .fold(0.0, f64::max)
    }

    /// `|| P x + q + A' y ||_inf`
    pub fn dual_residual(&self, x: &[f64], y: &[f64]) -> f64 {
        let n = self.num_vars();
        let mut px = vec![0.0; n];
        let mut aty = vec![0.0; n];
        self.p.mul_vec(x, &mut px);
        self.a.tmul_vec(y, &mut aty);
        (0..n).map(|j| (px[j] + self.q[j] + aty[j]).abs()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Settings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_prim_inf: f64,
    pub max_iter: usize,
    pub check_every: usize,
    pub scaling_iters: usize,
    pub adaptive_rho: bool,
    pub polish: bool,
    pub polish_delta: f64,
    pub polish_refine_iters: usize,
    /// Active-set correction rounds per polish attempt.
    pub polish_rounds: usize,
    /// Polish is attempted once the scaled residuals are within this
    /// factor of the stopping thresholds.
    pub polish_trigger: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_abs: 1e-4,
            eps_rel: 1e-4,
            eps_prim_inf: 1e-5,
            max_iter: 20_000,
            check_every: 10,
            scaling_iters: 10,
            adaptive_rho: true,
            polish: true,
            polish_delta: 1e-7,
            polish_refine_iters: 5,
            polish_rounds: 8,
            polish_trigger: 1000.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Optimal,
    PrimalInfeasible,
    MaxIterations,
    NumericalError,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub status: Status,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Constraint violation of `x` in original units.
    pub primal_residual: f64,
    /// Stationarity residual in original units.
    pub dual_residual: f64,
    pub polished: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
}

/// Minimum ADMM iterations between polish attempts.
const POLISH_SPACING: usize = 50;

fn clamp_scale(v: f64) -> f64 {
    if v < SCALE_MIN {
        1.0
    } else {
        v.clamp(SCALE_MIN, SCALE_MAX)
    }
}

/// Equilibrated copy of the problem: `P~ = c D P D`, `q~ = c D q`,
/// `A~ = E A D`, `l~ = E l`, `u~ = E u`.
struct Scaled {
    p: CsrMatrix,
    q: Vec<f64>,
    a: CsrMatrix,
    l: Vec<f64>,
    u: Vec<f64>,
    d: Vec<f64>,
    e: Vec<f64>,
    c: f64,
}

impl Scaled {
    fn new(data: &QpData, iters: usize) -> Self {
        let (n, m) = (data.num_vars(), data.num_constraints());
        let mut p = data.p.clone();
        let mut q = data.q.clone();
        let mut a = data.a.clone();
        let mut d = vec![1.0; n];
        let mut e = vec![1.0; m];
        let mut c = 1.0;
        for _ in 0..iters {
            let pc = p.col_inf_norms();
            let ac = a.col_inf_norms();
            let dd: Vec<f64> = (0..n).map(|j| 1.0 / clamp_scale(pc[j].max(ac[j])).sqrt()).collect();
            let ar = a.row_inf_norms();
            let de: Vec<f64> = ar.iter().map(|r| 1.0 / clamp_scale(*r).sqrt()).collect();
            p.scale(&dd, &dd);
            a.scale(&de, &dd);
            for j in 0..n {
                q[j] *= dd[j];
                d[j] *= dd[j];
            }
            for i in 0..m {
                e[i] *= de[i];
            }
            let pc = p.col_inf_norms();
            let mean_pc = if n > 0 { pc.iter().sum::<f64>() / n as f64 } else { 0.0 };
            let gamma = 1.0 / clamp_scale(mean_pc.max(inf_norm(&q)));
            p.scale_all(gamma);
            q.iter_mut().for_each(|v| *v *= gamma);
            c *= gamma;
        }
        let l = data.l.iter().zip(&e).map(|(v, s)| v * s).collect();
        let u = data.u.iter().zip(&e).map(|(v, s)| v * s).collect();
        Self { p, q, a, l, u, d, e, c }
    }

    fn unscale_x(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().zip(&self.d).map(|(x, d)| x * d).collect()
    }

    fn unscale_y(&self, ys: &[f64]) -> Vec<f64> {
        ys.iter().zip(&self.e).map(|(y, e)| y * e / self.c).collect()
    }
}

/// Unknown ordering for the KKT system over variables and the given rows.
fn kkt_order(a: &CsrMatrix, n: usize, rows: &[usize]) -> Vec<usize> {
    let mut by_last: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut empty = Vec::new();
    for (k, &i) in rows.iter().enumerate() {
        match a.row(i).map(|(j, _)| j).max() {
            Some(j) => by_last[j].push(n + k),
            None => empty.push(n + k),
        }
    }
    let mut perm = Vec::with_capacity(n + rows.len());
    for (j, attached) in by_last.into_iter().enumerate() {
        perm.push(j);
        perm.extend(attached);
    }
    perm.extend(empty);
    perm
}

/// Factors `[P + reg_x I, A_r'; A_r, -diag(reg_y)]` for the listed rows.
fn factor_kkt(p: &CsrMatrix, a: &CsrMatrix, rows: &[usize], reg_x: f64, reg_y: &[f64]) -> Result<BandedLdl, ZeroPivot> {
    let n = p.nrows;
    let mut entries = Vec::with_capacity(p.nnz() + n + 4 * rows.len());
    for i in 0..n {
        entries.push((i, i, reg_x));
        for (j, v) in p.row(i) {
            if j <= i {
                entries.push((i, j, v));
            }
        }
    }
    for (k, &i) in rows.iter().enumerate() {
        for (j, v) in a.row(i) {
            entries.push((n + k, j, v));
        }
        entries.push((n + k, n + k, -reg_y[k]));
    }
    BandedLdl::factor(n + rows.len(), &entries, kkt_order(a, n, rows))
}

struct Residuals {
    prim: f64,
    dual: f64,
    eps_prim: f64,
    eps_dual: f64,
    /// Scaled-space normalised residuals for step-size adaptation.
    prim_norm: f64,
    dual_norm: f64,
}

pub fn solve(data: &QpData, settings: &Settings, warm: Option<&WarmStart>) -> Solution {
    let (n, m) = (data.num_vars(), data.num_constraints());
    let sc = Scaled::new(data, settings.scaling_iters);

    let row_rho = |rho: f64| -> Vec<f64> {
        (0..m)
            .map(|i| {
                if sc.l[i] == f64::NEG_INFINITY && sc.u[i] == f64::INFINITY {
                    RHO_MIN
                } else if sc.u[i] - sc.l[i] < 1e-8 {
                    RHO_EQ_SCALE * rho
                } else {
                    rho
                }
            })
            .collect()
    };

    let mut rho = settings.rho;
    let mut rho_vec = row_rho(rho);
    let all_rows: Vec<usize> = (0..m).collect();
    let inv = |v: &[f64]| v.iter().map(|r| 1.0 / r).collect::<Vec<f64>>();
    let mut kkt = match factor_kkt(&sc.p, &sc.a, &all_rows, settings.sigma, &inv(&rho_vec)) {
        Ok(f) => f,
        Err(_) => return failed(n, m, Status::NumericalError, 0),
    };

    let mut x = vec![0.0; n];
    let mut y = vec![0.0; m];
    if let Some(w) = warm {
        if w.x.len() == n {
            x = w.x.iter().zip(&sc.d).map(|(v, d)| v / d).collect();
        }
        if w.y.len() == m {
            y = w.y.iter().zip(&sc.e).map(|(v, e)| v * sc.c / e).collect();
        }
    }
    let mut z = vec![0.0; m];
    sc.a.mul_vec(&x, &mut z);
    for i in 0..m {
        z[i] = z[i].clamp(sc.l[i], sc.u[i]);
    }

    let mut rhs = vec![0.0; n + m];
    let mut work = vec![0.0; n + m + kkt.bandwidth()];
    let mut x_prev = x.clone();
    let mut y_prev = y.clone();
    let mut z_tilde = vec![0.0; m];
    let mut last_polish: Option<usize> = None;
    let mut best: Option<Solution> = None;

    for iter in 1..=settings.max_iter {
        x_prev.copy_from_slice(&x);
        y_prev.copy_from_slice(&y);

        for j in 0..n {
            rhs[j] = settings.sigma * x[j] - sc.q[j];
        }
        for i in 0..m {
            rhs[n + i] = z[i] - y[i] / rho_vec[i];
        }
        work.resize(n + m + kkt.bandwidth(), 0.0);
        kkt.solve_with(&mut rhs, &mut work);
        for i in 0..m {
            z_tilde[i] = z[i] + (rhs[n + i] - y[i]) / rho_vec[i];
        }
        for j in 0..n {
            x[j] = settings.alpha * rhs[j] + (1.0 - settings.alpha) * x_prev[j];
        }
        for i in 0..m {
            let relaxed = settings.alpha * z_tilde[i] + (1.0 - settings.alpha) * z[i];
            let z_new = (relaxed + y[i] / rho_vec[i]).clamp(sc.l[i], sc.u[i]);
            y[i] += rho_vec[i] * (relaxed - z_new);
            z[i] = z_new;
        }

        if iter % settings.check_every != 0 && iter != settings.max_iter {
            continue;
        }

        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return failed(n, m, Status::NumericalError, iter);
        }

        let res = residuals(&sc, &x, &y, &z, settings);
        let tol = settings.eps_abs;
        let near = settings.polish_trigger.max(1.0);
        if settings.polish
            && res.prim <= near * res.eps_prim
            && res.dual <= near * res.eps_dual
            && last_polish.is_none_or(|it| iter >= it + POLISH_SPACING)
        {
            last_polish = Some(iter);
            if let Some(pol) = polish(data, &sc, &y, &z, settings, iter) {
                if pol.primal_residual <= tol && pol.dual_residual <= tol {
                    return Solution { status: Status::Optimal, ..pol };
                }
            }
        }
        if res.prim <= res.eps_prim && res.dual <= res.eps_dual {
            let unpolished = finalize(data, &sc, &x, &y, iter, false);
            if unpolished.primal_residual <= tol && unpolished.dual_residual <= tol {
                return Solution { status: Status::Optimal, ..unpolished };
            }
            best = Some(unpolished);
        }

        if primal_infeasible(&sc, &y, &y_prev, settings.eps_prim_inf) {
            let mut sol = finalize(data, &sc, &x, &y, iter, false);
            sol.status = Status::PrimalInfeasible;
            return sol;
        }

        if settings.adaptive_rho {
            let ratio = (res.prim_norm / res.dual_norm.max(1e-30)).sqrt();
            let new_rho = (rho * ratio).clamp(RHO_MIN, RHO_MAX);
            if new_rho.is_finite() && (new_rho > 5.0 * rho || new_rho < rho / 5.0) {
                rho = new_rho;
                rho_vec = row_rho(rho);
                match factor_kkt(&sc.p, &sc.a, &all_rows, settings.sigma, &inv(&rho_vec)) {
                    Ok(f) => kkt = f,
                    Err(_) => return failed(n, m, Status::NumericalError, iter),
                }
            }
        }
    }

    let mut sol = best.unwrap_or_else(|| finalize(data, &sc, &x, &y, settings.max_iter, false));
    sol.status = Status::MaxIterations;
    sol
}

fn failed(n: usize, m: usize, status: Status, iterations: usize) -> Solution {
    Solution {
        status,
        x: vec![f64::NAN; n],
        y: vec![0.0; m],
        objective: f64::NAN,
        iterations,
        primal_residual: f64::INFINITY,
        dual_residual: f64::INFINITY,
        polished: false,
    }
}

fn residuals(sc: &Scaled, x: &[f64], y: &[f64], z: &[f64], settings: &Settings) -> Residuals {
    let (n, m) = (x.len(), z.len());
    let mut ax = vec![0.0; m];
    let mut px = vec![0.0; n];
    let mut aty = vec![0.0; n];
    sc.a.mul_vec(x, &mut ax);
    sc.p.mul_vec(x, &mut px);
    sc.a.tmul_vec(y, &mut aty);

    let mut prim = 0.0f64;
    let mut ax_n = 0.0f64;
    let mut z_n = 0.0f64;
    let mut prim_s = 0.0f64;
    let mut ax_s = 0.0f64;
    let mut z_s = 0.0f64;
    for i in 0..m {
        let inv_e = 1.0 / sc.e[i];
        prim = prim.max(((ax[i] - z[i]) * inv_e).abs());
        ax_n = ax_n.max((ax[i] * inv_e).abs());
        z_n = z_n.max((z[i] * inv_e).abs());
        prim_s = prim_s.max((ax[i] - z[i]).abs());
        ax_s = ax_s.max(ax[i].abs());
        z_s = z_s.max(z[i].abs());
    }
    let mut dual = 0.0f64;
    let mut px_n = 0.0f64;
    let mut aty_n = 0.0f64;
    let mut q_n = 0.0f64;
    let mut dual_s = 0.0f64;
    let mut px_s = 0.0f64;
    let mut aty_s = 0.0f64;
    let inv_c = 1.0 / sc.c;
    for j in 0..n {
        let k = inv_c / sc.d[j];
        let r = px[j] + sc.q[j] + aty[j];
        dual = dual.max((r * k).abs());
        px_n = px_n.max((px[j] * k).abs());
        aty_n = aty_n.max((aty[j] * k).abs());
        q_n = q_n.max((sc.q[j] * k).abs());
        dual_s = dual_s.max(r.abs());
        px_s = px_s.max(px[j].abs());
        aty_s = aty_s.max(aty[j].abs());
    }
    let q_s = inf_norm(&sc.q);
    Residuals {
        prim,
        dual,
        eps_prim: settings.eps_abs + settings.eps_rel * ax_n.max(z_n),
        eps_dual: settings.eps_abs + settings.eps_rel * px_n.max(aty_n).max(q_n),
        prim_norm: prim_s / ax_s.max(z_s).max(1e-30),
        dual_norm: dual_s / px_s.max(aty_s).max(q_s).max(1e-30),
    }
}

fn finalize(data: &QpData, sc: &Scaled, xs: &[f64], ys: &[f64], iterations: usize, polished: bool) -> Solution {
    let x = sc.unscale_x(xs);
    let y = sc.unscale_y(ys);
    Solution {
        status: Status::Optimal,
        objective: data.objective(&x),
        primal_residual: data.constraint_violation(&x),
        dual_residual: data.dual_residual(&x, &y),
        x,
        y,
        iterations,
        polished,
    }
}

/// Certificate: `A' dy ~ 0` and `u' max(dy, 0) + l' min(dy, 0) < 0`.
fn primal_infeasible(sc: &Scaled, y: &[f64], y_prev: &[f64], eps: f64) -> bool {
    let m = y.len();
    let n = sc.d.len();
    let dy: Vec<f64> = (0..m).map(|i| y[i] - y_prev[i]).collect();
    // Original-space dy = E dy~ (the 1/c factor cancels in the homogeneous test).
    let dy_orig: Vec<f64> = (0..m).map(|i| dy[i] * sc.e[i]).collect();
    let norm = inf_norm(&dy_orig);
    if norm < 1e-12 {
        return false;
    }
    let mut atdy = vec![0.0; n];
    sc.a.tmul_vec(&dy, &mut atdy);
    let atdy_norm = (0..n).map(|j| (atdy[j] / sc.d[j]).abs()).fold(0.0, f64::max);
    if atdy_norm > eps * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..m {
        let d = dy[i];
        if d.abs() * sc.e[i] < eps * norm {
            continue;
        }
        let bound = if d > 0.0 { sc.u[i] } else { sc.l[i] };
        if !bound.is_finite() {
            return false;
        }
        support += bound * d;
    }
    support < -eps * norm
}

fn polish(
    data: &QpData,
    sc: &Scaled,
    y: &[f64],
    z: &[f64],
    settings: &Settings,
    iterations: usize,
) -> Option<Solution> {
    let m = y.len();
    let is_eq = |i: usize| sc.u[i] - sc.l[i] < 1e-8;
    // Active side per row: Some(true) lower, Some(false) upper.
    let mut side: Vec<Option<bool>> = (0..m)
        .map(|i| {
            if is_eq(i) || z[i] - sc.l[i] < -y[i] {
                Some(true)
            } else if sc.u[i] - z[i] < y[i] {
                Some(false)
            } else {
                None
            }
        })
        .collect();

    // A few primal-dual active-set corrections of the ADMM guess.
    for _ in 0..settings.polish_rounds.max(1) {
        let (xs, ys) = polish_solve(sc, &side, settings)?;
        let mut changed = false;
        for i in 0..m {
            let Some(lower) = side[i] else { continue };
            if is_eq(i) {
                continue;
            }
            let wrong = if lower { ys[i] > 0.0 } else { ys[i] < 0.0 };
            if wrong && (ys[i] * sc.e[i] / sc.c).abs() > settings.eps_abs {
                side[i] = None;
                changed = true;
            }
        }
        let mut ax = vec![0.0; m];
        sc.a.mul_vec(&xs, &mut ax);
        for i in 0..m {
            if side[i].is_some() {
                continue;
            }
            let tol = settings.eps_abs * sc.e[i];
            if ax[i] < sc.l[i] - tol {
                side[i] = Some(true);
                changed = true;
            } else if ax[i] > sc.u[i] + tol {
                side[i] = Some(false);
                changed = true;
            }
        }
        if !changed {
            return Some(finalize(data, sc, &xs, &ys, iterations, true));
        }
    }
    None
}

/// Solves the equality-constrained QP on the given active set with
/// iterative refinement; returns scaled `(x, y)`.
fn polish_solve(sc: &Scaled, side: &[Option<bool>], settings: &Settings) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = sc.q.len();
    let m = side.len();
    let rows: Vec<usize> = (0..m).filter(|&i| side[i].is_some()).collect();
    let targets: Vec<f64> = rows.iter().map(|&i| if side[i] == Some(true) { sc.l[i] } else { sc.u[i] }).collect();
    let k = rows.len();
    let delta = settings.polish_delta;
    let fact = factor_kkt(&sc.p, &sc.a, &rows, delta, &vec![delta; k]).ok()?;

    let mut rhs: Vec<f64> = sc.q.iter().map(|v| -v).collect();
    rhs.extend_from_slice(&targets);
    let mut sol = rhs.clone();
    let mut work = vec![0.0; n + k + fact.bandwidth()];
    fact.solve_with(&mut sol, &mut work);

    let kkt_mul = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n + k];
        sc.p.mul_vec(&v[..n], &mut out[..n]);
        for (r, &i) in rows.iter().enumerate() {
            let mut acc = 0.0;
            for (j, a) in sc.a.row(i) {
                acc += a * v[j];
                out[j] += a * v[n + r];
            }
            out[n + r] = acc;
        }
        out
    };
    for _ in 0..settings.polish_refine_iters {
        let kv = kkt_mul(&sol);
        let mut resid: Vec<f64> = rhs.iter().zip(&kv).map(|(a, b)| a - b).collect();
        fact.solve_with(&mut resid, &mut work);
        for (s, r) in sol.iter_mut().zip(&resid) {
            *s += r;
        }
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut y = vec![0.0; m];
    for (r, &i) in rows.iter().enumerate() {
        y[i] = sol[n + r];
    }
    sol.truncate(n);
    Some((sol, y))
}
