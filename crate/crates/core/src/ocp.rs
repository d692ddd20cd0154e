//! Finite-horizon optimal control problem for one lane-decision candidate,
//! assembled as a convex QP over a double-integrator model.
//!
//! Decision vector, interleaved by stage so the KKT system stays banded:
//! `[s_0, v_0, u_0, s_1, v_1, u_1, ..., s_{N-1}, v_{N-1}, u_{N-1}, s_N, v_N]`.
//! Positions are stored relative to the ego position at build time.

use serde::{Deserialize, Serialize};

use crate::energy::EnergyParams;
use crate::qp::{self, CsrMatrix, QpData, Settings, Status, WarmStart};
use crate::signal::{constraint_windows, release_window, ConstraintWindows, Phase, TimeWindow, WindowError};
use crate::world::{EgoState, LaneDecision, PassFlag, SpatEntry, SurroundingVehicle};
use crate::graph::{GRID_MAX, GRID_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcpParams {
    pub horizon: usize,
    pub dt: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Distance kept from the stop line while holding (m).
    pub stop_margin: f64,
    /// Green-interval shrink on each side (s).
    pub green_margin: f64,
    pub headway_time: f64,
    pub standstill_gap: f64,
    /// Bumper-to-bumper length subtracted from the leader position (m).
    pub vehicle_length: f64,
    pub w_energy: f64,
    pub w_acc: f64,
    pub w_jerk: f64,
    pub energy: EnergyParams,
}

impl Default for OcpParams {
    fn default() -> Self {
        Self {
            horizon: 140,
            dt: 0.5,
            v_min: 0.0,
            v_max: 11.0,
            u_min: -4.0,
            u_max: 2.0,
            stop_margin: 3.0,
            green_margin: crate::signal::DEFAULT_GREEN_MARGIN,
            headway_time: 1.5,
            standstill_gap: 6.0,
            vehicle_length: 4.5,
            w_energy: 1e-3,
            w_acc: 0.1,
            w_jerk: 1.0,
            energy: EnergyParams::default_fit(),
        }
    }
}

impl OcpParams {
    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.horizon >= 1
            && self.dt > 0.0
            && self.v_min < self.v_max
            && self.v_min >= 0.0
            && self.u_min < 0.0
            && self.u_max > 0.0
            && self.stop_margin >= 0.0
            && self.green_margin >= 0.0
            && self.headway_time >= 0.0
            && self.standstill_gap >= 0.0
            && self.w_energy >= 0.0
            && self.w_acc >= 0.0
            && self.w_jerk >= 0.0;
        if !ok {
            return Err(crate::Error::InvalidState(format!("invalid planner parameters: {self:?}")));
        }
        self.energy.validate()
    }

    pub fn horizon_time(&self) -> f64 {
        self.horizon as f64 * self.dt
    }
}

pub fn idx_s(k: usize) -> usize {
    3 * k
}

pub fn idx_v(k: usize) -> usize {
    3 * k + 1
}

pub fn idx_u(k: usize) -> usize {
    3 * k + 2
}

pub fn num_vars(horizon: usize) -> usize {
    3 * horizon + 2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "kind", content = "step", rename_all = "snake_case")]
pub enum RowKind {
    InitialPosition,
    InitialVelocity,
    PositionDynamics(usize),
    VelocityDynamics(usize),
    VelocityBox(usize),
    InputBox(usize),
    Headway(usize),
    /// Stay behind the stop line.
    Guard(usize),
    /// Be past the stop line.
    Pass(usize),
}

#[derive(Clone, Debug)]
pub struct OcpProblem {
    pub qp: QpData,
    pub rows: Vec<RowKind>,
    pub horizon: usize,
    pub dt: f64,
    /// Absolute position the relative coordinates are measured from.
    pub origin: f64,
    /// Cost terms not depending on the decision vector.
    pub constant: f64,
    pub windows: Option<ConstraintWindows>,
    /// Set when the constraints are unsatisfiable by construction.
    pub infeasible: Option<String>,
}

impl OcpProblem {
    pub fn rows_of<F: Fn(&RowKind) -> bool + 'static>(&self, pred: F) -> impl Iterator<Item = (usize, RowKind)> + '_ {
        self.rows.iter().copied().enumerate().filter(move |(_, r)| pred(r))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
    NumericalError,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub status: OcpStatus,
    /// Absolute positions, `N + 1` entries.
    pub s: Vec<f64>,
    pub v: Vec<f64>,
    /// `N` entries.
    pub u: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub dynamics_residual: f64,
    pub dt: f64,
    pub raw: Option<qp::Solution>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == OcpStatus::Optimal
    }

    fn failed(status: OcpStatus, dt: f64) -> Self {
        Self {
            status,
            s: Vec::new(),
            v: Vec::new(),
            u: Vec::new(),
            objective: f64::INFINITY,
            iterations: 0,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
            dynamics_residual: f64::INFINITY,
            dt,
            raw: None,
        }
    }

    /// Warm start for a problem built `elapsed` seconds later at `origin`.
    pub fn shifted_warm_start(&self, elapsed: f64, origin: f64) -> Option<WarmStart> {
        if !self.is_optimal() || self.u.is_empty() {
            return None;
        }
        let n = self.u.len();
        let shift = (elapsed / self.dt).round().max(0.0) as usize;
        let mut x = vec![0.0; num_vars(n)];
        for k in 0..=n {
            let src = (k + shift).min(n);
            x[idx_s(k)] = self.s[src] - origin;
            x[idx_v(k)] = self.v[src];
            if k < n {
                x[idx_u(k)] = if k + shift < n { self.u[k + shift] } else { 0.0 };
            }
        }
        Some(WarmStart { x, y: Vec::new() })
    }
}

/// Discrete max-deceleration profile from `v0`, as relative positions and
/// velocities for steps `0..=horizon`.
pub fn braking_profile(v0: f64, params: &OcpParams) -> Vec<(f64, f64)> {
    let dt = params.dt;
    let mut out = Vec::with_capacity(params.horizon + 1);
    let (mut s, mut v) = (0.0, v0);
    out.push((s, v));
    for _ in 0..params.horizon {
        let u = ((params.v_min - v) / dt).clamp(params.u_min, 0.0);
        s += dt * v + 0.5 * dt * dt * u;
        v += dt * u;
        out.push((s, v));
    }
    out
}

/// Discrete max-acceleration profile from `v0`, positions relative.
fn accel_profile(v0: f64, params: &OcpParams) -> Vec<f64> {
    let dt = params.dt;
    let mut out = Vec::with_capacity(params.horizon + 1);
    let (mut s, mut v) = (0.0, v0);
    out.push(s);
    for _ in 0..params.horizon {
        let u = ((params.v_max - v) / dt).clamp(0.0, params.u_max);
        s += dt * v + 0.5 * dt * dt * u;
        v += dt * u;
        out.push(s);
    }
    out
}

/// Step indices `0..=k_end` covering the closed time interval `[0, t]`
/// (ceiling rule), capped at the horizon.
fn last_step_within(t: f64, dt: f64, horizon: usize) -> usize {
    ((t / dt - 1e-9).ceil().max(0.0) as usize).min(horizon)
}

/// Windows actually imposed for `decision` at `light`, including the
/// legality extensions applied by the planner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ImposedWindows {
    pub base: ConstraintWindows,
    /// Stay behind the line for `t <= hold` (None: no hold).
    pub hold: Option<f64>,
    /// Be past the line from this time on (None: crossing not required).
    pub pass_by: Option<f64>,
}

/// Resolves the hold and pass deadlines for a candidate. Returns the empty
/// window error for structurally infeasible pass decisions.
pub fn imposed_windows(
    light: &SpatEntry,
    decision: LaneDecision,
    ego: &EgoState,
    params: &OcpParams,
) -> Result<ImposedWindows, WindowError> {
    let margin = params.green_margin;
    let dist = light.s_tl - ego.s;
    match decision.pass_flag() {
        PassFlag::Pass => {
            let can_stop = braking_profile(ego.v, params).last().map(|p| p.0).unwrap_or(0.0) < dist;
            if light.phase == Phase::Yellow && !can_stop {
                // Too close to stop: clearing on the current yellow is legal.
                let base = ConstraintWindows {
                    decision,
                    pass: Some(TimeWindow { lower: 0.0, upper: light.t_remaining }),
                    stop: TimeWindow { lower: 0.0, upper: 0.0 },
                };
                return Ok(ImposedWindows { base, hold: None, pass_by: Some(light.t_remaining) });
            }
            let base = constraint_windows(light, decision, margin)?;
            let window = base.pass.expect("pass decision has a pass window");
            // Crossing during the current green is legal at any time.
            let hold = (light.phase != Phase::Green).then_some(window.lower);
            Ok(ImposedWindows { base, hold, pass_by: Some(window.upper) })
        }
        PassFlag::NonPass => {
            let base = constraint_windows(light, decision, margin)?;
            let release: TimeWindow = release_window(light, base.stop.upper, margin);
            Ok(ImposedWindows { base, hold: Some(base.stop.upper.max(release.lower)), pass_by: None })
        }
    }
}

struct Builder {
    triplets: Vec<(usize, usize, f64)>,
    l: Vec<f64>,
    u: Vec<f64>,
    rows: Vec<RowKind>,
}

impl Builder {
    fn row(&mut self, kind: RowKind, coeffs: &[(usize, f64)], lo: f64, hi: f64) {
        let i = self.rows.len();
        for &(j, c) in coeffs {
            self.triplets.push((i, j, c));
        }
        self.l.push(lo);
        self.u.push(hi);
        self.rows.push(kind);
    }
}

/// Assembles the QP for one candidate. `light` is the next stop line ahead
/// (if any) and `front` the leader in the candidate's lane (if any).
pub fn build_ocp(
    ego: &EgoState,
    decision: LaneDecision,
    light: Option<&SpatEntry>,
    front: Option<&SurroundingVehicle>,
    params: &OcpParams,
) -> OcpProblem {
    let n_steps = params.horizon;
    let dt = params.dt;
    let n = num_vars(n_steps);
    let v0 = ego.v.clamp(params.v_min, params.v_max);
    let origin = ego.s;

    // Cost: w_E * E(v_k, u_k) + w_acc * u_k^2 over k < N, w_jerk * (du)^2.
    let e = &params.energy;
    let we = params.w_energy;
    let mut p = Vec::with_capacity(6 * n_steps);
    let mut q = vec![0.0; n];
    for k in 0..n_steps {
        let (iv, iu) = (idx_v(k), idx_u(k));
        p.push((iv, iv, 2.0 * we * e.p[0][0]));
        p.push((iv, iu, 2.0 * we * e.p[0][1]));
        p.push((iu, iv, 2.0 * we * e.p[1][0]));
        p.push((iu, iu, 2.0 * we * e.p[1][1] + 2.0 * params.w_acc));
        q[iv] += we * e.q[0];
        q[iu] += we * e.q[1];
        if k + 1 < n_steps {
            let iu2 = idx_u(k + 1);
            p.push((iu, iu, 2.0 * params.w_jerk));
            p.push((iu2, iu2, 2.0 * params.w_jerk));
            p.push((iu, iu2, -2.0 * params.w_jerk));
            p.push((iu2, iu, -2.0 * params.w_jerk));
        }
    }
    let constant = we * e.r * n_steps as f64;

    let mut b = Builder { triplets: Vec::new(), l: Vec::new(), u: Vec::new(), rows: Vec::new() };
    b.row(RowKind::InitialPosition, &[(idx_s(0), 1.0)], 0.0, 0.0);
    b.row(RowKind::InitialVelocity, &[(idx_v(0), 1.0)], v0, v0);

    let braking = braking_profile(v0, params);
    let mut infeasible = None;

    // Headway against a constant-velocity leader.
    let headway_rhs = |k: usize, f: &SurroundingVehicle| -> f64 {
        f.s - origin + f.v * k as f64 * dt - params.standstill_gap - params.vehicle_length
    };

    let windows = light.filter(|l| l.s_tl > ego.s).map(|l| (l, imposed_windows(l, decision, ego, params)));
    let mut hold_until = 0usize;
    let mut hold_bound = f64::INFINITY;
    let mut pass_from = usize::MAX;
    let mut pass_bound = f64::NEG_INFINITY;
    let mut base_windows = None;
    if let Some((l, w)) = windows {
        match w {
            Err(err) => infeasible = Some(format!("{decision}: {err}")),
            Ok(w) => {
                base_windows = Some(w.base);
                let line = l.s_tl - origin;
                if let Some(hold) = w.hold {
                    hold_until = last_step_within(hold, dt, n_steps);
                    hold_bound = line - params.stop_margin;
                    let stop_point = braking.last().map(|p| p.0).unwrap_or(0.0);
                    if stop_point > hold_bound {
                        if stop_point < line - 0.1 {
                            hold_bound = stop_point + 1e-6;
                        } else {
                            infeasible = Some(format!("{decision}: cannot stop before the line"));
                        }
                    }
                }
                if let Some(by) = w.pass_by {
                    let k = (by / dt + 1e-9).floor().max(0.0) as usize;
                    if k <= n_steps {
                        pass_from = k.max(1);
                        pass_bound = line + params.stop_margin;
                        let reach = accel_profile(v0, params);
                        if reach[pass_from] < pass_bound {
                            infeasible = Some(format!(
                                "{decision}: line unreachable by {:.1} s (max reach {:.1} m of {:.1} m)",
                                by, reach[pass_from], pass_bound
                            ));
                        }
                    }
                }
            }
        }
    }

    for k in 0..n_steps {
        let (is, iv, iu) = (idx_s(k), idx_v(k), idx_u(k));
        let (is2, iv2) = (idx_s(k + 1), idx_v(k + 1));
        b.row(RowKind::InputBox(k), &[(iu, 1.0)], params.u_min, params.u_max);
        b.row(
            RowKind::PositionDynamics(k),
            &[(is, 1.0), (iv, dt), (iu, 0.5 * dt * dt), (is2, -1.0)],
            0.0,
            0.0,
        );
        b.row(RowKind::VelocityDynamics(k), &[(iv, 1.0), (iu, dt), (iv2, -1.0)], 0.0, 0.0);
        let k1 = k + 1;
        b.row(RowKind::VelocityBox(k1), &[(iv2, 1.0)], params.v_min, params.v_max);
        if let Some(f) = front {
            let nominal = headway_rhs(k1, f);
            let (bs, bv) = braking[k1];
            let floor = bs + params.headway_time * bv;
            let rhs = if floor > nominal { floor + 1e-6 } else { nominal };
            b.row(RowKind::Headway(k1), &[(is2, 1.0), (iv2, params.headway_time)], f64::NEG_INFINITY, rhs);
        }
        if k1 <= hold_until && hold_bound.is_finite() {
            b.row(RowKind::Guard(k1), &[(is2, 1.0)], f64::NEG_INFINITY, hold_bound);
        }
        if k1 >= pass_from {
            b.row(RowKind::Pass(k1), &[(is2, 1.0)], pass_bound, f64::INFINITY);
        }
    }

    let m = b.rows.len();
    OcpProblem {
        qp: QpData {
            p: CsrMatrix::from_triplets(n, n, &p),
            q,
            a: CsrMatrix::from_triplets(m, n, &b.triplets),
            l: b.l,
            u: b.u,
        },
        rows: b.rows,
        horizon: n_steps,
        dt,
        origin,
        constant,
        windows: base_windows,
        infeasible,
    }
}

/// Largest violation of the discrete dynamics by a trajectory.
pub fn dynamics_residual(s: &[f64], v: &[f64], u: &[f64], dt: f64) -> f64 {
    (0..u.len())
        .map(|k| {
            let rs = s[k] + dt * v[k] + 0.5 * dt * dt * u[k] - s[k + 1];
            let rv = v[k] + dt * u[k] - v[k + 1];
            rs.abs().max(rv.abs())
        })
        .fold(0.0, f64::max)
}

pub fn solver_settings(tol: f64) -> Settings {
    Settings { eps_abs: tol, eps_rel: tol, ..Settings::default() }
}

pub fn solve_ocp(problem: &OcpProblem, tol: f64, warm: Option<&WarmStart>) -> QpSolution {
    if problem.infeasible.is_some() {
        return QpSolution::failed(OcpStatus::Infeasible, problem.dt);
    }
    let sol = qp::solve(&problem.qp, &solver_settings(tol), warm);
    let status = match sol.status {
        Status::Optimal => OcpStatus::Optimal,
        Status::PrimalInfeasible => OcpStatus::Infeasible,
        Status::MaxIterations => OcpStatus::MaxIterations,
        Status::NumericalError => OcpStatus::NumericalError,
    };
    if status == OcpStatus::NumericalError {
        return QpSolution::failed(status, problem.dt);
    }
    let n_steps = problem.horizon;
    let s: Vec<f64> = (0..=n_steps).map(|k| sol.x[idx_s(k)] + problem.origin).collect();
    let v: Vec<f64> = (0..=n_steps).map(|k| sol.x[idx_v(k)]).collect();
    let u: Vec<f64> = (0..n_steps).map(|k| sol.x[idx_u(k)]).collect();
    let rel: Vec<f64> = s.iter().map(|x| x - problem.origin).collect();
    let dyn_res = dynamics_residual(&rel, &v, &u, problem.dt);
    let status = if status == OcpStatus::Optimal && dyn_res > 1e-6 { OcpStatus::MaxIterations } else { status };
    QpSolution {
        status,
        objective: sol.objective + problem.constant,
        iterations: sol.iterations,
        primal_residual: sol.primal_residual,
        dual_residual: sol.dual_residual,
        dynamics_residual: dyn_res,
        dt: problem.dt,
        s,
        v,
        u,
        raw: Some(sol),
    }
}

/// Time and velocity at which the trajectory first reaches `s_line`,
/// linearly interpolated between the bracketing steps.
pub fn crossing(sol: &QpSolution, s_line: f64) -> Option<(f64, f64)> {
    if sol.s.first().is_some_and(|&s0| s0 >= s_line) {
        return Some((0.0, sol.v[0]));
    }
    sol.s.windows(2).enumerate().find(|(_, w)| w[0] < s_line && w[1] >= s_line).map(|(k, w)| {
        let frac = (s_line - w[0]) / (w[1] - w[0]);
        let t = (k as f64 + frac) * sol.dt;
        let v = sol.v[k] + frac * (sol.v[k + 1] - sol.v[k]);
        (t, v)
    })
}

/// Passing velocity at the first light, clamped to the graph grid. Falls
/// back to the terminal velocity when the line is not crossed.
pub fn extract_pass_velocity(sol: &QpSolution, s_tl: f64) -> f64 {
    let v = match crossing(sol, s_tl) {
        Some((_, v)) => v,
        None => sol.v.last().copied().unwrap_or(GRID_MIN),
    };
    v.clamp(GRID_MIN, GRID_MAX)
}
