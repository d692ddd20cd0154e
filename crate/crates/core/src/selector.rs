//! Energy-aware lane selector: solve the OCP for each pass/lane candidate,
//! add the weighted graph cost-to-go over the following lights, and keep
//! the cheapest feasible candidate.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::graph::{build_graph, shortest_path, GraphDiagnostic, GRID_MAX, GRID_MIN};
use crate::ocp::{braking_profile, build_ocp, crossing, solve_ocp, OcpParams, OcpStatus, QpSolution, RowKind};
use crate::qp::WarmStart;
use crate::world::{
    front_vehicle, rear_vehicle, EgoState, Lane, LaneDecision, ObservationSet, PassFlag, SpatEntry, SpatHorizon,
    SurroundingVehicle,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GapParams {
    pub standstill_gap: f64,
    pub headway_time: f64,
    pub vehicle_length: f64,
}

impl Default for GapParams {
    fn default() -> Self {
        Self { standstill_gap: 6.0, headway_time: 1.5, vehicle_length: 4.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorParams {
    pub ocp: OcpParams,
    /// Weight converting the graph's squared-velocity cost to OCP units.
    pub w_graph: f64,
    /// Solver residual tolerance.
    pub tol: f64,
    /// Totals within this distance of the best are treated as tied.
    pub tie_tolerance: f64,
    pub gap: GapParams,
}

impl Default for SelectorParams {
    fn default() -> Self {
        let ocp = OcpParams::default();
        Self { w_graph: default_graph_weight(&ocp, 2100.0), ocp, tol: 1e-4, tie_tolerance: 1e-6, gap: GapParams::default() }
    }
}

/// Kinetic energy `1/2 m v^2` expressed on the OCP's per-step power scale.
pub fn default_graph_weight(ocp: &OcpParams, mass: f64) -> f64 {
    0.5 * mass * ocp.w_energy / ocp.dt
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Ok,
    Infeasible,
    SolverFailed,
    /// Lane change unsafe or not permitted.
    Excluded,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CandidateEvaluation {
    pub decision: LaneDecision,
    pub status: CandidateStatus,
    pub ocp_cost: f64,
    pub graph_cost: f64,
    pub total: f64,
    pub v_pass: f64,
    /// Predicted time (s from now) at the first stop line.
    pub t_first_light: Option<f64>,
    pub iterations: usize,
    pub note: Option<String>,
    #[serde(skip)]
    pub solution: Option<QpSolution>,
    #[serde(skip)]
    pub graph: Option<GraphDiagnostic>,
}

impl CandidateEvaluation {
    fn rejected(decision: LaneDecision, status: CandidateStatus, note: String) -> Self {
        Self {
            decision,
            status,
            ocp_cost: f64::INFINITY,
            graph_cost: f64::INFINITY,
            total: f64::INFINITY,
            v_pass: f64::NAN,
            t_first_light: None,
            iterations: 0,
            note: Some(note),
            solution: None,
            graph: None,
        }
    }

    /// Predicted `(s, v, u)` sequence of the candidate's plan.
    pub fn trajectory(&self) -> Vec<(f64, f64, f64)> {
        match &self.solution {
            Some(sol) => (0..sol.u.len()).map(|k| (sol.s[k], sol.v[k], sol.u[k])).collect(),
            None => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectorOutput {
    pub decision: LaneDecision,
    /// Reference velocity per planner step over the horizon.
    pub v_ref: Vec<f64>,
    /// Planned acceleration per planner step.
    pub u_ref: Vec<f64>,
    pub dt: f64,
    pub evaluations: Vec<CandidateEvaluation>,
    /// All candidates failed; the plan is a maximum-deceleration stop.
    pub degraded: bool,
    #[serde(skip)]
    pub wall_time: f64,
}

impl SelectorOutput {
    pub fn winner(&self) -> Option<&CandidateEvaluation> {
        self.evaluations.iter().find(|e| e.decision == self.decision && e.status == CandidateStatus::Ok)
    }
}

/// Lanes the selector may choose from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LaneRestriction {
    Any,
    CurrentOnly,
}

/// True iff changing into `target` leaves the required front and rear gaps
/// (inclusive thresholds).
pub fn lane_change_feasible(obs: &ObservationSet, ego: &EgoState, target: Lane, gap: &GapParams) -> bool {
    debug_assert_ne!(target, ego.lane);
    let probe = EgoState { lane: target, ..*ego };
    let front_ok = front_vehicle(obs, &probe, target)
        .map(|f| f.s - ego.s - gap.vehicle_length >= gap.standstill_gap + gap.headway_time * ego.v)
        .unwrap_or(true);
    let rear_ok = rear_vehicle(obs, &probe, target)
        .map(|r| ego.s - r.s - gap.vehicle_length >= gap.standstill_gap + gap.headway_time * r.v)
        .unwrap_or(true);
    front_ok && rear_ok
}

/// Fires at fixed multiples of the replan period on a stepped clock.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReplanSchedule {
    steps_per_replan: u64,
}

impl ReplanSchedule {
    /// `period` must be a positive multiple of `sim_step` (to 1e-9).
    pub fn new(period: f64, sim_step: f64) -> crate::Result<Self> {
        let ratio = period / sim_step;
        if !(period > 0.0 && sim_step > 0.0) || (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(crate::Error::InvalidState(format!(
                "replan period {period} is not a positive multiple of the step {sim_step}"
            )));
        }
        Ok(Self { steps_per_replan: ratio.round() as u64 })
    }

    pub fn steps_per_replan(&self) -> u64 {
        self.steps_per_replan
    }

    pub fn fires(&self, step: u64) -> bool {
        step % self.steps_per_replan == 0
    }
}

/// Previous solution of a candidate, kept for warm starting.
#[derive(Clone, Debug)]
struct CachedSolve {
    clock: f64,
    solution: QpSolution,
    duals: HashMap<RowKind, f64>,
}

/// Per-candidate warm-start cache.
#[derive(Clone, Debug, Default)]
pub struct WarmCache {
    entries: HashMap<LaneDecision, CachedSolve>,
}

impl WarmCache {
    pub fn clear(&mut self) {
        self.entries.clear();
    }

    fn warm_start(&self, decision: LaneDecision, clock: f64, origin: f64, rows: &[RowKind]) -> Option<WarmStart> {
        let prev = self.entries.get(&decision)?;
        let elapsed = clock - prev.clock;
        let mut ws = prev.solution.shifted_warm_start(elapsed, origin)?;
        let shift = (elapsed / prev.solution.dt).round().max(0.0) as usize;
        ws.y = rows.iter().map(|r| prev.duals.get(&shift_row(*r, shift)).copied().unwrap_or(0.0)).collect();
        Some(ws)
    }

    fn store(&mut self, decision: LaneDecision, clock: f64, solution: &QpSolution, rows: &[RowKind]) {
        let Some(raw) = &solution.raw else { return };
        let duals = rows.iter().copied().zip(raw.y.iter().copied()).collect();
        self.entries.insert(decision, CachedSolve { clock, solution: solution.clone(), duals });
    }
}

fn shift_row(row: RowKind, by: usize) -> RowKind {
    use RowKind::*;
    match row {
        InitialPosition | InitialVelocity => row,
        PositionDynamics(k) => PositionDynamics(k + by),
        VelocityDynamics(k) => VelocityDynamics(k + by),
        VelocityBox(k) => VelocityBox(k + by),
        InputBox(k) => InputBox(k + by),
        Headway(k) => Headway(k + by),
        Guard(k) => Guard(k + by),
        Pass(k) => Pass(k + by),
    }
}

/// Stateful selector holding per-candidate warm starts across replans.
#[derive(Clone, Debug, Default)]
pub struct Selector {
    pub params: SelectorParams,
    cache: WarmCache,
}

impl Selector {
    pub fn new(params: SelectorParams) -> Self {
        Self { params, cache: WarmCache::default() }
    }

    pub fn select(
        &mut self,
        clock: f64,
        ego: &EgoState,
        obs: &ObservationSet,
        lights: &[SpatEntry],
        restriction: LaneRestriction,
    ) -> SelectorOutput {
        select_with_cache(clock, ego, obs, lights, &self.params, restriction, Some(&mut self.cache))
    }
}

/// Stateless selection over the full SPaT horizon.
pub fn select_lane(ego: &EgoState, obs: &ObservationSet, spat: &SpatHorizon, params: &SelectorParams) -> SelectorOutput {
    select_with_cache(0.0, ego, obs, spat.entries(), params, LaneRestriction::Any, None)
}

pub fn select_with_cache(
    clock: f64,
    ego: &EgoState,
    obs: &ObservationSet,
    lights: &[SpatEntry],
    params: &SelectorParams,
    restriction: LaneRestriction,
    mut cache: Option<&mut WarmCache>,
) -> SelectorOutput {
    let started = Instant::now();
    let lights: Vec<SpatEntry> = lights.iter().copied().filter(|l| l.s_tl > ego.s).collect();
    // Identical problems (same pass flag, same leader) are solved once.
    let mut solved: Vec<(PassFlag, Option<SurroundingVehicle>, CandidateEvaluation)> = Vec::new();
    let mut evaluations = Vec::with_capacity(4);
    for decision in LaneDecision::ALL {
        let lane = decision.lane();
        if lane != ego.lane {
            if restriction == LaneRestriction::CurrentOnly {
                evaluations.push(CandidateEvaluation::rejected(decision, CandidateStatus::Excluded, "lane changes disabled".into()));
                continue;
            }
            if !lane_change_feasible(obs, ego, lane, &params.gap) {
                evaluations.push(CandidateEvaluation::rejected(decision, CandidateStatus::Excluded, "target-lane gap rejected".into()));
                continue;
            }
        }
        let probe = EgoState { lane, ..*ego };
        let front = front_vehicle(obs, &probe, lane);
        if let Some((_, _, done)) = solved.iter().find(|(flag, f, _)| *flag == decision.pass_flag() && *f == front) {
            evaluations.push(CandidateEvaluation { decision, ..done.clone() });
            continue;
        }
        let eval = evaluate(clock, &probe, decision, &lights, front.as_ref(), params, cache.as_deref_mut());
        solved.push((decision.pass_flag(), front, eval.clone()));
        evaluations.push(eval);
    }

    let degraded = evaluations.iter().all(|e| e.status != CandidateStatus::Ok);
    let decision = if degraded {
        LaneDecision::new(PassFlag::NonPass, ego.lane)
    } else {
        choose(&evaluations, ego.lane, params.tie_tolerance)
    };
    let (v_ref, u_ref) = match evaluations.iter().find(|e| e.decision == decision).and_then(|e| e.solution.as_ref()) {
        Some(sol) if !degraded => (sol.v[1..].to_vec(), sol.u.clone()),
        _ => fallback_profile(ego.v, &params.ocp),
    };
    SelectorOutput {
        decision,
        v_ref,
        u_ref,
        dt: params.ocp.dt,
        evaluations,
        degraded,
        wall_time: started.elapsed().as_secs_f64(),
    }
}

/// Maximum-deceleration stop, as per-step velocities and accelerations.
pub fn fallback_profile(v0: f64, ocp: &OcpParams) -> (Vec<f64>, Vec<f64>) {
    let prof = braking_profile(v0.clamp(ocp.v_min, ocp.v_max), ocp);
    let v: Vec<f64> = prof[1..].iter().map(|p| p.1).collect();
    let u = prof.windows(2).map(|w| (w[1].1 - w[0].1) / ocp.dt).collect();
    (v, u)
}

/// Argmin over feasible totals; ties prefer the current lane, then PASS.
pub fn choose(evaluations: &[CandidateEvaluation], current: Lane, tie_tolerance: f64) -> LaneDecision {
    let ok = || evaluations.iter().filter(|e| e.status == CandidateStatus::Ok);
    let best = ok().map(|e| e.total).fold(f64::INFINITY, f64::min);
    let tol = tie_tolerance * best.abs().max(1.0);
    ok().filter(|e| e.total <= best + tol)
        .min_by_key(|e| (e.decision.lane() != current, !e.decision.is_pass(), e.decision as u8))
        .map(|e| e.decision)
        .expect("at least one feasible candidate")
}

fn evaluate(
    clock: f64,
    ego: &EgoState,
    decision: LaneDecision,
    lights: &[SpatEntry],
    front: Option<&SurroundingVehicle>,
    params: &SelectorParams,
    cache: Option<&mut WarmCache>,
) -> CandidateEvaluation {
    let first = lights.first();
    let problem = build_ocp(ego, decision, first, front, &params.ocp);
    if let Some(reason) = &problem.infeasible {
        return CandidateEvaluation::rejected(decision, CandidateStatus::Infeasible, reason.clone());
    }
    let warm = cache.as_ref().and_then(|c| c.warm_start(decision, clock, problem.origin, &problem.rows));
    let sol = solve_ocp(&problem, params.tol, warm.as_ref());
    match sol.status {
        OcpStatus::Optimal => {}
        OcpStatus::Infeasible => {
            return CandidateEvaluation::rejected(decision, CandidateStatus::Infeasible, "solver certified infeasibility".into())
        }
        other => {
            return CandidateEvaluation::rejected(decision, CandidateStatus::SolverFailed, format!("solver stopped: {other:?}"))
        }
    }
    if let Some(c) = cache {
        c.store(decision, clock, &sol, &problem.rows);
    }

    let (v_pass, t_first, graph_cost, graph) = match first {
        None => (sol.v.last().copied().unwrap_or(0.0).clamp(GRID_MIN, GRID_MAX), None, 0.0, None),
        Some(light) => {
            let horizon_t = params.ocp.horizon_time();
            let (t1, v_raw) = crossing(&sol, light.s_tl).unwrap_or_else(|| {
                let v_end = sol.v.last().copied().unwrap_or(0.0);
                let s_end = sol.s.last().copied().unwrap_or(ego.s);
                let v_seed = v_end.clamp(GRID_MIN, GRID_MAX);
                (horizon_t + (light.s_tl - s_end).max(0.0) / v_seed, v_end)
            });
            let v_pass = v_raw.clamp(GRID_MIN, GRID_MAX);
            match build_graph(v_pass, &SpatHorizon::new(lights.to_vec()).expect("filtered lights stay ordered"), t1) {
                Ok(g) => {
                    let path = shortest_path(&g);
                    (v_pass, Some(t1), path.cost, Some(GraphDiagnostic::new(&g, &path)))
                }
                Err(err) => {
                    return CandidateEvaluation::rejected(decision, CandidateStatus::SolverFailed, err.to_string())
                }
            }
        }
    };
    CandidateEvaluation {
        decision,
        status: CandidateStatus::Ok,
        ocp_cost: sol.objective,
        graph_cost,
        total: sol.objective + params.w_graph * graph_cost,
        v_pass,
        t_first_light: t_first,
        iterations: sol.iterations,
        note: None,
        solution: Some(sol),
        graph,
    }
}
