//! Deterministic closed-loop simulation on a ring route.
//!
//! The ego drives `laps` laps (cumulative arclength), NPCs circulate on the
//! ring under IDM and obey the signals, and the ego follows one of three
//! policies: the eco lane selector, the same planner restricted to its lane,
//! or a human-like IDM driver that overtakes slow leaders. Collisions and
//! red-light crossings by the ego abort the run.

use serde::{Deserialize, Serialize};

use crate::energy::PowerModel;
use crate::graph::GraphDiagnostic;
use crate::ocp::OcpParams;
use crate::scenario::{IdmParams, Meter, ScenarioConfig};
use crate::selector::{
    lane_change_feasible, CandidateEvaluation, LaneRestriction, ReplanSchedule, Selector, SelectorOutput,
};
use crate::signal::Phase;
use crate::world::{front_vehicle, observe, EgoState, Lane, LaneDecision, ObservationSet, SpatEntry, SurroundingVehicle};
use crate::{Error, Result};

/// Speed below which the vehicle counts as stopped (m/s).
pub const STOP_SPEED: f64 = 0.3;
/// Minimum duration of a stop (s).
pub const STOP_MIN_DURATION: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DriverPolicy {
    #[serde(rename = "ECO_LANE")]
    EcoLane,
    #[serde(rename = "ECO_KEEP")]
    EcoKeep,
    #[serde(rename = "HUMAN")]
    Human,
}

impl DriverPolicy {
    pub const ALL: [DriverPolicy; 3] = [DriverPolicy::EcoLane, DriverPolicy::EcoKeep, DriverPolicy::Human];

    pub fn label(self) -> &'static str {
        match self {
            DriverPolicy::EcoLane => "ECO_LANE",
            DriverPolicy::EcoKeep => "ECO_KEEP",
            DriverPolicy::Human => "HUMAN",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            DriverPolicy::EcoLane => "eco-lane",
            DriverPolicy::EcoKeep => "eco-keep",
            DriverPolicy::Human => "human",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Npc {
    pub id: u32,
    /// Cumulative arclength; the ring position is `s mod route_length`.
    pub s: f64,
    pub v: f64,
    pub lane: Lane,
    pub desired_v: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LaneChange {
    pub from: Lane,
    pub to: Lane,
    pub remaining: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Accumulators {
    pub motion_energy: f64,
    pub aux_energy: f64,
    pub stops: usize,
    pub lane_changes: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorldState {
    pub clock: f64,
    pub step: u64,
    pub ego: EgoState,
    pub lane_change: Option<LaneChange>,
    pub npcs: Vec<Npc>,
    /// Current SPaT of every light on the ring, at ring positions.
    pub lights: Vec<SpatEntry>,
    pub acc: Accumulators,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub trip_time: f64,
    pub motion_energy: f64,
    pub total_energy: f64,
    pub stops: usize,
    pub lane_changes: usize,
    pub mean_speed: f64,
    pub distance: f64,
    pub replans: usize,
    pub degraded_replans: usize,
    /// Smallest same-lane bumper gap between ego and any NPC (m); `None`
    /// if no NPC ever shared the ego's lane.
    pub min_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventRecord {
    pub t: f64,
    pub s: f64,
    pub v: f64,
    pub a: f64,
    pub lane: Lane,
    pub decision: Option<LaneDecision>,
    pub next_phase: Option<Phase>,
    pub next_t_remaining: f64,
    #[serde(rename = "energy_Wh_cum")]
    pub energy_wh_cum: f64,
}

pub const EVENT_HEADER: &str = "t,s,v,a,lane,decision,next_phase,next_t_remaining,energy_Wh_cum";

impl EventRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{:.1},{:.4},{:.4},{:.4},{},{},{},{:.3},{:.6}",
            self.t,
            self.s,
            self.v,
            self.a,
            self.lane,
            self.decision.map(|d| d.label()).unwrap_or("none"),
            self.next_phase.map(|p| p.label()).unwrap_or("none"),
            self.next_t_remaining,
            self.energy_wh_cum
        )
    }
}

/// One stop-line passage of the ego.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StopLineCrossing {
    pub light: usize,
    pub s_line: f64,
    pub time: f64,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExplainRecord {
    pub t: f64,
    pub s: f64,
    pub v: f64,
    pub lane: Lane,
    pub decision: LaneDecision,
    pub degraded: bool,
    pub candidates: Vec<CandidateEvaluation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphDiagnostic>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SimOptions {
    /// Record a candidate table per replan.
    pub explain: bool,
    /// Also record the winning candidate's graph path.
    pub explain_graph: bool,
    /// Deliberately unsafe ego (full throttle, no checks); for testing the
    /// failure path.
    pub broken_policy: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub policy: DriverPolicy,
    pub metrics: Metrics,
    pub events: Vec<EventRecord>,
    pub explain: Vec<ExplainRecord>,
    pub crossings: Vec<StopLineCrossing>,
}

/// Active reference: planner-step velocities (starting at the plan time)
/// and accelerations.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub start: f64,
    pub dt: f64,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
}

impl Plan {
    pub fn constant(start: f64, v: f64, dt: f64, steps: usize) -> Self {
        Self { start, dt, v: vec![v; steps + 1], u: vec![0.0; steps] }
    }

    fn from_output(start: f64, v0: f64, out: &SelectorOutput) -> Self {
        let mut v = Vec::with_capacity(out.v_ref.len() + 1);
        v.push(v0);
        v.extend_from_slice(&out.v_ref);
        Self { start, dt: out.dt, v, u: out.u_ref.clone() }
    }

    /// Reference velocity and feed-forward acceleration at `clock`.
    pub fn at(&self, clock: f64) -> (f64, f64) {
        let tau = (clock - self.start).max(0.0) / self.dt;
        let n = self.u.len();
        if n == 0 {
            return (self.v.last().copied().unwrap_or(0.0), 0.0);
        }
        let k = (tau.floor() as usize).min(n - 1);
        let frac = (tau - k as f64).clamp(0.0, 1.0);
        (self.v[k] + frac * (self.v[k + 1] - self.v[k]), self.u[k])
    }
}

/// IDM acceleration toward `v_des`, with an optional `(gap, leader speed)`.
pub fn idm_accel(p: &IdmParams, v: f64, v_des: f64, leader: Option<(f64, f64)>) -> f64 {
    let free = 1.0 - (v / v_des.max(1e-3)).powi(4);
    let interaction = leader.map_or(0.0, |(gap, v_lead)| {
        let s_star = p.min_gap + (v * p.time_headway + v * (v - v_lead) / (2.0 * (p.max_accel * p.comfort_decel).sqrt())).max(0.0);
        (s_star / gap.max(1e-2)).powi(2)
    });
    (p.max_accel * (free - interaction)).clamp(-p.max_decel, p.max_accel)
}

/// Counts maximal runs of `v < 0.3 m/s` lasting at least 1 s.
pub fn stop_counter(velocities: &[f64], dt: f64) -> usize {
    let min_len = ((STOP_MIN_DURATION / dt - 1e-9).ceil() as usize).max(1);
    let mut count = 0;
    let mut run = 0usize;
    for &v in velocities.iter().chain(std::iter::once(&f64::INFINITY)) {
        if v < STOP_SPEED {
            run += 1;
        } else {
            if run >= min_len {
                count += 1;
            }
            run = 0;
        }
    }
    count
}

/// Exact constant-acceleration step that stops at zero speed instead of
/// reversing. Returns the new position, velocity and effective acceleration.
fn integrate(s: f64, v: f64, a: f64, dt: f64) -> (f64, f64, f64) {
    let v_new = v + a * dt;
    if v_new >= 0.0 {
        (s + v * dt + 0.5 * a * dt * dt, v_new, a)
    } else {
        let t_stop = v / -a;
        (s + 0.5 * v * t_stop, 0.0, -v / dt)
    }
}

/// Battery meter used for the run.
enum EnergyMeter {
    Physics(crate::energy::PowertrainModel),
    Quadratic(crate::energy::EnergyParams),
}

impl EnergyMeter {
    fn power(&self, v: f64, a: f64) -> f64 {
        match self {
            EnergyMeter::Physics(m) => m.power(v, a),
            EnergyMeter::Quadratic(p) => p.power(v, a),
        }
    }
}

pub struct Simulation {
    config: ScenarioConfig,
    policy: DriverPolicy,
    options: SimOptions,
    world: WorldState,
    selector: Selector,
    schedule: ReplanSchedule,
    meter: EnergyMeter,
    plan: Option<Plan>,
    frozen_plan: bool,
    decision: Option<LaneDecision>,
    events: Vec<EventRecord>,
    explain: Vec<ExplainRecord>,
    crossings: Vec<StopLineCrossing>,
    velocities: Vec<f64>,
    replans: usize,
    degraded: usize,
    min_gap: f64,
    finish_time: Option<f64>,
    stop_run: usize,
    stop_len: usize,
}

const EGO_LENGTH: f64 = 4.5;

impl Simulation {
    pub fn new(config: &ScenarioConfig, policy: DriverPolicy, options: SimOptions) -> Result<Self> {
        config.validate()?;
        let config = config.realize(config.rng_seed);
        let schedule = ReplanSchedule::new(config.replan_period, config.sim_step)?;
        let ego = EgoState::new(config.ego.s, config.ego.v, config.ego.lane)?;
        let npcs = config
            .npc_spawn
            .iter()
            .enumerate()
            .map(|(i, n)| Npc { id: i as u32 + 1, s: n.s, v: n.v, lane: n.lane, desired_v: n.desired_v })
            .collect();
        let lights = config.lights.iter().map(|l| l.entry_at(0.0, l.position)).collect();
        let meter = match config.meter {
            Meter::Physics => EnergyMeter::Physics(config.powertrain),
            Meter::Quadratic => EnergyMeter::Quadratic(config.planner.ocp.energy),
        };
        let mut selector_params = config.planner;
        selector_params.ocp.v_max = selector_params.ocp.v_max.min(config.speed_limit);
        Ok(Self {
            selector: Selector::new(selector_params),
            policy,
            options,
            world: WorldState { clock: 0.0, step: 0, ego, lane_change: None, npcs, lights, acc: Accumulators::default() },
            schedule,
            meter,
            plan: None,
            frozen_plan: false,
            decision: None,
            events: Vec::new(),
            explain: Vec::new(),
            crossings: Vec::new(),
            velocities: Vec::new(),
            replans: 0,
            degraded: 0,
            min_gap: f64::INFINITY,
            finish_time: None,
            stop_run: 0,
            stop_len: ((STOP_MIN_DURATION / config.sim_step - 1e-9).ceil() as usize).max(1),
            config,
        })
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn finished(&self) -> bool {
        self.finish_time.is_some()
    }

    /// Installs a reference; `freeze` disables replanning.
    pub fn install_plan(&mut self, plan: Plan, freeze: bool) {
        self.plan = Some(plan);
        self.frozen_plan = freeze;
    }

    fn lap(&self) -> f64 {
        self.config.route_length
    }

    fn ring(&self, s: f64) -> f64 {
        s.rem_euclid(self.lap())
    }

    /// Signed ring distance from `from` to `to`, in `[-L/2, L/2)`.
    fn rel(&self, from: f64, to: f64) -> f64 {
        let l = self.lap();
        (to - from + 0.5 * l).rem_euclid(l) - 0.5 * l
    }

    /// NPCs as seen from the ego, unwrapped around the ego position.
    pub fn surrounding(&self) -> Vec<SurroundingVehicle> {
        let ego_ring = self.ring(self.world.ego.s);
        self.world
            .npcs
            .iter()
            .map(|n| SurroundingVehicle { id: n.id, s: self.world.ego.s + self.rel(ego_ring, self.ring(n.s)), v: n.v, lane: n.lane })
            .collect()
    }

    pub fn observation(&self) -> ObservationSet {
        observe(&self.surrounding(), &self.world.ego, self.config.detection_radius)
    }

    /// Upcoming lights ahead of the ego (cumulative positions) until the
    /// finish, at most `limit`, evaluated at the current clock.
    pub fn lights_ahead(&self, limit: usize) -> Vec<(usize, SpatEntry)> {
        let l = self.lap();
        let ego_s = self.world.ego.s;
        let total = self.config.route_total();
        let mut out = Vec::new();
        let mut lap = (ego_s / l).floor();
        while out.len() < limit && lap * l < total {
            for (i, seed) in self.config.lights.iter().enumerate() {
                let s_abs = lap * l + seed.position;
                if s_abs > ego_s && s_abs < total && out.len() < limit {
                    out.push((i, SpatEntry { s_tl: s_abs, ..self.world.lights[i] }));
                }
            }
            lap += 1.0;
        }
        out
    }

    fn replan(&mut self) {
        let ego = self.world.ego;
        let obs = self.observation();
        let lights: Vec<SpatEntry> = self.lights_ahead(self.config.spat_lights).into_iter().map(|(_, e)| e).collect();
        let restriction = match (self.policy, self.world.lane_change) {
            (DriverPolicy::EcoLane, None) => LaneRestriction::Any,
            _ => LaneRestriction::CurrentOnly,
        };
        let out = self.selector.select(self.world.clock, &ego, &obs, &lights, restriction);
        self.replans += 1;
        if out.degraded {
            self.degraded += 1;
        }
        if self.options.explain {
            self.explain.push(ExplainRecord {
                t: self.world.clock,
                s: ego.s,
                v: ego.v,
                lane: ego.lane,
                decision: out.decision,
                degraded: out.degraded,
                candidates: out.evaluations.clone(),
                graph: if self.options.explain_graph { out.winner().and_then(|w| w.graph.clone()) } else { None },
            });
        }
        self.plan = Some(Plan::from_output(self.world.clock, ego.v, &out));
        self.decision = Some(out.decision);
        if out.decision.lane() != ego.lane && self.world.lane_change.is_none() {
            self.commit_lane_change(out.decision.lane());
        }
    }

    fn commit_lane_change(&mut self, to: Lane) {
        let from = self.world.ego.lane;
        self.world.ego.lane = to;
        self.world.lane_change = Some(LaneChange { from, to, remaining: self.config.lane_change_time });
        self.world.acc.lane_changes += 1;
    }

    /// Nearest vehicle ahead of ring position `s` in `lane` as `(gap, v)`,
    /// excluding NPC `skip`; includes the ego when `with_ego`.
    fn leader(&self, s_ring: f64, lane: Lane, skip: Option<u32>, with_ego: bool) -> Option<(f64, f64)> {
        let l = self.lap();
        let mut best: Option<(f64, f64)> = None;
        let mut consider = |pos: f64, v: f64| {
            let d = (self.ring(pos) - s_ring).rem_euclid(l);
            if d > 0.0 && best.is_none_or(|(g, _)| d - EGO_LENGTH < g) {
                best = Some((d - EGO_LENGTH, v));
            }
        };
        for n in &self.world.npcs {
            if n.lane == lane && Some(n.id) != skip {
                consider(n.s, n.v);
            }
        }
        if with_ego && self.world.ego.lane == lane {
            consider(self.world.ego.s, self.world.ego.v);
        }
        best
    }

    /// Virtual stop-line leader `(gap, 0)` for a driver at ring position
    /// `s_ring` with speed `v` who obeys the next light.
    fn signal_leader(&self, s_ring: f64, v: f64, p: &IdmParams) -> Option<(f64, f64)> {
        let l = self.lap();
        let (idx, dist) = self
            .config
            .lights
            .iter()
            .enumerate()
            .map(|(i, seed)| (i, (seed.position - s_ring).rem_euclid(l)))
            .filter(|&(_, d)| d > 0.0)
            .min_by(|a, b| a.1.total_cmp(&b.1))?;
        let entry = &self.world.lights[idx];
        let must_stop = match entry.phase {
            Phase::Green => false,
            Phase::Red => v * v / (2.0 * p.max_decel) < dist,
            Phase::Yellow => v * v / (2.0 * p.stop_decel) <= dist,
        };
        must_stop.then_some((dist, 0.0))
    }

    fn npc_accels(&self) -> Vec<f64> {
        let p = self.config.npc_idm;
        self.world
            .npcs
            .iter()
            .map(|n| {
                let ring = self.ring(n.s);
                let lead = self.leader(ring, n.lane, Some(n.id), true);
                let light = self.signal_leader(ring, n.v, &p);
                idm_accel(&p, n.v, n.desired_v, closest(lead, light))
            })
            .collect()
    }

    fn ego_accel(&mut self) -> f64 {
        let ego = self.world.ego;
        let ring = self.ring(ego.s);
        let ocp: &OcpParams = &self.selector.params.ocp;
        if self.options.broken_policy {
            return ocp.u_max;
        }
        match self.policy {
            DriverPolicy::Human => {
                let h = self.config.human;
                let lead = self.leader(ring, ego.lane, None, false);
                let light = self.signal_leader(ring, ego.v, &h.idm);
                idm_accel(&h.idm, ego.v, self.config.speed_limit, closest(lead, light))
            }
            DriverPolicy::EcoLane | DriverPolicy::EcoKeep => {
                let (v_ref, u_ff) = self.plan.as_ref().map_or((0.0, ocp.u_min), |p| p.at(self.world.clock));
                let track = (u_ff + self.config.tracking_gain * (v_ref - ego.v)).clamp(ocp.u_min, ocp.u_max);
                // Collision guard standing in for the lower-level planner.
                let guard = IdmParams { time_headway: 0.8, max_accel: ocp.u_max, comfort_decel: 3.0, ..self.config.npc_idm };
                let safe = self
                    .leader(ring, ego.lane, None, false)
                    .map_or(f64::INFINITY, |lead| idm_accel(&guard, ego.v, f64::INFINITY, Some(lead)));
                track.min(safe).max(-guard.max_decel)
            }
        }
    }

    fn human_overtake(&mut self) {
        if self.world.lane_change.is_some() {
            return;
        }
        let h = self.config.human;
        let ego = self.world.ego;
        let obs = self.observation();
        let Some(front) = front_vehicle(&obs, &ego, ego.lane) else { return };
        let gap = front.s - ego.s;
        if gap > h.overtake_lookahead || front.v > self.config.speed_limit - h.overtake_deficit {
            return;
        }
        let target = ego.lane.other();
        if !lane_change_feasible(&obs, &ego, target, &self.selector.params.gap) {
            return;
        }
        let probe = EgoState { lane: target, ..ego };
        let better = match front_vehicle(&obs, &probe, target) {
            None => true,
            Some(t) => t.v > front.v + 0.5 && t.s - ego.s > gap,
        };
        if better {
            self.commit_lane_change(target);
        }
    }

    /// Advances the world by one simulation step.
    pub fn step(&mut self) -> Result<()> {
        if self.finished() {
            return Ok(());
        }
        let dt = self.config.sim_step;
        let clock = self.world.clock;
        if self.schedule.fires(self.world.step) && !self.options.broken_policy {
            match self.policy {
                DriverPolicy::EcoLane | DriverPolicy::EcoKeep if !self.frozen_plan => self.replan(),
                DriverPolicy::Human => self.human_overtake(),
                _ => {}
            }
        }

        let a_ego = self.ego_accel();
        let a_npc = self.npc_accels();

        // Ego.
        let ego = self.world.ego;
        let (s_new, v_new, a_eff) = integrate(ego.s, ego.v, a_ego, dt);
        let power = self.meter.power(ego.v, a_eff);
        self.world.acc.motion_energy += power * dt / 3600.0;
        let next = self.lights_ahead(1).first().map(|(_, e)| *e);
        self.events.push(EventRecord {
            t: clock,
            s: ego.s,
            v: ego.v,
            a: a_eff,
            lane: ego.lane,
            decision: self.decision,
            next_phase: next.map(|e| e.phase),
            next_t_remaining: next.map_or(0.0, |e| e.t_remaining),
            energy_wh_cum: self.world.acc.motion_energy,
        });
        self.velocities.push(ego.v);
        self.world.acc.aux_energy += self.config.aux_power * dt / 3600.0;
        if ego.v < STOP_SPEED {
            self.stop_run += 1;
            if self.stop_run == self.stop_len {
                self.world.acc.stops += 1;
            }
        } else {
            self.stop_run = 0;
        }
        self.check_crossings(ego.s, s_new, clock, dt)?;
        self.world.ego.s = s_new;
        self.world.ego.v = v_new;
        self.world.acc.distance += s_new - ego.s;

        // NPCs.
        for (n, a) in self.world.npcs.iter_mut().zip(a_npc) {
            let (s, v, _) = integrate(n.s, n.v, a, dt);
            n.s = s;
            n.v = v;
        }

        // Clock, lights, lane change.
        self.world.step += 1;
        self.world.clock = self.world.step as f64 * dt;
        for (entry, seed) in self.world.lights.iter_mut().zip(&self.config.lights) {
            *entry = seed.entry_at(self.world.clock, seed.position);
        }
        if let Some(lc) = &mut self.world.lane_change {
            lc.remaining -= dt;
            if lc.remaining <= 1e-9 {
                self.world.lane_change = None;
            }
        }

        self.check_collisions()?;

        let total = self.config.route_total();
        if s_new >= total {
            let frac = if s_new > ego.s { (total - ego.s) / (s_new - ego.s) } else { 1.0 };
            self.finish_time = Some(clock + frac * dt);
        } else if self.world.clock > self.config.max_time {
            return Err(Error::RunFailure(format!(
                "watchdog: route not finished after {:.0} s (ego at {:.1} m of {:.1} m)",
                self.config.max_time, s_new, total
            )));
        }
        Ok(())
    }

    fn check_crossings(&mut self, s_old: f64, s_new: f64, clock: f64, dt: f64) -> Result<()> {
        if s_new <= s_old {
            return Ok(());
        }
        let l = self.lap();
        let total = self.config.route_total();
        let first_lap = (s_old / l).floor() as i64;
        let last_lap = (s_new / l).floor() as i64;
        for lap in first_lap..=last_lap {
            for (i, seed) in self.config.lights.iter().enumerate() {
                let s_line = lap as f64 * l + seed.position;
                if s_line > s_old && s_line <= s_new && s_line < total {
                    let time = clock + dt * (s_line - s_old) / (s_new - s_old);
                    let phase = seed.entry_at(time, s_line).phase;
                    self.crossings.push(StopLineCrossing { light: i, s_line, time, phase });
                    if phase == Phase::Red {
                        return Err(Error::RunFailure(format!(
                            "red-light violation: light {i} at {s_line:.1} m crossed at t = {time:.2} s"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_collisions(&mut self) -> Result<()> {
        let ego = self.world.ego;
        let ego_ring = self.ring(ego.s);
        for n in self.world.npcs.iter().filter(|n| n.lane == ego.lane) {
            let d = self.rel(ego_ring, self.ring(n.s));
            let gap = d.abs() - EGO_LENGTH;
            self.min_gap = self.min_gap.min(gap);
            if gap <= 0.0 {
                return Err(Error::RunFailure(format!(
                    "collision: ego at {:.2} m (lane {}) and vehicle {} at gap {gap:.2} m, t = {:.1} s",
                    ego.s, ego.lane, n.id, self.world.clock
                )));
            }
        }
        Ok(())
    }

    pub fn metrics(&self) -> Metrics {
        let trip_time = self.finish_time.unwrap_or(self.world.clock);
        let motion = self.world.acc.motion_energy;
        Metrics {
            trip_time,
            motion_energy: motion,
            total_energy: motion + self.config.aux_power * trip_time / 3600.0,
            stops: stop_counter(&self.velocities, self.config.sim_step),
            lane_changes: self.world.acc.lane_changes,
            mean_speed: if trip_time > 0.0 { self.world.acc.distance / trip_time } else { 0.0 },
            distance: self.world.acc.distance,
            replans: self.replans,
            degraded_replans: self.degraded,
            min_gap: self.min_gap.is_finite().then_some(self.min_gap),
        }
    }

    pub fn into_output(self) -> RunOutput {
        RunOutput {
            policy: self.policy,
            metrics: self.metrics(),
            events: self.events,
            explain: self.explain,
            crossings: self.crossings,
        }
    }
}

fn closest(a: Option<(f64, f64)>, b: Option<(f64, f64)>) -> Option<(f64, f64)> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if y.0 < x.0 { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    }
}

pub fn run_detailed(config: &ScenarioConfig, policy: DriverPolicy, options: SimOptions) -> Result<RunOutput> {
    let mut sim = Simulation::new(config, policy, options)?;
    while !sim.finished() {
        sim.step().map_err(|e| match e {
            Error::RunFailure(msg) => Error::RunFailure(format!("{} (seed {}): {msg}", policy.label(), sim.config.rng_seed)),
            other => other,
        })?;
    }
    Ok(sim.into_output())
}

pub fn run_scenario(config: &ScenarioConfig, policy: DriverPolicy) -> Result<Metrics> {
    run_detailed(config, policy, SimOptions::default()).map(|o| o.metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::trajectory_energy;
    use crate::scenario::{LightSeed, NpcSeed};

    fn empty_road(laps: u32) -> ScenarioConfig {
        ScenarioConfig { lights: Vec::new(), npc_spawn: Vec::new(), laps, ..ScenarioConfig::reference() }
    }

    #[test]
    fn stop_counter_rules() {
        assert_eq!(stop_counter(&[10.0; 100], 0.1), 0);
        let mut one = vec![5.0; 10];
        one.extend([0.0; 50]);
        one.extend([5.0; 10]);
        assert_eq!(stop_counter(&one, 0.1), 1);
        let mut dips = vec![5.0; 10];
        dips.extend([0.1; 4]);
        dips.extend([5.0; 10]);
        dips.extend([0.1; 4]);
        dips.extend([5.0; 3]);
        assert_eq!(stop_counter(&dips, 0.1), 0);
        assert_eq!(stop_counter(&[0.0; 10], 0.1), 1);
    }

    #[test]
    fn constant_reference_on_empty_road() {
        let mut cfg = empty_road(1);
        cfg.ego.v = 10.0;
        let mut sim = Simulation::new(&cfg, DriverPolicy::EcoLane, SimOptions::default()).unwrap();
        sim.install_plan(Plan::constant(0.0, 10.0, 0.5, 140), true);
        for k in 1..=20 {
            sim.step().unwrap();
            assert!((sim.world().ego.s - k as f64).abs() < 1e-9);
            assert_eq!(sim.world().ego.v, 10.0);
        }
        assert!(sim.events.iter().all(|e| e.a == 0.0));
    }

    #[test]
    fn idm_stops_behind_stopped_leader() {
        let p = IdmParams::default();
        let (mut s, mut v) = (0.0, 10.0);
        let leader_rear = 80.0;
        for _ in 0..2000 {
            let a = idm_accel(&p, v, 12.0, Some((leader_rear - s, 0.0)));
            let (s2, v2, _) = integrate(s, v, a, 0.1);
            s = s2;
            v = v2;
            assert!(leader_rear - s > 0.0);
        }
        assert!(v < 1e-3);
        assert!(leader_rear - s > 0.5 * p.min_gap);
        // Closed form: at rest the interaction term is (s0 / gap)^2.
        let gap = 4.0;
        let expected = p.max_accel * (1.0 - (p.min_gap / gap).powi(2));
        assert!((idm_accel(&p, 0.0, 12.0, Some((gap, 0.0))) - expected).abs() < 1e-12);
    }

    #[test]
    fn crossing_before_red_is_legal() {
        // Green ends at 1.0 s, yellow until 4.0 s; the ego crosses at 0.2 s.
        let mut cfg = empty_road(1);
        cfg.ego.v = 10.0;
        cfg.ego.s = 97.0;
        cfg.lights = vec![LightSeed { position: 99.0, green: 20.0, yellow: 3.0, red: 20.0, offset: 19.0 }];
        let mut sim = Simulation::new(&cfg, DriverPolicy::EcoLane, SimOptions::default()).unwrap();
        sim.install_plan(Plan::constant(0.0, 10.0, 0.5, 140), true);
        for _ in 0..60 {
            sim.step().unwrap();
        }
        assert_eq!(sim.crossings.len(), 1);
        assert_eq!(sim.crossings[0].phase, Phase::Green);
        assert!((sim.crossings[0].time - 0.2).abs() < 1e-9);
        // Past the line when the light is red.
        assert_eq!(sim.world().lights[0].phase, Phase::Red);
    }

    #[test]
    fn running_a_red_fails_the_run() {
        let mut cfg = empty_road(1);
        cfg.ego.v = 10.0;
        cfg.lights = vec![LightSeed { position: 50.0, green: 20.0, yellow: 3.0, red: 20.0, offset: 25.0 }];
        let err = run_detailed(&cfg, DriverPolicy::EcoLane, SimOptions { broken_policy: true, ..SimOptions::default() })
            .unwrap_err();
        assert!(err.to_string().contains("red-light"), "{err}");
    }

    #[test]
    fn broken_policy_collides() {
        let mut cfg = empty_road(1);
        cfg.npc_spawn = vec![NpcSeed { lane: Lane::ZERO, s: 40.0, v: 0.0, desired_v: 0.5 }];
        let err = run_detailed(&cfg, DriverPolicy::EcoLane, SimOptions { broken_policy: true, ..SimOptions::default() })
            .unwrap_err();
        assert!(err.to_string().contains("collision"), "{err}");
    }

    #[test]
    fn human_free_road_trip_time() {
        let cfg = empty_road(3);
        let m = run_scenario(&cfg, DriverPolicy::Human).unwrap();
        let ideal = cfg.route_total() / cfg.speed_limit;
        assert!((m.trip_time - ideal).abs() <= 0.05 * ideal, "{} vs {ideal}", m.trip_time);
        assert_eq!(m.stops, 0);
    }

    #[test]
    fn energy_bookkeeping_and_aux_identity() {
        let mut cfg = ScenarioConfig::reference();
        cfg.laps = 1;
        let out = run_detailed(&cfg, DriverPolicy::Human, SimOptions::default()).unwrap();
        let log: Vec<(f64, f64)> = out.events.iter().map(|e| (e.v, e.a)).collect();
        let replay = trajectory_energy(&cfg.powertrain, &log, cfg.sim_step);
        let m = out.metrics;
        assert!((replay - m.motion_energy).abs() <= 1e-9 * m.motion_energy.abs());
        assert_eq!(m.total_energy - m.motion_energy, cfg.aux_power * m.trip_time / 3600.0);
        assert!(out.crossings.iter().all(|c| c.phase != Phase::Red));
    }

    #[test]
    fn live_stop_count_matches_log() {
        let mut cfg = ScenarioConfig::reference();
        cfg.laps = 1;
        let mut sim = Simulation::new(&cfg, DriverPolicy::Human, SimOptions::default()).unwrap();
        while !sim.finished() {
            sim.step().unwrap();
        }
        assert!(sim.world().acc.stops > 0);
        assert_eq!(sim.world().acc.stops, sim.metrics().stops);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let mut cfg = ScenarioConfig::reference();
        cfg.laps = 1;
        let a = run_detailed(&cfg, DriverPolicy::Human, SimOptions::default()).unwrap();
        let b = run_detailed(&cfg, DriverPolicy::Human, SimOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}
