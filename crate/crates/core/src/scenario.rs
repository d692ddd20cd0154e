//! Scenario files: a ring route with fixed-time signals and seeded traffic.
//!
//! Positions in the file are ring positions in `[0, route_length)`; the ego
//! drives `laps` full laps starting at `ego.s`. Each light cycles
//! green → yellow → red and is `offset` seconds into its cycle (measured from
//! the start of green) at t = 0.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::PowertrainModel;
use crate::selector::SelectorParams;
use crate::signal::{CycleSpec, Phase};
use crate::world::{Lane, SpatEntry};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightSeed {
    pub position: f64,
    pub green: f64,
    pub yellow: f64,
    pub red: f64,
    #[serde(default)]
    pub offset: f64,
}

impl LightSeed {
    pub fn cycle(&self) -> CycleSpec {
        CycleSpec { green: self.green, yellow: self.yellow, red: self.red }
    }

    /// SPaT entry of this light at `clock`, placed at `s_tl`.
    pub fn entry_at(&self, clock: f64, s_tl: f64) -> SpatEntry {
        let cycle = self.cycle();
        let tau = (clock + self.offset).rem_euclid(cycle.period());
        let (phase, remaining) = if tau < cycle.green {
            (Phase::Green, cycle.green - tau)
        } else if tau < cycle.green + cycle.yellow {
            (Phase::Yellow, cycle.green + cycle.yellow - tau)
        } else {
            (Phase::Red, cycle.period() - tau)
        };
        // Guard against a zero remainder from rounding at phase boundaries.
        let remaining = remaining.clamp(1e-9, cycle.duration(phase));
        SpatEntry { s_tl, phase, t_remaining: remaining, cycle }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NpcSeed {
    pub lane: Lane,
    pub s: f64,
    pub v: f64,
    pub desired_v: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EgoSeed {
    pub lane: Lane,
    pub s: f64,
    pub v: f64,
}

impl Default for EgoSeed {
    fn default() -> Self {
        Self { lane: Lane::ZERO, s: 0.0, v: 0.0 }
    }
}

/// Uniform perturbations drawn from the scenario seed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Jitter {
    /// Half-width of NPC position noise (m).
    pub position: f64,
    /// Half-width of NPC desired/initial speed noise (m/s).
    pub speed: f64,
    /// Half-width of light offset noise (s).
    pub light_offset: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmParams {
    pub min_gap: f64,
    pub time_headway: f64,
    pub max_accel: f64,
    pub comfort_decel: f64,
    /// Hardest braking a driver accepts to stop for a yellow.
    pub stop_decel: f64,
    /// Physical braking limit.
    pub max_decel: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self { min_gap: 2.0, time_headway: 1.5, max_accel: 1.5, comfort_decel: 2.0, stop_decel: 4.0, max_decel: 9.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Meter {
    /// Road-load powertrain model.
    #[default]
    Physics,
    /// The planner's quadratic model.
    Quadratic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HumanParams {
    pub idm: IdmParams,
    /// Minimum speed deficit of the leader that triggers an overtake (m/s).
    pub overtake_deficit: f64,
    /// Leaders further than this are ignored by the overtaking rule (m).
    pub overtake_lookahead: f64,
}

impl Default for HumanParams {
    fn default() -> Self {
        Self {
            idm: IdmParams { time_headway: 1.2, max_accel: 2.0, comfort_decel: 2.5, ..IdmParams::default() },
            overtake_deficit: 2.0,
            overtake_lookahead: 60.0,
        }
    }
}

fn default_lane_count() -> u8 {
    2
}
fn default_laps() -> u32 {
    3
}
fn default_sim_step() -> f64 {
    0.1
}
fn default_aux_power() -> f64 {
    700.0
}
fn default_detection_radius() -> f64 {
    crate::world::DEFAULT_DETECTION_RADIUS
}
fn default_replan_period() -> f64 {
    1.0
}
fn default_spat_lights() -> usize {
    3
}
fn default_lane_change_time() -> f64 {
    3.0
}
fn default_tracking_gain() -> f64 {
    1.0
}
fn default_max_time() -> f64 {
    3600.0
}

fn is_default<T: Default + PartialEq>(value: &T) -> bool {
    *value == T::default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Length of one lap (m).
    pub route_length: f64,
    #[serde(default = "default_lane_count")]
    pub lane_count: u8,
    pub speed_limit: f64,
    #[serde(default = "default_laps")]
    pub laps: u32,
    #[serde(default = "default_sim_step")]
    pub sim_step: f64,
    #[serde(default)]
    pub rng_seed: u64,
    /// Constant auxiliary draw (W).
    #[serde(default = "default_aux_power")]
    pub aux_power: f64,
    #[serde(default = "default_detection_radius")]
    pub detection_radius: f64,
    #[serde(default = "default_replan_period")]
    pub replan_period: f64,
    /// Lights handed to the planner (first one in the OCP, rest in the graph).
    #[serde(default = "default_spat_lights")]
    pub spat_lights: usize,
    #[serde(default = "default_lane_change_time")]
    pub lane_change_time: f64,
    #[serde(default = "default_tracking_gain")]
    pub tracking_gain: f64,
    /// Simulated-time watchdog (s).
    #[serde(default = "default_max_time")]
    pub max_time: f64,
    #[serde(default)]
    pub meter: Meter,
    #[serde(default)]
    pub ego: EgoSeed,
    pub lights: Vec<LightSeed>,
    pub npc_spawn: Vec<NpcSeed>,
    #[serde(default, skip_serializing_if = "is_default")]
    pub jitter: Jitter,
    #[serde(default, skip_serializing_if = "is_default")]
    pub npc_idm: IdmParams,
    #[serde(default, skip_serializing_if = "is_default")]
    pub human: HumanParams,
    #[serde(default, skip_serializing_if = "is_default")]
    pub planner: SelectorParams,
    #[serde(default, skip_serializing_if = "is_default")]
    pub powertrain: PowertrainModel,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::ScenarioParse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::ScenarioParse(msg) => Error::ScenarioParse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario is serializable")
    }

    pub fn route_total(&self) -> f64 {
        self.route_length * self.laps as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ScenarioInvalid(msg));
        if self.lane_count != 2 {
            return bad(format!("lane_count must be 2, got {}", self.lane_count));
        }
        if !(self.route_length > 0.0 && self.route_length.is_finite()) {
            return bad(format!("route_length must be positive, got {}", self.route_length));
        }
        if !(self.speed_limit > 0.0) {
            return bad(format!("speed_limit must be positive, got {}", self.speed_limit));
        }
        if self.laps == 0 {
            return bad("laps must be at least 1".into());
        }
        if !(self.sim_step > 0.0) {
            return bad(format!("sim_step must be positive, got {}", self.sim_step));
        }
        if !(self.aux_power >= 0.0) {
            return bad(format!("aux_power must be non-negative, got {}", self.aux_power));
        }
        if !(self.detection_radius > 0.0) {
            return bad(format!("detection_radius must be positive, got {}", self.detection_radius));
        }
        if self.spat_lights == 0 {
            return bad("spat_lights must be at least 1".into());
        }
        if !(self.lane_change_time >= 0.0 && self.tracking_gain >= 0.0 && self.max_time > 0.0) {
            return bad("lane_change_time, tracking_gain and max_time must be non-negative".into());
        }
        crate::selector::ReplanSchedule::new(self.replan_period, self.sim_step)
            .map_err(|e| Error::ScenarioInvalid(e.to_string()))?;
        for (i, light) in self.lights.iter().enumerate() {
            if !(0.0..self.route_length).contains(&light.position) {
                return bad(format!("lights[{i}].position {} outside [0, route_length)", light.position));
            }
            light.cycle().validate().map_err(|e| Error::ScenarioInvalid(format!("lights[{i}]: {e}")))?;
        }
        if self.lights.windows(2).any(|w| w[1].position <= w[0].position) {
            return bad("lights must be sorted by strictly increasing position".into());
        }
        for (i, npc) in self.npc_spawn.iter().enumerate() {
            if !(0.0..self.route_length).contains(&npc.s) {
                return bad(format!("npc_spawn[{i}].s {} outside [0, route_length)", npc.s));
            }
            if !(npc.v >= 0.0 && npc.desired_v > 0.0) {
                return bad(format!("npc_spawn[{i}] speeds must be non-negative"));
            }
        }
        if !(self.ego.v >= 0.0 && (0.0..self.route_length).contains(&self.ego.s)) {
            return bad("ego start state invalid".into());
        }
        self.planner.ocp.validate().map_err(|e| Error::ScenarioInvalid(e.to_string()))?;
        Ok(())
    }

    /// Copy with `seed` applied: jitter drawn, `rng_seed` replaced.
    pub fn realize(&self, seed: u64) -> ScenarioConfig {
        let mut out = self.clone();
        out.rng_seed = seed;
        let j = self.jitter;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |half: f64| if half > 0.0 { rng.gen_range(-half..=half) } else { 0.0 };
        for light in &mut out.lights {
            light.offset = (light.offset + draw(j.light_offset)).rem_euclid(light.cycle().period());
        }
        for npc in &mut out.npc_spawn {
            npc.s = (npc.s + draw(j.position)).rem_euclid(self.route_length);
            let dv = draw(j.speed);
            npc.desired_v = (npc.desired_v + dv).max(0.5);
            npc.v = (npc.v + dv).clamp(0.0, npc.desired_v);
        }
        out.jitter = Jitter::default();
        out
    }

    /// The shipped reference route: 4 lights on a 1340 m lap driven 3
    /// times, slow trucks in lane 0 and faster cars in lane 1.
    pub fn reference() -> ScenarioConfig {
        let light = |position, green, red, offset| LightSeed { position, green, yellow: 3.0, red, offset };
        let npc = |lane, s, v| NpcSeed { lane, s, v, desired_v: v };
        ScenarioConfig {
            route_length: 1340.0,
            lane_count: 2,
            speed_limit: 11.1,
            laps: 3,
            sim_step: 0.1,
            rng_seed: 1,
            aux_power: 700.0,
            detection_radius: default_detection_radius(),
            replan_period: 1.0,
            spat_lights: 3,
            lane_change_time: 3.0,
            tracking_gain: 1.0,
            max_time: 3600.0,
            meter: Meter::Physics,
            ego: EgoSeed::default(),
            lights: vec![
                light(150.0, 30.0, 27.0, 0.0),
                light(480.0, 25.0, 32.0, 14.0),
                light(820.0, 35.0, 22.0, 31.0),
                light(1150.0, 28.0, 29.0, 45.0),
            ],
            npc_spawn: vec![
                npc(Lane::ZERO, 60.0, 3.5),
                npc(Lane::ZERO, 400.0, 4.0),
                npc(Lane::ZERO, 730.0, 3.8),
                npc(Lane::ZERO, 1040.0, 3.6),
                npc(Lane::ONE, 100.0, 10.0),
                npc(Lane::ONE, 270.0, 9.5),
                npc(Lane::ONE, 440.0, 10.5),
                npc(Lane::ONE, 610.0, 9.0),
                npc(Lane::ONE, 780.0, 10.0),
                npc(Lane::ONE, 950.0, 9.5),
                npc(Lane::ONE, 1120.0, 10.5),
                npc(Lane::ONE, 1250.0, 9.0),
            ],
            jitter: Jitter { position: 15.0, speed: 0.3, light_offset: 10.0 },
            npc_idm: IdmParams::default(),
            human: HumanParams::default(),
            planner: SelectorParams::default(),
            powertrain: PowertrainModel::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_round_trips_through_toml() {
        let cfg = ScenarioConfig::reference();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn round_trip_keeps_non_default_tables() {
        let mut cfg = ScenarioConfig::reference();
        cfg.planner.w_graph = 3.5;
        cfg.planner.ocp.horizon = 80;
        cfg.human.overtake_deficit = 1.0;
        let back = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_lights_is_named() {
        let text = "route_length = 100.0\nspeed_limit = 10.0\nnpc_spawn = []\n";
        let err = ScenarioConfig::from_toml_str(text).unwrap_err();
        assert!(matches!(err, Error::ScenarioParse(_)));
        assert!(err.to_string().contains("lights"), "{err}");
    }

    #[test]
    fn validation_rejects_unsorted_lights() {
        let mut cfg = ScenarioConfig::reference();
        cfg.lights.swap(0, 1);
        assert!(matches!(cfg.validate(), Err(Error::ScenarioInvalid(_))));
        let mut cfg = ScenarioConfig::reference();
        cfg.lane_count = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn light_phase_from_offset() {
        let seed = LightSeed { position: 0.0, green: 20.0, yellow: 3.0, red: 17.0, offset: 0.0 };
        let e = seed.entry_at(0.0, 0.0);
        assert_eq!((e.phase, e.t_remaining), (Phase::Green, 20.0));
        let e = seed.entry_at(21.0, 0.0);
        assert_eq!(e.phase, Phase::Yellow);
        assert!((e.t_remaining - 2.0).abs() < 1e-12);
        let e = seed.entry_at(45.0, 0.0);
        assert_eq!(e.phase, Phase::Green);
        assert!((e.t_remaining - 15.0).abs() < 1e-12);
        let shifted = LightSeed { offset: 30.0, ..seed };
        assert_eq!(shifted.entry_at(0.0, 0.0).phase, Phase::Red);
    }

    #[test]
    fn realize_is_seeded() {
        let cfg = ScenarioConfig::reference();
        assert_eq!(cfg.realize(3), cfg.realize(3));
        assert_ne!(cfg.realize(3), cfg.realize(4));
        let r = cfg.realize(3);
        r.validate().unwrap();
        assert_eq!(r.rng_seed, 3);
        assert!(r.npc_spawn.iter().zip(&cfg.npc_spawn).all(|(a, b)| (a.s - b.s).abs() <= 15.0 + 1e-9
            || (a.s - b.s).abs() >= cfg.route_length - 15.0 - 1e-9));
    }
}
