//! Shared domain types: ego and surrounding-vehicle states, observations,
//! signal phase and timing, and the four lane decisions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::signal::{CycleSpec, Phase};
use crate::{Error, Result};

/// Default perception range along the route, in metres.
pub const DEFAULT_DETECTION_RADIUS: f64 = 150.0;

/// One of the two lanes of the corridor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Lane(u8);

impl Lane {
    pub const ZERO: Lane = Lane(0);
    pub const ONE: Lane = Lane(1);

    pub fn new(index: u8) -> Option<Lane> {
        (index < 2).then_some(Lane(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn other(self) -> Lane {
        Lane(1 - self.0)
    }
}

impl TryFrom<u8> for Lane {
    type Error = String;

    fn try_from(value: u8) -> std::result::Result<Self, Self::Error> {
        Lane::new(value).ok_or_else(|| format!("lane index {value} out of range (expected 0 or 1)"))
    }
}

impl From<Lane> for u8 {
    fn from(lane: Lane) -> u8 {
        lane.0
    }
}

impl fmt::Display for Lane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    /// Arclength along the route centerline (m).
    pub s: f64,
    /// Longitudinal velocity (m/s).
    pub v: f64,
    pub lane: Lane,
}

impl EgoState {
    pub fn new(s: f64, v: f64, lane: Lane) -> Result<Self> {
        if !s.is_finite() || !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidState(format!("ego state s={s}, v={v}")));
        }
        Ok(Self { s, v, lane })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurroundingVehicle {
    pub id: u32,
    pub s: f64,
    pub v: f64,
    pub lane: Lane,
}

/// Vehicles seen by the ego within its detection radius, sorted by position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObservationSet {
    pub vehicles: Vec<SurroundingVehicle>,
    pub detection_radius: f64,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    pub fn in_lane(&self, lane: Lane) -> impl Iterator<Item = &SurroundingVehicle> {
        self.vehicles.iter().filter(move |veh| veh.lane == lane)
    }
}

/// Collects every vehicle within `radius` of the ego (inclusive), ordered by
/// position and then by id.
pub fn observe(world: &[SurroundingVehicle], ego: &EgoState, radius: f64) -> ObservationSet {
    debug_assert!(radius > 0.0);
    let mut vehicles: Vec<SurroundingVehicle> = world
        .iter()
        .filter(|veh| (veh.s - ego.s).abs() <= radius)
        .copied()
        .collect();
    vehicles.sort_by(|a, b| a.s.total_cmp(&b.s).then(a.id.cmp(&b.id)));
    ObservationSet { vehicles, detection_radius: radius }
}

/// The nearest vehicle strictly ahead of the ego in `lane`.
pub fn front_vehicle(obs: &ObservationSet, ego: &EgoState, lane: Lane) -> Option<SurroundingVehicle> {
    obs.in_lane(lane)
        .filter(|veh| veh.s - ego.s > 0.0)
        .min_by(|a, b| a.s.total_cmp(&b.s).then(a.id.cmp(&b.id)))
        .copied()
}

/// The nearest vehicle at or behind the ego in `lane`.
pub fn rear_vehicle(obs: &ObservationSet, ego: &EgoState, lane: Lane) -> Option<SurroundingVehicle> {
    obs.in_lane(lane)
        .filter(|veh| veh.s - ego.s <= 0.0)
        .max_by(|a, b| a.s.total_cmp(&b.s).then(b.id.cmp(&a.id)))
        .copied()
}

/// Signal phase and timing of one traffic light, relative to "now".
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatEntry {
    /// Stop-line position along the route (m).
    pub s_tl: f64,
    pub phase: Phase,
    /// Time left in the current phase (s).
    pub t_remaining: f64,
    pub cycle: CycleSpec,
}

impl SpatEntry {
    pub fn new(s_tl: f64, phase: Phase, t_remaining: f64, cycle: CycleSpec) -> Result<Self> {
        cycle.validate()?;
        if !s_tl.is_finite() {
            return Err(Error::InvalidState(format!("light position {s_tl}")));
        }
        let duration = cycle.duration(phase);
        if !(t_remaining > 0.0 && t_remaining <= duration) {
            return Err(Error::InvalidState(format!(
                "remaining time {t_remaining} outside (0, {duration}] for {phase:?}"
            )));
        }
        Ok(Self { s_tl, phase, t_remaining, cycle })
    }

    pub fn cycle_durations(&self) -> [f64; 3] {
        self.cycle.durations()
    }
}

/// The next lights along the route, strictly increasing in position.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatHorizon {
    entries: Vec<SpatEntry>,
}

impl SpatHorizon {
    pub fn new(entries: Vec<SpatEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidState("SPaT horizon needs at least one light".into()));
        }
        if entries.windows(2).any(|pair| pair[1].s_tl <= pair[0].s_tl) {
            return Err(Error::InvalidState("SPaT entries must be strictly increasing in position".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[SpatEntry] {
        &self.entries
    }

    pub fn first(&self) -> &SpatEntry {
        &self.entries[0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PassFlag {
    Pass,
    NonPass,
}

/// Whether to cross the next light, and in which lane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LaneDecision {
    Pass0,
    Pass1,
    #[serde(rename = "NONPASS0")]
    NonPass0,
    #[serde(rename = "NONPASS1")]
    NonPass1,
}

impl LaneDecision {
    pub const ALL: [LaneDecision; 4] =
        [LaneDecision::Pass0, LaneDecision::Pass1, LaneDecision::NonPass0, LaneDecision::NonPass1];

    pub fn new(flag: PassFlag, lane: Lane) -> Self {
        match (flag, lane.index()) {
            (PassFlag::Pass, 0) => LaneDecision::Pass0,
            (PassFlag::Pass, _) => LaneDecision::Pass1,
            (PassFlag::NonPass, 0) => LaneDecision::NonPass0,
            (PassFlag::NonPass, _) => LaneDecision::NonPass1,
        }
    }

    pub fn pass_flag(self) -> PassFlag {
        match self {
            LaneDecision::Pass0 | LaneDecision::Pass1 => PassFlag::Pass,
            LaneDecision::NonPass0 | LaneDecision::NonPass1 => PassFlag::NonPass,
        }
    }

    pub fn is_pass(self) -> bool {
        self.pass_flag() == PassFlag::Pass
    }

    pub fn lane(self) -> Lane {
        match self {
            LaneDecision::Pass0 | LaneDecision::NonPass0 => Lane::ZERO,
            LaneDecision::Pass1 | LaneDecision::NonPass1 => Lane::ONE,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LaneDecision::Pass0 => "PASS0",
            LaneDecision::Pass1 => "PASS1",
            LaneDecision::NonPass0 => "NONPASS0",
            LaneDecision::NonPass1 => "NONPASS1",
        }
    }
}

impl fmt::Display for LaneDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn veh(id: u32, s: f64, lane: Lane) -> SurroundingVehicle {
        SurroundingVehicle { id, s, v: 5.0, lane }
    }

    fn ego_at(s: f64) -> EgoState {
        EgoState::new(s, 8.0, Lane::ZERO).unwrap()
    }

    #[test]
    fn observe_empty_world() {
        let obs = observe(&[], &ego_at(0.0), 150.0);
        assert!(obs.is_empty());
        assert_eq!(obs.detection_radius, 150.0);
    }

    #[test]
    fn observe_filters_by_radius() {
        let world = [veh(1, 300.0, Lane::ZERO), veh(2, 10.0, Lane::ONE)];
        let obs = observe(&world, &ego_at(0.0), 150.0);
        assert_eq!(obs.len(), 1);
        assert_eq!(obs.vehicles[0].id, 2);
    }

    #[test]
    fn observe_boundary_is_inclusive() {
        let world = [veh(7, 150.0, Lane::ZERO), veh(8, -150.0, Lane::ONE), veh(9, 150.000001, Lane::ONE)];
        let obs = observe(&world, &ego_at(0.0), 150.0);
        let ids: Vec<u32> = obs.vehicles.iter().map(|v| v.id).collect();
        assert_eq!(ids, vec![8, 7]);
    }

    #[test]
    fn observe_orders_by_position_then_id() {
        let world = [veh(3, 20.0, Lane::ZERO), veh(1, -5.0, Lane::ONE), veh(2, 20.0, Lane::ONE)];
        let obs = observe(&world, &ego_at(0.0), 150.0);
        let ids: Vec<u32> = obs.vehicles.iter().map(|v| v.id).collect();
        assert_eq!(ids, vec![1, 2, 3]);
        assert_eq!(obs, observe(&world, &ego_at(0.0), 150.0));
    }

    #[test]
    fn front_vehicle_cases() {
        let ego = ego_at(100.0);
        let empty = observe(&[], &ego, 150.0);
        assert!(front_vehicle(&empty, &ego, Lane::ZERO).is_none());

        let world = [veh(1, 150.0, Lane::ZERO), veh(2, 120.0, Lane::ZERO), veh(3, 105.0, Lane::ONE)];
        let obs = observe(&world, &ego, 150.0);
        assert_eq!(front_vehicle(&obs, &ego, Lane::ZERO).unwrap().id, 2);
        assert_eq!(front_vehicle(&obs, &ego, Lane::ONE).unwrap().id, 3);

        let behind = [veh(4, 90.0, Lane::ZERO), veh(5, 60.0, Lane::ZERO)];
        let obs = observe(&behind, &ego, 150.0);
        assert!(front_vehicle(&obs, &ego, Lane::ZERO).is_none());
        assert_eq!(rear_vehicle(&obs, &ego, Lane::ZERO).unwrap().id, 4);
    }

    #[test]
    fn lane_decision_accessors() {
        for d in LaneDecision::ALL {
            assert_eq!(LaneDecision::new(d.pass_flag(), d.lane()), d);
        }
        assert!(LaneDecision::Pass1.is_pass());
        assert!(!LaneDecision::NonPass0.is_pass());
        assert_eq!(LaneDecision::NonPass1.lane(), Lane::ONE);
        assert_eq!(serde_json::to_string(&LaneDecision::NonPass0).unwrap(), "\"NONPASS0\"");
        assert_eq!(serde_json::to_string(&LaneDecision::Pass1).unwrap(), "\"PASS1\"");
    }

    #[test]
    fn invalid_states_rejected() {
        assert!(Lane::new(2).is_none());
        assert!(EgoState::new(0.0, -1.0, Lane::ZERO).is_err());
        assert!(EgoState::new(f64::NAN, 1.0, Lane::ZERO).is_err());
        let cycle = CycleSpec::new(20.0, 3.0, 17.0).unwrap();
        assert!(SpatEntry::new(10.0, Phase::Yellow, 4.0, cycle).is_err());
        assert!(SpatEntry::new(10.0, Phase::Green, 0.0, cycle).is_err());
        let a = SpatEntry::new(10.0, Phase::Green, 4.0, cycle).unwrap();
        let b = SpatEntry::new(10.0, Phase::Red, 4.0, cycle).unwrap();
        assert!(SpatHorizon::new(vec![a, b]).is_err());
        assert!(SpatHorizon::new(vec![]).is_err());
    }
}
