//! Deterministic signal evolution, the cycle-time adjustment and phase-skip
//! count used by the stop/pass decision, and the time windows in which the
//! pass and stop constraints are active.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{LaneDecision, PassFlag, SpatEntry};
use crate::{Error, Result};

/// Default green-time safety margin (s).
pub const DEFAULT_GREEN_MARGIN: f64 = 2.0;

/// Signal phase. The numeric code (green 0, yellow 1, red 2) is the order in
/// which the phases cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Green,
    Yellow,
    Red,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Green, Phase::Yellow, Phase::Red];

    pub fn code(self) -> usize {
        match self {
            Phase::Green => 0,
            Phase::Yellow => 1,
            Phase::Red => 2,
        }
    }

    pub fn from_code(code: usize) -> Option<Phase> {
        Phase::ALL.get(code).copied()
    }

    pub fn next(self) -> Phase {
        Phase::ALL[(self.code() + 1) % 3]
    }

    pub fn label(self) -> &'static str {
        match self {
            Phase::Green => "green",
            Phase::Yellow => "yellow",
            Phase::Red => "red",
        }
    }
}

/// Phase durations `[green, yellow, red]` in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleSpec {
    pub green: f64,
    pub yellow: f64,
    pub red: f64,
}

impl CycleSpec {
    pub fn new(green: f64, yellow: f64, red: f64) -> Result<Self> {
        let cycle = Self { green, yellow, red };
        cycle.validate()?;
        Ok(cycle)
    }

    pub fn validate(&self) -> Result<()> {
        if self.durations().iter().all(|d| d.is_finite() && *d > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidState(format!("cycle durations must be positive: {:?}", self.durations())))
        }
    }

    pub fn durations(&self) -> [f64; 3] {
        [self.green, self.yellow, self.red]
    }

    pub fn duration(&self, phase: Phase) -> f64 {
        self.durations()[phase.code()]
    }

    pub fn period(&self) -> f64 {
        self.green + self.yellow + self.red
    }
}

/// Phase and remaining time `dt` seconds after the entry's reference instant.
pub fn phase_at(entry: &SpatEntry, dt: f64) -> (Phase, f64) {
    debug_assert!(dt >= 0.0);
    if dt < entry.t_remaining {
        return (entry.phase, entry.t_remaining - dt);
    }
    let mut rem = (dt - entry.t_remaining) % entry.cycle.period();
    let mut phase = entry.phase.next();
    loop {
        let duration = entry.cycle.duration(phase);
        if rem < duration {
            return (phase, duration - rem);
        }
        rem -= duration;
        phase = phase.next();
    }
}

/// The entry advanced by `dt` seconds.
pub fn advance(entry: &SpatEntry, dt: f64) -> SpatEntry {
    let (phase, t_remaining) = phase_at(entry, dt);
    SpatEntry { phase, t_remaining, ..*entry }
}

/// Start and end (relative to now) of the green interval that contains
/// time `t`, or of the next one if the light is not green at `t`.
pub fn green_interval_from(entry: &SpatEntry, t: f64) -> (f64, f64) {
    let (phase, remaining) = phase_at(entry, t);
    let cycle = &entry.cycle;
    match phase {
        Phase::Green => (t - (cycle.green - remaining), t + remaining),
        Phase::Yellow => {
            let start = t + remaining + cycle.red;
            (start, start + cycle.green)
        }
        Phase::Red => {
            let start = t + remaining;
            (start, start + cycle.green)
        }
    }
}

/// Number of phase durations appended to the remaining time when deciding
/// not to pass.
pub fn delta_count(phase: Phase, decision: LaneDecision) -> usize {
    match (decision.pass_flag(), phase) {
        (PassFlag::Pass, _) => 0,
        (PassFlag::NonPass, Phase::Red) => 2,
        (PassFlag::NonPass, Phase::Green) => 1,
        (PassFlag::NonPass, Phase::Yellow) => 2,
    }
}

/// Remaining time plus the durations of the `delta_count` phases that follow
/// the current one.
pub fn cycle_time_adjustment(phase: Phase, t_remaining: f64, cycle: &CycleSpec, decision: LaneDecision) -> f64 {
    let durations = cycle.durations();
    (1..=delta_count(phase, decision)).fold(t_remaining, |acc, i| acc + durations[(phase.code() + i) % 3])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub lower: f64,
    pub upper: f64,
}

/// Pass and stop windows in seconds from now. For a pass decision `stop`
/// is the behind-the-line guard that precedes the pass window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintWindows {
    pub decision: LaneDecision,
    pub pass: Option<TimeWindow>,
    pub stop: TimeWindow,
}

impl ConstraintWindows {
    pub fn pass_lower(&self) -> Option<f64> {
        self.pass.map(|w| w.lower)
    }

    pub fn pass_upper(&self) -> Option<f64> {
        self.pass.map(|w| w.upper)
    }
}

#[derive(Clone, Copy, Debug, Error, PartialEq)]
pub enum WindowError {
    #[error("pass window [{lower}, {upper}] is empty")]
    EmptyPassWindow { lower: f64, upper: f64 },
}

/// Pass/stop windows for `decision` at the light described by `entry`.
///
/// A pass targets the current green when the light is green, otherwise the
/// next green; the margin shrinks that green interval on both sides. A
/// non-pass holds the vehicle behind the line until the adjusted cycle time.
pub fn constraint_windows(
    entry: &SpatEntry,
    decision: LaneDecision,
    margin: f64,
) -> std::result::Result<ConstraintWindows, WindowError> {
    debug_assert!(margin >= 0.0);
    match decision.pass_flag() {
        PassFlag::Pass => {
            let (g_start, g_end) = if entry.phase == Phase::Green {
                (0.0, entry.t_remaining)
            } else {
                green_interval_from(entry, 0.0)
            };
            let lower = g_start + margin;
            let upper = g_end - margin;
            if upper <= lower {
                return Err(WindowError::EmptyPassWindow { lower, upper });
            }
            Ok(ConstraintWindows {
                decision,
                pass: Some(TimeWindow { lower, upper }),
                stop: TimeWindow { lower: 0.0, upper: lower },
            })
        }
        PassFlag::NonPass => {
            let ct = cycle_time_adjustment(entry.phase, entry.t_remaining, &entry.cycle, decision);
            Ok(ConstraintWindows { decision, pass: None, stop: TimeWindow { lower: 0.0, upper: ct } })
        }
    }
}

/// The first green after the non-pass hold ends, shrunk by `margin`. Crossing
/// is only legal inside this window once the hold expires.
pub fn release_window(entry: &SpatEntry, hold_until: f64, margin: f64) -> TimeWindow {
    let (start, end) = green_interval_from(entry, hold_until);
    let start = start.max(hold_until);
    TimeWindow { lower: start + margin, upper: end - margin }
}

/// The window bounds exactly as the printed formulas define them (pass upper
/// `CT - margin`, pass lower `CT + margin`, stop upper `CT`, stop lower 0).
/// Kept for auditing; the pass window it yields is always empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrintedWindows {
    pub pass_upper: f64,
    pub pass_lower: f64,
    pub stop_upper: f64,
    pub stop_lower: f64,
}

pub fn printed_windows(entry: &SpatEntry, decision: LaneDecision, margin: f64) -> PrintedWindows {
    let ct = cycle_time_adjustment(entry.phase, entry.t_remaining, &entry.cycle, decision);
    PrintedWindows { pass_upper: ct - margin, pass_lower: ct + margin, stop_upper: ct, stop_lower: 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::LaneDecision::*;
    use proptest::prelude::*;

    fn cycle() -> CycleSpec {
        CycleSpec::new(20.0, 3.0, 17.0).unwrap()
    }

    fn entry(phase: Phase, t_remaining: f64) -> SpatEntry {
        SpatEntry::new(100.0, phase, t_remaining, cycle()).unwrap()
    }

    #[test]
    fn phase_at_examples() {
        let e = entry(Phase::Green, 5.0);
        assert_eq!(phase_at(&e, 0.0), (Phase::Green, 5.0));
        assert_eq!(phase_at(&e, 5.0), (Phase::Yellow, 3.0));
        assert_eq!(phase_at(&e, 45.0), (Phase::Yellow, 3.0));
        assert_eq!(phase_at(&e, 8.0), (Phase::Red, 17.0));
        assert_eq!(phase_at(&e, 25.0), (Phase::Green, 20.0));
    }

    #[test]
    fn delta_table() {
        assert_eq!(delta_count(Phase::Red, Pass0), 0);
        assert_eq!(delta_count(Phase::Green, NonPass1), 1);
        assert_eq!(delta_count(Phase::Yellow, NonPass0), 2);
        assert_eq!(delta_count(Phase::Red, NonPass0), 2);
    }

    #[test]
    fn cycle_time_examples() {
        let c = cycle();
        assert_eq!(cycle_time_adjustment(Phase::Green, 5.0, &c, Pass0), 5.0);
        assert_eq!(cycle_time_adjustment(Phase::Green, 5.0, &c, NonPass0), 8.0);
        assert_eq!(cycle_time_adjustment(Phase::Red, 10.0, &c, NonPass1), 33.0);
        assert_eq!(cycle_time_adjustment(Phase::Yellow, 2.0, &c, NonPass0), 39.0);
    }

    #[test]
    fn window_examples() {
        let w = constraint_windows(&entry(Phase::Green, 10.0), Pass0, 2.0).unwrap();
        assert_eq!(w.pass, Some(TimeWindow { lower: 2.0, upper: 8.0 }));
        assert_eq!(w.stop, TimeWindow { lower: 0.0, upper: 2.0 });

        let w = constraint_windows(&entry(Phase::Red, 6.0), Pass1, 2.0).unwrap();
        assert_eq!(w.pass, Some(TimeWindow { lower: 8.0, upper: 24.0 }));

        let err = constraint_windows(&entry(Phase::Green, 3.0), Pass0, 2.0).unwrap_err();
        assert_eq!(err, WindowError::EmptyPassWindow { lower: 2.0, upper: 1.0 });

        let w = constraint_windows(&entry(Phase::Red, 10.0), NonPass0, 2.0).unwrap();
        assert_eq!(w.pass, None);
        assert_eq!(w.stop, TimeWindow { lower: 0.0, upper: 33.0 });
    }

    #[test]
    fn yellow_pass_targets_next_green() {
        let w = constraint_windows(&entry(Phase::Yellow, 2.0), Pass0, 2.0).unwrap();
        // 2 s yellow + 17 s red, then 20 s green.
        assert_eq!(w.pass, Some(TimeWindow { lower: 21.0, upper: 37.0 }));
    }

    #[test]
    fn printed_formula_window_is_empty() {
        for phase in Phase::ALL {
            for d in LaneDecision::ALL {
                let p = printed_windows(&entry(phase, 1.5), d, 2.0);
                assert!(p.pass_lower > p.pass_upper);
                assert_eq!(p.stop_lower, 0.0);
            }
        }
    }

    #[test]
    fn release_after_nonpass_hold() {
        // Green now with 5 s left: hold until red starts at 8 s, release on the
        // green that starts at 25 s.
        let e = entry(Phase::Green, 5.0);
        let ct = cycle_time_adjustment(e.phase, e.t_remaining, &e.cycle, NonPass0);
        assert_eq!(release_window(&e, ct, 2.0), TimeWindow { lower: 27.0, upper: 43.0 });
    }

    #[test]
    fn green_interval_inside_current_green() {
        let e = entry(Phase::Green, 5.0);
        assert_eq!(green_interval_from(&e, 1.0), (-15.0, 5.0));
        assert_eq!(green_interval_from(&e, 30.0), (25.0, 45.0));
    }

    fn arb_entry() -> impl Strategy<Value = SpatEntry> {
        (1u32..80, 1u32..20, 1u32..80, 0usize..3, 1u32..400).prop_map(|(g, y, r, code, frac)| {
            let cycle = CycleSpec::new(g as f64 * 0.5, y as f64 * 0.5, r as f64 * 0.5).unwrap();
            let phase = Phase::from_code(code).unwrap();
            let dur = cycle.duration(phase);
            let rem = (dur * frac as f64 / 400.0).max(0.25).min(dur);
            SpatEntry::new(0.0, phase, rem, cycle).unwrap()
        })
    }

    proptest! {
        #[test]
        fn phase_at_is_periodic(e in arb_entry(), k in 0u32..400) {
            let t = k as f64 * 0.25;
            let (p1, r1) = phase_at(&e, t);
            let (p2, r2) = phase_at(&e, t + e.cycle.period());
            prop_assert_eq!(p1, p2);
            prop_assert!((r1 - r2).abs() < 1e-9);
            prop_assert!(r1 > 0.0 && r1 <= e.cycle.duration(p1) + 1e-12);
        }

        #[test]
        fn nonpass_waits_longer(e in arb_entry()) {
            for d in LaneDecision::ALL {
                let ct = cycle_time_adjustment(e.phase, e.t_remaining, &e.cycle, d);
                if d.is_pass() {
                    prop_assert_eq!(ct, e.t_remaining);
                } else {
                    prop_assert!(ct > e.t_remaining);
                }
            }
        }

        #[test]
        fn pass_window_lies_in_green(e in arb_entry(), margin in 0.1f64..3.0, frac in 0.0f64..=1.0) {
            for d in [Pass0, Pass1] {
                if let Ok(w) = constraint_windows(&e, d, margin) {
                    let pass = w.pass.unwrap();
                    prop_assert!(pass.lower <= pass.upper);
                    let t = pass.lower + frac * (pass.upper - pass.lower);
                    prop_assert_eq!(phase_at(&e, t).0, Phase::Green);
                }
            }
        }
    }
}
