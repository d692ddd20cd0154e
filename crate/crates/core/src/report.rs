//! Comparison report across the three driver policies.

use serde::{Deserialize, Serialize};

use crate::scenario::ScenarioConfig;
use crate::sim::{DriverPolicy, Metrics};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRun {
    pub policy: DriverPolicy,
    pub metrics: Option<Metrics>,
    /// Fatal diagnostic when the run failed.
    pub error: Option<String>,
    /// Event log path, relative to the report directory.
    pub event_log: Option<String>,
}

/// Relative savings of ECO_LANE against one baseline, in percent:
/// `(baseline - proposed) / baseline * 100`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Savings {
    pub baseline: DriverPolicy,
    pub motion_pct: f64,
    pub total_pct: f64,
    pub trip_time_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    /// At least one policy run failed.
    pub incomplete: bool,
    pub runs: Vec<PolicyRun>,
    pub savings: Vec<Savings>,
    pub config: ScenarioConfig,
}

pub fn savings_pct(baseline: f64, proposed: f64) -> f64 {
    (baseline - proposed) / baseline * 100.0
}

impl RunReport {
    pub fn new(config: ScenarioConfig, runs: Vec<PolicyRun>) -> Self {
        let metrics = |p: DriverPolicy| runs.iter().find(|r| r.policy == p).and_then(|r| r.metrics);
        let savings = match metrics(DriverPolicy::EcoLane) {
            Some(eco) => [DriverPolicy::Human, DriverPolicy::EcoKeep]
                .into_iter()
                .filter_map(|b| {
                    metrics(b).map(|base| Savings {
                        baseline: b,
                        motion_pct: savings_pct(base.motion_energy, eco.motion_energy),
                        total_pct: savings_pct(base.total_energy, eco.total_energy),
                        trip_time_pct: savings_pct(base.trip_time, eco.trip_time),
                    })
                })
                .collect(),
            None => Vec::new(),
        };
        Self { seed: config.rng_seed, incomplete: runs.iter().any(|r| r.metrics.is_none()), runs, savings, config }
    }

    pub fn metrics(&self, policy: DriverPolicy) -> Option<&Metrics> {
        self.runs.iter().find(|r| r.policy == policy).and_then(|r| r.metrics.as_ref())
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    /// One row per policy, for bar charts.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("policy,status,trip_time_s,motion_energy_Wh,total_energy_Wh,stops,lane_changes,mean_speed\n");
        for run in &self.runs {
            match &run.metrics {
                Some(m) => out.push_str(&format!(
                    "{},ok,{:.2},{:.3},{:.3},{},{},{:.3}\n",
                    run.policy.label(),
                    m.trip_time,
                    m.motion_energy,
                    m.total_energy,
                    m.stops,
                    m.lane_changes,
                    m.mean_speed
                )),
                None => out.push_str(&format!("{},failed,,,,,,\n", run.policy.label())),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(t: f64, motion: f64, total: f64) -> Metrics {
        Metrics {
            trip_time: t,
            motion_energy: motion,
            total_energy: total,
            stops: 0,
            lane_changes: 0,
            mean_speed: 4000.0 / t,
            distance: 4000.0,
            replans: 0,
            degraded_replans: 0,
            min_gap: None,
        }
    }

    fn run(policy: DriverPolicy, m: Option<Metrics>) -> PolicyRun {
        PolicyRun { policy, metrics: m, error: m.is_none().then(|| "boom".into()), event_log: None }
    }

    #[test]
    fn savings_are_relative_to_baseline() {
        let report = RunReport::new(
            ScenarioConfig::reference(),
            vec![
                run(DriverPolicy::EcoLane, Some(metrics(800.0, 60.0, 200.0))),
                run(DriverPolicy::EcoKeep, Some(metrics(1000.0, 60.0, 250.0))),
                run(DriverPolicy::Human, Some(metrics(500.0, 100.0, 200.0))),
            ],
        );
        assert!(!report.incomplete);
        let human = report.savings.iter().find(|s| s.baseline == DriverPolicy::Human).unwrap();
        assert_eq!(human.motion_pct, 40.0);
        assert_eq!(human.total_pct, 0.0);
        assert_eq!(human.trip_time_pct, -60.0);
        let keep = report.savings.iter().find(|s| s.baseline == DriverPolicy::EcoKeep).unwrap();
        assert_eq!(keep.total_pct, 20.0);
        assert_eq!(report.summary_csv().lines().count(), 4);
    }

    #[test]
    fn failed_run_marks_report_incomplete() {
        let report = RunReport::new(
            ScenarioConfig::reference(),
            vec![run(DriverPolicy::EcoLane, None), run(DriverPolicy::Human, Some(metrics(500.0, 100.0, 200.0)))],
        );
        assert!(report.incomplete);
        assert!(report.savings.is_empty());
        let back: RunReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}
