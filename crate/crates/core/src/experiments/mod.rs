//! Method matrix, closed-loop trials, metric bucketing and multi-trial
//! comparison reports.

mod metrics;
mod report;
mod trial;

pub use metrics::{
    bucket_metrics, read_metrics_csv, write_metrics_csv, MetricSample, METRICS_HEADER,
};
pub use report::{
    compare_methods, load_trials, render_csv, render_text, write_report, GroupStats, MethodDelta,
    Report, Stat,
};
pub use trial::{
    run_trial, run_trials, summarize, TrialOutcome, TrialResult, TrialSpec, TrialSummary,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsm::Levels;
use crate::planner::PathPlanMode;
use crate::utility::{Aggregation, UtilityKind};

/// Every method name, in report order.
pub const METHODS: &[&str] = &[
    "A", "A_L", "A_S", "A_1", "OL_0", "OL_1", "OL_1_3", "OL_2", "OL_2_3", "INTER_0", "A_O",
    "A_DW_O",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub name: &'static str,
    pub levels: Levels,
    pub utility: UtilityKind,
    pub aggregation: Aggregation,
    /// Uses the configured long-duration factor.
    pub long_run: bool,
}

impl MethodConfig {
    pub fn by_name(name: &str) -> Result<Self> {
        let all = Levels {
            first: true,
            second: true,
            third: true,
        };
        let lv = |first, second, third| Levels {
            first,
            second,
            third,
        };
        let m = |name, levels, utility, aggregation| MethodConfig {
            name,
            levels,
            utility,
            aggregation,
            long_run: false,
        };
        use Aggregation::*;
        use UtilityKind::*;
        Ok(match name {
            "A" => m("A", all, U1, WeightedAverage),
            "A_L" => MethodConfig {
                long_run: true,
                ..m("A_L", all, U1, WeightedAverage)
            },
            "A_S" => m("A_S", all, U1, WeightedSum),
            "A_1" => m("A_1", lv(true, false, false), U1, WeightedAverage),
            "OL_0" => m("OL_0", lv(false, false, false), U1, GoalOnly),
            "OL_1" => m("OL_1", lv(true, false, false), U1, GoalOnly),
            "OL_1_3" => m("OL_1_3", lv(true, false, true), U1, GoalOnly),
            "OL_2" => m("OL_2", lv(false, true, false), U1, GoalOnly),
            "OL_2_3" => m("OL_2_3", lv(false, true, true), U1, GoalOnly),
            "INTER_0" => m("INTER_0", lv(false, false, false), U1, Interpolated),
            "A_O" => m("A_O", all, U2, WeightedAverage),
            "A_DW_O" => m("A_DW_O", all, U3, WeightedAverage),
            other => return Err(Error::UnknownMethod(other.to_string())),
        })
    }

    pub fn plan_mode(&self) -> PathPlanMode {
        PathPlanMode {
            first_level: self.levels.first,
            aggregation: self.aggregation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_is_complete_and_consistent() {
        for name in METHODS {
            let m = MethodConfig::by_name(name).unwrap();
            assert_eq!(m.name, *name);
            // The numeric suffix lists the enabled levels.
            if let Some(suffix) = name.strip_prefix("OL_").or(name.strip_prefix("INTER_")) {
                let want = |k: char| suffix.contains(k);
                assert_eq!(m.levels.first, want('1'));
                assert_eq!(m.levels.second, want('2'));
                assert_eq!(m.levels.third, want('3'));
            }
        }
        assert_eq!(
            MethodConfig::by_name("A_1").unwrap().levels,
            Levels {
                first: true,
                second: false,
                third: false
            }
        );
        assert_eq!(
            MethodConfig::by_name("A_O").unwrap().utility,
            UtilityKind::U2
        );
        assert_eq!(
            MethodConfig::by_name("A_DW_O").unwrap().utility,
            UtilityKind::U3
        );
        assert_eq!(
            MethodConfig::by_name("A_S").unwrap().aggregation,
            Aggregation::WeightedSum
        );
        assert!(MethodConfig::by_name("A_L").unwrap().long_run);
        assert!(matches!(
            MethodConfig::by_name("B"),
            Err(Error::UnknownMethod(_))
        ));
    }
}
