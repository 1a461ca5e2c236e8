//! The conservative analytic agent: every second it picks the highest STU
//! speed whose projected looper trajectories stay inside margined bounds over
//! a lookahead horizon, using the noisy weld/cut predictions scaled by a
//! safety factor.

use crate::line::LineState;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CAgentConfig {
    /// Margin added inside each looper bound, m.
    pub margin: f64,
    /// Projection horizon, s. Must cover the longest plausible weld.
    pub horizon: usize,
    /// Multiplier on predicted weld/cut durations.
    pub safety_factor: f64,
    /// Candidate speed grid step, m/min.
    pub grid_step: f64,
}

impl Default for CAgentConfig {
    fn default() -> Self {
        CAgentConfig { margin: 15.0, horizon: 300, safety_factor: 1.2, grid_step: 1.0 }
    }
}

/// Extremal projected looper volumes (min looper1, max looper2) when the STU
/// holds `candidate` for `horizon` seconds. Unit schedules follow stage logic
/// with predicted stop durations scaled by `safety_factor`; pure in its
/// inputs.
pub fn project_loopers(state: &LineState, candidate: f64, horizon: usize, safety_factor: f64) -> (f64, f64) {
    state.projection_context(horizon, safety_factor).extremes(candidate)
}

/// The largest grid speed, reachable under the ramp limit and inside the
/// speed-table bounds, whose projection respects both margined looper bounds.
/// When nothing is feasible, returns the least-infeasible candidate (smallest
/// total projected violation, ties to the slower speed), never below the
/// table floor.
pub fn recommend_speed(state: &LineState, cfg: &CAgentConfig) -> f64 {
    let (cap_min, cap_max) = state.stu_caps();
    let ramp = state.config().ramp;
    let low = cap_min.max(state.stu_speed - ramp);
    let high = cap_max.min(state.stu_speed + ramp);
    let high = high.max(low);

    let ctx = state.projection_context(cfg.horizon, cfg.safety_factor);
    let lower_bound = state.looper1.lower + cfg.margin;
    let upper_bound = state.looper2.upper - cfg.margin;

    let mut best_infeasible = low;
    let mut best_violation = f64::INFINITY;
    let mut v = (high / cfg.grid_step).floor() * cfg.grid_step;
    if v < low {
        v = low;
    }
    while v >= low - 1e-9 {
        let (min_v1, max_v2) = ctx.extremes(v);
        if min_v1 > lower_bound && max_v2 < upper_bound {
            return v;
        }
        let violation = (lower_bound - min_v1).max(0.0) + (max_v2 - upper_bound).max(0.0);
        if violation <= best_violation {
            // <= so ties resolve to the slower candidate
            best_violation = violation;
            best_infeasible = v;
        }
        if v == low {
            break;
        }
        v = (v - cfg.grid_step).max(low);
    }
    best_infeasible
}
