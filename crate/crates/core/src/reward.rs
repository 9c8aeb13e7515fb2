//! Reward terms under the three training profiles, and per-episode metrics.

use serde::{Deserialize, Serialize};

/// Clearance band (meters) where the risk and obstacle terms are active.
pub const RISK_BAND: f64 = 0.6;
/// Lower clamp on the minimum range, bounding the risk singularity.
pub const MIN_RANGE_CLAMP: f64 = 0.05;
/// Yaw-rate allowance before the angular term kicks in.
pub const YAW_ALLOWANCE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardProfile {
    pub w_g: f64,
    pub w_o: f64,
    pub w_c: f64,
    pub w_r: f64,
    pub w_t: f64,
    pub w_e: f64,
    pub w_a: f64,
}

impl RewardProfile {
    pub const GO_STRAIGHT: RewardProfile = RewardProfile {
        w_g: 3.0,
        w_o: 0.0,
        w_c: -0.25,
        w_r: 1.0,
        w_t: -1.0,
        w_e: -1.0,
        w_a: -0.5,
    };

    pub const OBSTACLE_AVOIDANCE: RewardProfile = RewardProfile {
        w_g: 1.0,
        w_o: -0.4,
        w_c: -1.0,
        w_r: 0.25,
        w_t: 1.0,
        w_e: 1.0,
        w_a: 0.0,
    };

    pub const FUSION: RewardProfile = RewardProfile {
        w_g: 4.0,
        w_o: 0.0,
        w_c: -1.0,
        w_r: 1.0,
        w_t: 0.0,
        w_e: 0.0,
        w_a: 0.0,
    };

    pub fn by_name(name: &str) -> Option<RewardProfile> {
        match name {
            "go-straight" => Some(Self::GO_STRAIGHT),
            "obstacle-avoidance" => Some(Self::OBSTACLE_AVOIDANCE),
            "fusion" => Some(Self::FUSION),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Robot-goal distance before the step.
    pub d_prev: f64,
    /// Robot-goal distance after the step.
    pub d_now: f64,
    pub min_range: f64,
    pub wz: f64,
    pub collision: bool,
    pub reached: bool,
    pub timeout: bool,
}

/// The seven reward terms of one transition.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RewardTerms {
    pub goal: f64,
    pub obstacle: f64,
    pub collision: f64,
    pub reached: f64,
    pub time: f64,
    pub timeout: f64,
    pub angular: f64,
}

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.goal
            + self.obstacle
            + self.collision
            + self.reached
            + self.time
            + self.timeout
            + self.angular
    }
}

/// `max(0.6 - m, 0) / (0.6 - max(0.6 - m, 0))` with `m` clamped to at least 0.05.
pub fn risk_from_min(min_range: f64) -> f64 {
    let m = min_range.max(MIN_RANGE_CLAMP);
    let excess = (RISK_BAND - m).max(0.0);
    excess / (RISK_BAND - excess)
}

/// Risk score of one scan.
pub fn risk_score(ranges: &[f64]) -> f64 {
    risk_from_min(ranges.iter().copied().fold(f64::INFINITY, f64::min))
}

pub fn reward_terms(p: &RewardProfile, t: &Transition) -> RewardTerms {
    let flag = |on: bool, v: f64| if on { v } else { 0.0 };
    RewardTerms {
        // progress toward the goal is rewarded
        goal: p.w_g * (t.d_prev - t.d_now),
        obstacle: p.w_o * risk_from_min(t.min_range),
        collision: flag(t.collision, 15.0 * p.w_c),
        reached: flag(t.reached, 20.0 * p.w_r),
        time: 0.01 * p.w_t,
        timeout: flag(t.timeout, 5.0 * p.w_e),
        angular: p.w_a * (t.wz.abs() - YAW_ALLOWANCE).max(0.0),
    }
}

pub fn step_reward(p: &RewardProfile, t: &Transition) -> f64 {
    reward_terms(p, t).total()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Crash,
    Timeout,
    /// The episode was aborted by a simulator or planner error.
    Failed,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Crash => "crash",
            Outcome::Timeout => "timeout",
            Outcome::Failed => "failed",
        }
    }
}

/// Per-step record needed to score an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub min_range: f64,
    pub goal_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeMetrics {
    pub success: bool,
    pub crash: bool,
    pub timeout: bool,
    /// Seconds to reach the goal; only set on success.
    pub arriving_time: Option<f64>,
    pub arsps: f64,
    pub ansps: f64,
    pub steps: usize,
}

/// Scores an episode from its start distance, per-step records and outcome.
pub fn episode_metrics(
    d_start: f64,
    steps: &[StepRecord],
    outcome: Outcome,
    dt: f64,
) -> EpisodeMetrics {
    let n = steps.len();
    let d_end = steps.last().map_or(d_start, |s| s.goal_distance);
    let (arsps, ansps) = if n == 0 {
        (0.0, 0.0)
    } else {
        let risk: f64 = steps.iter().map(|s| risk_from_min(s.min_range)).sum();
        let ansps = if d_start > 0.0 {
            (d_start - d_end) / (d_start * n as f64)
        } else {
            0.0
        };
        (risk / n as f64, ansps)
    };
    EpisodeMetrics {
        success: outcome == Outcome::Success,
        crash: outcome == Outcome::Crash,
        timeout: outcome == Outcome::Timeout,
        arriving_time: (outcome == Outcome::Success).then_some(n as f64 * dt),
        arsps,
        ansps,
        steps: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(d_prev: f64, d_now: f64, min_range: f64) -> Transition {
        Transition {
            d_prev,
            d_now,
            min_range,
            wz: 0.0,
            collision: false,
            reached: false,
            timeout: false,
        }
    }

    #[test]
    fn fusion_progress_step() {
        let r = step_reward(&RewardProfile::FUSION, &quiet(5.0, 4.9, 6.0));
        assert!((r - 0.4).abs() < 1e-12);
    }

    #[test]
    fn obstacle_term_at_half_band() {
        let t = reward_terms(&RewardProfile::OBSTACLE_AVOIDANCE, &quiet(5.0, 5.0, 0.3));
        assert!((t.obstacle + 0.4).abs() < 1e-12);
    }

    #[test]
    fn collision_penalty() {
        let mut t = quiet(5.0, 5.0, 6.0);
        t.collision = true;
        assert_eq!(reward_terms(&RewardProfile::FUSION, &t).collision, -15.0);
    }

    #[test]
    fn risk_values() {
        assert_eq!(risk_from_min(0.6), 0.0);
        assert_eq!(risk_from_min(3.0), 0.0);
        assert!((risk_from_min(0.3) - 1.0).abs() < 1e-12);
        assert!((risk_from_min(0.45) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(risk_from_min(0.0), risk_from_min(0.05));
    }

    #[test]
    fn angular_term_is_symmetric() {
        let mut t = quiet(1.0, 1.0, 6.0);
        t.wz = -1.0;
        let left = reward_terms(&RewardProfile::GO_STRAIGHT, &t).angular;
        t.wz = 1.0;
        let right = reward_terms(&RewardProfile::GO_STRAIGHT, &t).angular;
        assert_eq!(left, right);
        assert!((left + 0.35).abs() < 1e-12);
    }

    #[test]
    fn metrics_formulas() {
        let steps: Vec<StepRecord> = (1..=100)
            .map(|k| StepRecord {
                min_range: 6.0,
                goal_distance: 10.0 - k as f64 * 0.1,
            })
            .collect();
        let m = episode_metrics(10.0, &steps, Outcome::Success, 0.1);
        assert!((m.ansps - 0.01).abs() < 1e-12);
        assert_eq!(m.arsps, 0.0);
        assert!((m.arriving_time.unwrap() - 10.0).abs() < 1e-9);

        let still = vec![
            StepRecord {
                min_range: 6.0,
                goal_distance: 4.0
            };
            10
        ];
        let m = episode_metrics(4.0, &still, Outcome::Timeout, 0.1);
        assert_eq!(m.ansps, 0.0);
        assert_eq!(m.arriving_time, None);
        assert!(m.timeout && !m.success && !m.crash);
    }
}
