//! The orchestrator: mapping every control tick, planning at 1 Hz,
//! exploration at 0.2 Hz and control at 30 Hz, all on simulated time.
//!
//! Each tick runs sense -> map -> [plan] -> [explore] -> act in lock-step.
//! A re-selection trigger that fires between exploration ticks is handled at
//! the next planning tick.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exploration::{
    candidate_cells, goal_is_known, score_candidates, select_exploration_point, should_reselect,
    ExplorationConfig, ExplorationState, Reselect, ScoredCandidate,
};
use crate::geometry::{Pose, Vec2};
use crate::occupancy::{Cell, CellClass, OccupancyGrid};
use crate::planner::{extract_waypoint, plan_path, GridPath, PlanningMap};
use crate::policy::{build_observation, Controller, Decision, Observation, PolicyBundle, ScanHistory};
use crate::reward::{episode_metrics, EpisodeMetrics, Outcome, StepRecord, Transition};
use crate::scenarios::generate;
use crate::world::{Action, ScenarioSpec, SimConfig, StepEvent, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StackMode {
    /// Both layers, lower layer from the bundle.
    Full,
    /// No upper layer: the final goal is the lower layer's goal input.
    LowerOnly,
    /// Both layers, lower layer replaced by the scripted experts.
    UpperWithScriptedLower,
}

impl std::str::FromStr for StackMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(StackMode::Full),
            "lower-only" => Ok(StackMode::LowerOnly),
            "upper-with-scripted-lower" => Ok(StackMode::UpperWithScriptedLower),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub control_hz: f64,
    pub plan_hz: f64,
    pub explore_hz: f64,
    pub arrival_radius: f64,
    /// Simulated seconds before the episode times out.
    pub timeout: f64,
    pub mode: StackMode,
    pub exploration: ExplorationConfig,
    pub grid_resolution: f64,
    /// Beam count of the mapping sweep (the policy uses its own beam count).
    pub mapping_beams: usize,
    /// Clearance added to the robot radius when inflating obstacles.
    pub inflation_margin: f64,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            control_hz: 30.0,
            plan_hz: 1.0,
            explore_hz: 0.2,
            arrival_radius: 0.3,
            timeout: 90.0,
            mode: StackMode::Full,
            exploration: ExplorationConfig::default(),
            grid_resolution: 0.1,
            mapping_beams: 360,
            inflation_margin: 0.1,
        }
    }
}

impl StackConfig {
    pub fn lower_only(timeout: f64) -> Self {
        Self {
            mode: StackMode::LowerOnly,
            timeout,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.control_hz >= self.plan_hz && self.plan_hz >= self.explore_hz && self.explore_hz > 0.0)
        {
            return Err(Error::Config(
                "rates must satisfy control_hz >= plan_hz >= explore_hz > 0".into(),
            ));
        }
        if !(self.timeout > 0.0 && self.grid_resolution > 0.0 && self.mapping_beams > 0) {
            return Err(Error::Config(
                "timeout, grid resolution and mapping beams must be positive".into(),
            ));
        }
        self.exploration.validate()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.control_hz
    }

    fn ticks_per(&self, hz: f64) -> usize {
        ((self.control_hz / hz).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Counters {
    pub mapping: usize,
    pub planning: usize,
    /// Scheduled exploration ticks.
    pub exploration: usize,
    /// Extra selections forced by triggers between exploration ticks.
    pub reselections: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub pose: Pose,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplorationEvent {
    pub t: f64,
    pub cell: Cell,
    pub point: Vec2,
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub scenario: String,
    pub seed: u64,
    pub outcome: Outcome,
    pub metrics: EpisodeMetrics,
    pub trajectory: Vec<TrajectoryPoint>,
    pub counters: Counters,
    pub exploration_events: Vec<ExplorationEvent>,
    /// Set when the episode was aborted (outcome `failed`).
    pub error: Option<String>,
}

/// What the stack exposes to observers on every control tick.
pub struct TickInfo<'a> {
    pub step: usize,
    pub t: f64,
    pub pose: Pose,
    pub observation: &'a Observation,
    pub decision: &'a Decision,
    pub waypoint: Vec2,
    pub exploration_point: Option<Vec2>,
    pub transition: Transition,
}

/// Candidate table produced at an exploration selection.
pub struct SelectionInfo<'a> {
    pub t: f64,
    pub scored: &'a [ScoredCandidate],
    pub chosen: Option<usize>,
}

pub trait EpisodeObserver {
    fn on_tick(&mut self, _tick: &TickInfo<'_>) {}
    fn on_selection(&mut self, _sel: &SelectionInfo<'_>) {}
}

impl EpisodeObserver for () {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Goal,
    Exploration(Cell),
    None,
}

struct Upper {
    grid: OccupancyGrid,
    state: ExplorationState,
    target: Target,
    pending: bool,
    unreachable_cycles: usize,
    path: Option<GridPath>,
}

/// Runs one episode to success, crash, timeout or failure.
pub fn run_episode(spec: &ScenarioSpec, bundle: &PolicyBundle, cfg: &StackConfig) -> EpisodeResult {
    run_episode_observed(spec, bundle, cfg, &mut ())
}

pub fn run_episode_observed(
    spec: &ScenarioSpec,
    bundle: &PolicyBundle,
    cfg: &StackConfig,
    observer: &mut dyn EpisodeObserver,
) -> EpisodeResult {
    let failed = |e: String| {
        let d = spec.robot_start.position().distance(spec.goal);
        EpisodeResult {
            scenario: spec.name.clone(),
            seed: spec.seed,
            outcome: Outcome::Failed,
            metrics: episode_metrics(d, &[], Outcome::Failed, cfg.dt()),
            trajectory: Vec::new(),
            counters: Counters::default(),
            exploration_events: Vec::new(),
            error: Some(e),
        }
    };
    if let Err(e) = cfg.validate().and_then(|_| bundle.validate()) {
        return failed(e.to_string());
    }
    let sim = SimConfig {
        limits: bundle.limits,
        arrival_radius: cfg.arrival_radius,
    };
    let world = match World::spawn(spec, sim) {
        Ok(w) => w,
        Err(e) => return failed(e.to_string()),
    };
    let scripted;
    let controller = if cfg.mode == StackMode::UpperWithScriptedLower {
        scripted = PolicyBundle {
            controller: Controller::Scripted(Default::default()),
            ..bundle.clone()
        };
        &scripted
    } else {
        bundle
    };
    Episode::new(world, bundle, controller, cfg).run(observer)
}

struct Episode<'a> {
    world: World,
    critic: &'a PolicyBundle,
    controller: &'a PolicyBundle,
    cfg: &'a StackConfig,
}

impl<'a> Episode<'a> {
    fn new(
        world: World,
        critic: &'a PolicyBundle,
        controller: &'a PolicyBundle,
        cfg: &'a StackConfig,
    ) -> Self {
        Self {
            world,
            critic,
            controller,
            cfg,
        }
    }

    fn run(mut self, observer: &mut dyn EpisodeObserver) -> EpisodeResult {
        let cfg = self.cfg;
        let dt = cfg.dt();
        let obs_cfg = self.controller.observation;
        let goal = self.world.goal();
        let spec = self.world.scenario.clone();
        let d_start = self.world.goal_distance();
        let max_steps = (cfg.timeout / dt - 1e-9).ceil() as usize;
        let plan_every = cfg.ticks_per(cfg.plan_hz);
        let explore_every = cfg.ticks_per(cfg.explore_hz);
        let use_upper = cfg.mode != StackMode::LowerOnly;

        let mut upper = use_upper.then(|| {
            let grid = OccupancyGrid::covering(&spec.bounds, cfg.grid_resolution);
            let state = ExplorationState::new(&grid, goal);
            Upper {
                grid,
                state,
                target: Target::None,
                pending: false,
                unreachable_cycles: 0,
                path: None,
            }
        });
        let mut history = ScanHistory::new(obs_cfg.history);
        let mut waypoint = goal;
        let mut counters = Counters::default();
        let mut steps = Vec::with_capacity(max_steps.min(4096));
        let mut trajectory = Vec::with_capacity(max_steps.min(4096));
        let mut events = Vec::new();
        let mut outcome = Outcome::Timeout;
        let mut error = None;

        for k in 0..max_steps {
            let t = k as f64 * dt;
            let pose = self.world.robot.pose;
            let scan = self.world.raycast(obs_cfg.beams, obs_cfg.max_range);
            history.push(scan);

            if let Some(up) = upper.as_mut() {
                let sweep = self.world.raycast_static(cfg.mapping_beams, obs_cfg.max_range);
                if let Err(e) = up.grid.integrate_scan(pose, &sweep, obs_cfg.max_range) {
                    outcome = Outcome::Failed;
                    error = Some(e.to_string());
                    break;
                }
                counters.mapping += 1;
                let explore_due = k % explore_every == 0;
                if k % plan_every == 0 || explore_due {
                    counters.planning += 1;
                    if explore_due {
                        counters.exploration += 1;
                    }
                    let base = build_observation(
                        history.scans(),
                        obs_cfg.history,
                        pose,
                        goal,
                        self.world.robot.velocity,
                    );
                    if let Some(wp) =
                        self.upper_tick(up, &base, pose, explore_due, t, &mut counters, &mut events, observer)
                    {
                        waypoint = wp;
                    }
                }
            }

            let obs = build_observation(
                history.scans(),
                obs_cfg.history,
                pose,
                waypoint,
                self.world.robot.velocity,
            );
            let decision = self.controller.decide(&obs);
            let d_prev = self.world.goal_distance();
            let min_range = obs.min_range();
            let event = self.world.step(decision.action, dt);
            let d_now = self.world.goal_distance();
            let last = k + 1 == max_steps;
            let transition = Transition {
                d_prev,
                d_now,
                min_range,
                wz: decision.action.wz,
                collision: event == StepEvent::Collision,
                reached: event == StepEvent::GoalReached,
                timeout: last && event == StepEvent::None,
            };
            steps.push(StepRecord {
                min_range,
                goal_distance: d_now,
            });
            trajectory.push(TrajectoryPoint {
                t,
                pose: self.world.robot.pose,
                action: decision.action,
            });
            observer.on_tick(&TickInfo {
                step: k,
                t,
                pose,
                observation: &obs,
                decision: &decision,
                waypoint,
                exploration_point: upper.as_ref().and_then(|u| match u.target {
                    Target::Exploration(c) => Some(u.grid.cell_center(c)),
                    _ => None,
                }),
                transition,
            });
            match event {
                StepEvent::Collision => {
                    outcome = Outcome::Crash;
                    break;
                }
                StepEvent::GoalReached => {
                    outcome = Outcome::Success;
                    break;
                }
                StepEvent::None => {}
            }
        }

        EpisodeResult {
            scenario: spec.name.clone(),
            seed: spec.seed,
            outcome,
            metrics: episode_metrics(d_start, &steps, outcome, dt),
            trajectory,
            counters,
            exploration_events: events,
            error,
        }
    }

    /// One upper-layer tick. Returns the refreshed waypoint, if any.
    #[allow(clippy::too_many_arguments)]
    fn upper_tick(
        &self,
        up: &mut Upper,
        base: &Observation,
        pose: Pose,
        explore_due: bool,
        t: f64,
        counters: &mut Counters,
        events: &mut Vec<ExplorationEvent>,
        observer: &mut dyn EpisodeObserver,
    ) -> Option<Vec2> {
        let cfg = self.cfg;
        let goal = self.world.goal();
        let inflation = self.world.scenario.robot_radius + cfg.inflation_margin;
        let map = PlanningMap::new(&up.grid, inflation);
        let start = map.snap_to_free(map.world_to_cell(pose.position()), 3)?;

        match should_reselect(&up.state, &up.grid, goal, pose, &cfg.exploration) {
            Reselect::GoalNowKnown => up.state.goal_known = true,
            Reselect::Reselect(_) => up.pending = true,
            Reselect::No => {}
        }
        up.state.goal_known = up.state.goal_known || goal_is_known(&up.grid, goal);

        // Direct to the goal once it is known free and reachable.
        if up.state.goal_known && up.grid.classify(up.grid.world_to_cell(goal)) == Some(CellClass::Free) {
            if let Some(goal_cell) = map.snap_to_free(map.world_to_cell(goal), 3) {
                if let Ok(path) = plan_path(&map, start, goal_cell) {
                    up.target = Target::Goal;
                    let wp = if goal_cell == map.world_to_cell(goal) && path.cells.len() > 1 {
                        // aim at the goal itself rather than its cell center
                        let last = extract_waypoint(&path, &map, pose.position());
                        if last == map.cell_center(goal_cell) { goal } else { last }
                    } else {
                        extract_waypoint(&path, &map, pose.position())
                    };
                    up.path = Some(path);
                    return Some(wp);
                }
            }
        }

        let need = explore_due || up.pending || !matches!(up.target, Target::Exploration(_));
        if need {
            if !explore_due {
                counters.reselections += 1;
            }
            up.pending = false;
            let candidates = candidate_cells(&up.grid, &map, cfg.exploration.candidate_cap);
            let critic = |g: Vec2| self.critic.value(&base.with_goal(g));
            let scored = score_candidates(&candidates, &map, goal, pose, &critic);
            let chosen = select_exploration_point(&scored, cfg.exploration.gamma);
            observer.on_selection(&SelectionInfo {
                t,
                scored: &scored,
                chosen,
            });
            match chosen {
                Some(i) => {
                    up.unreachable_cycles = 0;
                    let cell = scored[i].cell;
                    up.state.select(cell, &up.grid);
                    up.target = Target::Exploration(cell);
                    events.push(ExplorationEvent {
                        t,
                        cell,
                        point: scored[i].point,
                        candidates: scored.len(),
                    });
                }
                None => {
                    // hold the previous point for one cycle, then fall back to
                    // the nearest frontier by straight-line distance
                    up.unreachable_cycles += 1;
                    if up.unreachable_cycles > 1 {
                        let nearest = candidates.iter().copied().min_by(|a, b| {
                            let da = up.grid.cell_center(*a).distance(pose.position());
                            let db = up.grid.cell_center(*b).distance(pose.position());
                            da.total_cmp(&db).then(a.cmp(b))
                        });
                        if let Some(cell) = nearest {
                            up.state.select(cell, &up.grid);
                            up.target = Target::Exploration(cell);
                        }
                    }
                }
            }
        }

        let Target::Exploration(cell) = up.target else {
            return None;
        };
        match plan_path(&map, start, cell) {
            Ok(path) => {
                let wp = extract_waypoint(&path, &map, pose.position());
                up.path = Some(path);
                Some(wp)
            }
            Err(_) => {
                up.pending = true;
                None
            }
        }
    }
}

/// A scenario to instantiate per episode seed.
#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioSource {
    /// A built-in generator; each seed regenerates the layout.
    Named(String),
    /// A fixed layout; only the simulation seed changes.
    Fixed(ScenarioSpec),
}

impl ScenarioSource {
    pub fn named(name: &str) -> Self {
        ScenarioSource::Named(name.to_string())
    }

    pub fn name(&self) -> &str {
        match self {
            ScenarioSource::Named(n) => n,
            ScenarioSource::Fixed(s) => &s.name,
        }
    }

    pub fn instantiate(&self, seed: u64) -> Result<ScenarioSpec> {
        match self {
            ScenarioSource::Named(n) => generate(n, seed),
            ScenarioSource::Fixed(s) => Ok(s.with_seed(seed)),
        }
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn json_array(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| fmt_f64(*v)).collect();
    format!("[{}]", parts.join(","))
}

/// Collects one JSON line per control tick.
#[derive(Default)]
pub struct TraceRecorder {
    pub lines: String,
}

impl EpisodeObserver for TraceRecorder {
    fn on_tick(&mut self, tick: &TickInfo<'_>) {
        let p = tick.pose;
        let a = tick.decision.action;
        let alpha = tick
            .decision
            .alpha
            .map_or_else(|| "null".to_string(), |al| json_array(&al));
        let explore = tick
            .exploration_point
            .map_or_else(|| "null".to_string(), |e| json_array(&[e.x, e.y]));
        let _ = writeln!(
            self.lines,
            "{{\"step\":{},\"t\":{},\"pose\":{},\"action\":{},\"alpha\":{},\"waypoint\":{},\"exploration_point\":{}}}",
            tick.step,
            fmt_f64(tick.t),
            json_array(&[p.x, p.y, p.theta]),
            json_array(&[a.vx, a.vy, a.wz]),
            alpha,
            json_array(&[tick.waypoint.x, tick.waypoint.y]),
            explore
        );
    }
}

pub const METRICS_CSV_HEADER: &str =
    "scenario,seed,success,crash,timeout,arriving_time,ARSPS,ANSPS,steps";

/// One metrics CSV row (no trailing newline).
pub fn metrics_csv_row(r: &EpisodeResult) -> String {
    let m = &r.metrics;
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.scenario,
        r.seed,
        u8::from(m.success),
        u8::from(m.crash),
        u8::from(m.timeout),
        m.arriving_time.map(fmt_f64).unwrap_or_default(),
        fmt_f64(m.arsps),
        fmt_f64(m.ansps),
        m.steps
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{blind_alley, empty_room};

    #[test]
    fn empty_room_reaches_goal_without_exploring() {
        let spec = empty_room(1);
        let r = run_episode(&spec, &PolicyBundle::scripted(), &StackConfig::default());
        assert_eq!(r.outcome, Outcome::Success, "{:?}", r.error);
        assert!(r.exploration_events.is_empty());
        assert!(r.metrics.success && r.metrics.arriving_time.is_some());
    }

    #[test]
    fn lower_only_straight_line() {
        let spec = empty_room(1);
        let r = run_episode(&spec, &PolicyBundle::scripted(), &StackConfig::lower_only(30.0));
        assert_eq!(r.outcome, Outcome::Success);
        assert_eq!(r.counters, Counters::default());
    }

    #[test]
    fn cadence_counts_match_rates() {
        let spec = blind_alley(2);
        let cfg = StackConfig {
            timeout: 10.0,
            ..StackConfig::default()
        };
        // a robot that never moves keeps the episode running to timeout
        let mut bundle = PolicyBundle::scripted();
        if let Controller::Scripted(s) = &mut bundle.controller {
            s.speed_gain = 0.0;
            s.turn_gain = 0.0;
            s.repulsion_gain = 0.0;
        }
        let r = run_episode(&spec, &bundle, &cfg);
        assert_eq!(r.outcome, Outcome::Timeout);
        assert_eq!(r.counters.mapping, 300);
        assert!((r.counters.planning as i64 - 10).abs() <= 1);
        assert!((r.counters.exploration as i64 - 2).abs() <= 1);
    }

    #[test]
    fn trace_lines_per_tick() {
        let spec = empty_room(3);
        let mut rec = TraceRecorder::default();
        let r = run_episode_observed(&spec, &PolicyBundle::scripted(), &StackConfig::default(), &mut rec);
        assert_eq!(rec.lines.lines().count(), r.metrics.steps);
        let first: serde_json::Value = serde_json::from_str(rec.lines.lines().next().unwrap()).unwrap();
        assert_eq!(first["step"], 0);
    }

    #[test]
    fn invalid_config_marks_failed() {
        let cfg = StackConfig {
            plan_hz: 100.0,
            ..StackConfig::default()
        };
        let r = run_episode(&empty_room(1), &PolicyBundle::scripted(), &cfg);
        assert_eq!(r.outcome, Outcome::Failed);
        assert!(r.error.is_some());
    }
}
