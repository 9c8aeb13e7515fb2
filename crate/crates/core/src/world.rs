//! Deterministic 2D world: static geometry, random-walking obstacles,
//! holonomic robot kinematics, simulated lidar and collision checks.
//!
//! Everything that evolves over time lives in [`World`]; two worlds spawned
//! from the same [`ScenarioSpec`] and driven by the same actions stay
//! bitwise identical.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ray_circle, wrap_angle, Pose, Rect, Shape, Vec2};

pub const SCENARIO_SCHEMA: u32 = 1;

/// Smallest range a beam can report; a ray starting inside geometry reports this.
pub const MIN_RANGE: f64 = 1e-3;

/// Default lower-layer tick.
pub const DEFAULT_DT: f64 = 1.0 / 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub vx: f64,
    pub vy: f64,
    pub wz: f64,
}

impl Action {
    pub const ZERO: Action = Action {
        vx: 0.0,
        vy: 0.0,
        wz: 0.0,
    };

    pub const fn new(vx: f64, vy: f64, wz: f64) -> Self {
        Self { vx, vy, wz }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.vx, self.vy, self.wz]
    }
}

/// Closed interval per action channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionLimits {
    pub vx: [f64; 2],
    pub vy: [f64; 2],
    pub wz: [f64; 2],
}

impl Default for ActionLimits {
    fn default() -> Self {
        Self {
            vx: [-0.5, 1.0],
            vy: [-0.5, 0.5],
            wz: [-1.5, 1.5],
        }
    }
}

impl ActionLimits {
    pub fn clamp(&self, a: Action) -> Action {
        let c = |v: f64, [lo, hi]: [f64; 2]| if v.is_nan() { 0.0 } else { v.clamp(lo, hi) };
        Action::new(c(a.vx, self.vx), c(a.vy, self.vy), c(a.wz, self.wz))
    }

    pub fn contains(&self, a: Action) -> bool {
        let inside = |v: f64, [lo, hi]: [f64; 2]| v >= lo && v <= hi;
        inside(a.vx, self.vx) && inside(a.vy, self.vy) && inside(a.wz, self.wz)
    }

    pub fn channels(&self) -> [[f64; 2]; 3] {
        [self.vx, self.vy, self.wz]
    }

    pub fn max_forward_speed(&self) -> f64 {
        self.vx[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomWalk {
    /// Probability of drawing a fresh uniform heading on each step.
    pub turn_probability: f64,
    /// Area the obstacle reflects inside; the scenario bounds when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Rect>,
}

impl Default for RandomWalk {
    fn default() -> Self {
        Self {
            turn_probability: 0.05,
            region: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub radius: f64,
    pub max_speed: f64,
    #[serde(default)]
    pub behavior: RandomWalk,
    /// Fixed spawn point; sampled collision-free inside the region when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub schema: u32,
    #[serde(default)]
    pub name: String,
    pub bounds: Rect,
    pub static_shapes: Vec<Shape>,
    pub obstacles: Vec<ObstacleSpec>,
    pub robot_start: Pose,
    pub goal: Vec2,
    pub robot_radius: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = serde_json::from_str(text)?;
        if spec.schema != SCENARIO_SCHEMA {
            return Err(Error::Schema {
                found: spec.schema,
                expected: SCENARIO_SCHEMA,
            });
        }
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// Distance from `p` to the nearest static shape.
    pub fn static_clearance(&self, p: Vec2) -> f64 {
        self.static_shapes
            .iter()
            .map(|s| s.distance_to(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidScenario(m));
        if self.schema != SCENARIO_SCHEMA {
            return Err(Error::Schema {
                found: self.schema,
                expected: SCENARIO_SCHEMA,
            });
        }
        if !(self.robot_radius > 0.0 && self.robot_radius.is_finite()) {
            return invalid(format!("robot radius {} must be positive", self.robot_radius));
        }
        if !(self.bounds.width() > 0.0 && self.bounds.height() > 0.0) {
            return invalid("bounds must have positive area".into());
        }
        let start = self.robot_start.position();
        for (what, p) in [("robot start", start), ("goal", self.goal)] {
            if !p.is_finite() || !self.bounds.contains(p) {
                return invalid(format!("{what} ({:.3}, {:.3}) is outside bounds", p.x, p.y));
            }
            if self.static_clearance(p) <= self.robot_radius {
                return invalid(format!(
                    "{what} ({:.3}, {:.3}) lies inside inflated static geometry",
                    p.x, p.y
                ));
            }
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.max_speed >= 0.0 && o.max_speed.is_finite()) {
                return invalid(format!("obstacle {i}: max_speed must be >= 0"));
            }
            if !(o.radius > 0.0) {
                return invalid(format!("obstacle {i}: radius must be positive"));
            }
            if !(0.0..=1.0).contains(&o.behavior.turn_probability) {
                return invalid(format!("obstacle {i}: turn probability outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub pose: Pose,
    /// Robot-frame velocity (v_x, v_y, w_z) last commanded.
    pub velocity: Action,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub position: Vec2,
    pub velocity: Vec2,
    pub radius: f64,
    pub max_speed: f64,
    pub turn_probability: f64,
    pub region: Rect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    None,
    Collision,
    GoalReached,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub limits: ActionLimits,
    pub arrival_radius: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            limits: ActionLimits::default(),
            arrival_radius: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub scenario: Arc<ScenarioSpec>,
    pub config: SimConfig,
    pub robot: RobotState,
    pub obstacles: Vec<Obstacle>,
    pub sim_time: f64,
    rng: ChaCha8Rng,
}

const SPAWN_ATTEMPTS: usize = 1000;
const SPAWN_ROBOT_CLEARANCE: f64 = 1.0;

impl World {
    pub fn spawn(spec: &ScenarioSpec, config: SimConfig) -> Result<World> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let start = spec.robot_start.position();
        let mut obstacles: Vec<Obstacle> = Vec::with_capacity(spec.obstacles.len());
        for (i, o) in spec.obstacles.iter().enumerate() {
            let region = o.behavior.region.unwrap_or(spec.bounds);
            let fits = |p: Vec2, placed: &[Obstacle]| {
                p.distance(start) > o.radius + spec.robot_radius + SPAWN_ROBOT_CLEARANCE
                    && p.distance(spec.goal) > o.radius + spec.robot_radius
                    && spec.static_clearance(p) > o.radius
                    && placed
                        .iter()
                        .all(|q| q.position.distance(p) > q.radius + o.radius)
            };
            let position = match o.start {
                Some(p) => p,
                None => {
                    let inner = region.shrink(o.radius);
                    if !(inner.width() > 0.0 && inner.height() > 0.0) {
                        return Err(Error::InvalidScenario(format!(
                            "obstacle {i}: region too small for radius {}",
                            o.radius
                        )));
                    }
                    let mut found = None;
                    for _ in 0..SPAWN_ATTEMPTS {
                        let p = Vec2::new(
                            rng.random_range(inner.min.x..=inner.max.x),
                            rng.random_range(inner.min.y..=inner.max.y),
                        );
                        if fits(p, &obstacles) {
                            found = Some(p);
                            break;
                        }
                    }
                    found.ok_or_else(|| {
                        Error::InvalidScenario(format!("obstacle {i}: no collision-free spawn"))
                    })?
                }
            };
            let heading = rng.random_range(-PI..PI);
            obstacles.push(Obstacle {
                position,
                velocity: Vec2::from_angle(heading) * o.max_speed,
                radius: o.radius,
                max_speed: o.max_speed,
                turn_probability: o.behavior.turn_probability,
                region,
            });
        }
        Ok(World {
            scenario: Arc::new(spec.clone()),
            config,
            robot: RobotState {
                pose: spec.robot_start,
                velocity: Action::ZERO,
            },
            obstacles,
            sim_time: 0.0,
            rng,
        })
    }

    pub fn goal(&self) -> Vec2 {
        self.scenario.goal
    }

    pub fn goal_distance(&self) -> f64 {
        self.robot.pose.position().distance(self.scenario.goal)
    }

    /// Advances the world by `dt`; out-of-range actions are clamped.
    pub fn step(&mut self, action: Action, dt: f64) -> StepEvent {
        let action = self.config.limits.clamp(action);
        let pose = self.robot.pose;
        let world_vel = Vec2::new(action.vx, action.vy).rotate(pose.theta);
        self.robot.pose = Pose::new(
            pose.x + world_vel.x * dt,
            pose.y + world_vel.y * dt,
            wrap_angle(pose.theta + action.wz * dt),
        );
        self.robot.velocity = action;

        let shapes = &self.scenario.static_shapes;
        for o in &mut self.obstacles {
            if o.max_speed > 0.0 && self.rng.random::<f64>() < o.turn_probability {
                let heading = self.rng.random_range(-PI..PI);
                o.velocity = Vec2::from_angle(heading) * o.max_speed;
            }
            let mut next = o.position + o.velocity * dt;
            let r = &o.region;
            if next.x - o.radius < r.min.x || next.x + o.radius > r.max.x {
                o.velocity.x = -o.velocity.x;
                next.x = o.position.x + o.velocity.x * dt;
            }
            if next.y - o.radius < r.min.y || next.y + o.radius > r.max.y {
                o.velocity.y = -o.velocity.y;
                next.y = o.position.y + o.velocity.y * dt;
            }
            if shapes.iter().any(|s| s.distance_to(next) < o.radius) {
                o.velocity = -o.velocity;
            } else {
                o.position = next;
            }
        }
        self.sim_time += dt;

        if self.check_collision() {
            StepEvent::Collision
        } else if self.goal_distance() < self.config.arrival_radius {
            StepEvent::GoalReached
        } else {
            StepEvent::None
        }
    }

    /// True iff the robot disc intersects a static shape or an obstacle disc.
    pub fn check_collision(&self) -> bool {
        let p = self.robot.pose.position();
        let r = self.scenario.robot_radius;
        self.scenario
            .static_shapes
            .iter()
            .any(|s| s.distance_to(p) < r)
            || self
                .obstacles
                .iter()
                .any(|o| o.position.distance(p) < o.radius + r)
    }

    /// Full lidar sweep: static shapes and obstacle discs.
    pub fn raycast(&self, beams: usize, max_range: f64) -> Vec<f64> {
        self.sweep(beams, max_range, true)
    }

    /// Lidar sweep over static geometry only (used for mapping).
    pub fn raycast_static(&self, beams: usize, max_range: f64) -> Vec<f64> {
        self.sweep(beams, max_range, false)
    }

    fn sweep(&self, beams: usize, max_range: f64, with_obstacles: bool) -> Vec<f64> {
        assert!(beams >= 1, "raycast needs at least one beam");
        let pose = self.robot.pose;
        let origin = pose.position();
        (0..beams)
            .map(|i| {
                let dir = Vec2::from_angle(pose.theta + 2.0 * PI * i as f64 / beams as f64);
                let mut best = max_range;
                for s in &self.scenario.static_shapes {
                    if let Some(t) = s.ray_hit(origin, dir) {
                        best = best.min(t);
                    }
                }
                if with_obstacles {
                    for o in &self.obstacles {
                        if let Some(t) = ray_circle(origin, dir, o.position, o.radius) {
                            best = best.min(t);
                        }
                    }
                }
                best.clamp(MIN_RANGE, max_range)
            })
            .collect()
    }

    /// Minimum range of a full sweep, used for risk and reward terms.
    pub fn min_range(&self, beams: usize, max_range: f64) -> f64 {
        self.raycast(beams, max_range)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }
}
