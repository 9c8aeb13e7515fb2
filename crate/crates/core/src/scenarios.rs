//! Built-in scenario generators.
//!
//! Every generator is a pure function of its seed; the seed also becomes the
//! scenario's simulation seed so the same name and seed always reproduce the
//! same world.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Pose, Rect, Shape, Vec2};
use crate::world::{ActionLimits, ObstacleSpec, RandomWalk, ScenarioSpec, SCENARIO_SCHEMA};

pub const ROBOT_RADIUS: f64 = 0.3;
const WALL: f64 = 0.2;

/// Names accepted by [`generate`].
pub const SCENARIO_NAMES: &[&str] = &[
    "blind-alley",
    "double-branch",
    "rooms",
    "square",
    "empty-room",
    "training-static",
    "training-dynamic",
];

pub fn generate(name: &str, seed: u64) -> Result<ScenarioSpec> {
    let spec = match name {
        "blind-alley" => blind_alley(seed),
        "double-branch" => double_branch(seed, &DoubleBranch::default()),
        "rooms" => rooms(seed),
        "square" => square(seed, &ActionLimits::default()),
        "empty-room" => empty_room(seed),
        "training-static" => training_static(seed),
        "training-dynamic" => training_dynamic(seed),
        other => {
            return Err(Error::Config(format!(
                "unknown scenario '{other}' (expected one of {})",
                SCENARIO_NAMES.join(", ")
            )))
        }
    };
    spec.validate()?;
    Ok(spec)
}

fn base(name: &str, bounds: Rect, seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        schema: SCENARIO_SCHEMA,
        name: name.to_string(),
        bounds,
        static_shapes: boundary_walls(&bounds),
        obstacles: Vec::new(),
        robot_start: Pose::default(),
        goal: Vec2::ZERO,
        robot_radius: ROBOT_RADIUS,
        seed,
    }
}

/// Four wall slabs lining the inside of `bounds`.
pub fn boundary_walls(b: &Rect) -> Vec<Shape> {
    vec![
        Shape::rect(b.min.x, b.min.y, b.max.x, b.min.y + WALL),
        Shape::rect(b.min.x, b.max.y - WALL, b.max.x, b.max.y),
        Shape::rect(b.min.x, b.min.y, b.min.x + WALL, b.max.y),
        Shape::rect(b.max.x - WALL, b.min.y, b.max.x, b.max.y),
    ]
}

fn walker(radius: f64, speed: f64, region: Rect) -> ObstacleSpec {
    ObstacleSpec {
        radius,
        max_speed: speed,
        behavior: RandomWalk {
            turn_probability: 0.05,
            region: Some(region),
        },
        start: None,
    }
}

/// A dead-end corridor open to the south; the robot starts near its closed
/// end and the goal sits just beyond that end wall.
pub fn blind_alley(seed: u64) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = base("blind-alley", Rect::new(0.0, 0.0, 20.0, 14.0), seed);
    spec.static_shapes.extend([
        Shape::rect(7.8, 4.0, 8.0, 10.2),
        Shape::rect(12.0, 4.0, 12.2, 10.2),
        Shape::rect(7.8, 10.0, 12.2, 10.2),
    ]);
    spec.robot_start = Pose::new(
        10.0 + rng.random_range(-0.5..0.5),
        8.0 + rng.random_range(-0.5..0.5),
        PI / 2.0 + rng.random_range(-0.3..0.3),
    );
    spec.goal = Vec2::new(10.0, 12.5);
    spec
}

#[derive(Debug, Clone, Copy)]
pub struct DoubleBranch {
    pub left_obstacles: usize,
    pub right_obstacles: usize,
    pub obstacle_speed: f64,
}

impl Default for DoubleBranch {
    fn default() -> Self {
        Self {
            left_obstacles: 4,
            right_obstacles: 1,
            obstacle_speed: 0.5,
        }
    }
}

pub const DOUBLE_BRANCH_CENTER_X: f64 = 10.0;

/// Two corridors around a central block join above it, where the goal lies.
/// The geometry is mirror-symmetric about x = 10; only the walker population
/// and a small start jitter differ between seeds.
pub fn double_branch(seed: u64, params: &DoubleBranch) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = base("double-branch", Rect::new(0.0, 0.0, 20.0, 16.0), seed);
    spec.static_shapes.extend([
        Shape::rect(8.0, 4.0, 12.0, 12.0),
        Shape::rect(0.0, 4.0, 5.0, 16.0),
        Shape::rect(15.0, 4.0, 20.0, 16.0),
    ]);
    let left = Rect::new(5.0, 4.0, 8.0, 11.0);
    let right = Rect::new(12.0, 4.0, 15.0, 11.0);
    for _ in 0..params.left_obstacles {
        spec.obstacles.push(walker(0.3, params.obstacle_speed, left));
    }
    for _ in 0..params.right_obstacles {
        spec.obstacles.push(walker(0.3, params.obstacle_speed, right));
    }
    spec.robot_start = Pose::new(
        DOUBLE_BRANCH_CENTER_X + rng.random_range(-0.5..0.5),
        1.5,
        PI / 2.0,
    );
    spec.goal = Vec2::new(DOUBLE_BRANCH_CENTER_X, 14.0);
    spec
}

/// A 3x2 grid of rooms joined by doors at seeded positions, with walkers in
/// the middle column.
pub fn rooms(seed: u64) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = base("rooms", Rect::new(0.0, 0.0, 18.0, 12.0), seed);
    let door = 1.2;
    // vertical walls at x = 6 and x = 12, one door per room row
    for wx in [6.0, 12.0] {
        for (y0, y1) in [(0.0, 6.0), (6.0, 12.0)] {
            let d = rng.random_range(y0 + 1.0..y1 - 1.0 - door);
            spec.static_shapes
                .push(Shape::rect(wx - WALL / 2.0, y0, wx + WALL / 2.0, d));
            spec.static_shapes
                .push(Shape::rect(wx - WALL / 2.0, d + door, wx + WALL / 2.0, y1));
        }
    }
    // horizontal wall at y = 6, one door per column
    for (x0, x1) in [(0.0, 6.0), (6.0, 12.0), (12.0, 18.0)] {
        let d = rng.random_range(x0 + 1.0..x1 - 1.0 - door);
        spec.static_shapes
            .push(Shape::rect(x0, 6.0 - WALL / 2.0, d, 6.0 + WALL / 2.0));
        spec.static_shapes
            .push(Shape::rect(d + door, 6.0 - WALL / 2.0, x1, 6.0 + WALL / 2.0));
    }
    for region in [Rect::new(6.2, 0.2, 11.8, 5.8), Rect::new(6.2, 6.2, 11.8, 11.8)] {
        spec.obstacles.push(walker(0.3, 0.4, region));
    }
    spec.robot_start = Pose::new(
        2.0 + rng.random_range(-0.5..0.5),
        3.0 + rng.random_range(-0.5..0.5),
        rng.random_range(-PI..PI),
    );
    spec.goal = Vec2::new(15.5 + rng.random_range(-0.5..0.5), 9.0);
    spec
}

/// Open square crossed by fast walkers; walkers move at twice the robot's
/// top forward speed.
pub fn square(seed: u64, limits: &ActionLimits) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = base("square", Rect::new(0.0, 0.0, 12.0, 12.0), seed);
    let speed = 2.0 * limits.max_forward_speed();
    let arena = Rect::new(0.2, 0.2, 11.8, 11.8);
    for _ in 0..6 {
        spec.obstacles.push(walker(0.3, speed, arena));
    }
    spec.robot_start = Pose::new(1.5, 6.0 + rng.random_range(-1.0..1.0), 0.0);
    spec.goal = Vec2::new(10.5, 6.0 + rng.random_range(-1.0..1.0));
    spec
}

/// Walled 10x10 room with nothing inside.
pub fn empty_room(seed: u64) -> ScenarioSpec {
    let mut spec = base("empty-room", Rect::new(0.0, 0.0, 10.0, 10.0), seed);
    spec.robot_start = Pose::new(2.0, 5.0, 0.0);
    spec.goal = Vec2::new(7.0, 5.0);
    spec
}

const TRAIN_ROOM: f64 = 8.0;

fn random_start_goal(rng: &mut ChaCha8Rng, spec: &mut ScenarioSpec, clearance: f64) {
    let inner = spec.bounds.shrink(WALL + clearance);
    loop {
        let s = Vec2::new(
            rng.random_range(inner.min.x..inner.max.x),
            rng.random_range(inner.min.y..inner.max.y),
        );
        let g = Vec2::new(
            rng.random_range(inner.min.x..inner.max.x),
            rng.random_range(inner.min.y..inner.max.y),
        );
        let d = s.distance(g);
        if (3.0..=6.0).contains(&d)
            && spec.static_clearance(s) > clearance
            && spec.static_clearance(g) > clearance
        {
            spec.robot_start = Pose::new(s.x, s.y, rng.random_range(-PI..PI));
            spec.goal = g;
            return;
        }
    }
}

/// Static training room: a few rectangular roadblocks.
pub fn training_static(seed: u64) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = base(
        "training-static",
        Rect::new(0.0, 0.0, TRAIN_ROOM, TRAIN_ROOM),
        seed,
    );
    let blocks = rng.random_range(2..=4);
    for _ in 0..blocks {
        let w = rng.random_range(0.4..1.2);
        let h = rng.random_range(0.4..1.2);
        let x = rng.random_range(1.0..TRAIN_ROOM - 1.0 - w);
        let y = rng.random_range(1.0..TRAIN_ROOM - 1.0 - h);
        spec.static_shapes.push(Shape::rect(x, y, x + w, y + h));
    }
    random_start_goal(&mut rng, &mut spec, 0.6);
    spec
}

/// Dynamic training room: random walkers and no interior structure.
pub fn training_dynamic(seed: u64) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = base(
        "training-dynamic",
        Rect::new(0.0, 0.0, TRAIN_ROOM, TRAIN_ROOM),
        seed,
    );
    random_start_goal(&mut rng, &mut spec, 0.6);
    let arena = spec.bounds.shrink(WALL);
    let n = rng.random_range(3..=5);
    for _ in 0..n {
        let speed = rng.random_range(0.3..0.8);
        spec.obstacles.push(walker(0.3, speed, arena));
    }
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{SimConfig, World};

    #[test]
    fn every_named_generator_spawns() {
        for name in SCENARIO_NAMES {
            for seed in 0..20 {
                let spec = generate(name, seed).unwrap();
                World::spawn(&spec, SimConfig::default())
                    .unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
            }
        }
        assert!(generate("nowhere", 0).is_err());
    }

    #[test]
    fn square_walkers_twice_robot_speed() {
        let limits = ActionLimits::default();
        let spec = square(3, &limits);
        assert!(spec
            .obstacles
            .iter()
            .all(|o| o.max_speed == 2.0 * limits.vx[1]));
    }

    #[test]
    fn generators_are_deterministic() {
        for name in SCENARIO_NAMES {
            assert_eq!(generate(name, 11).unwrap(), generate(name, 11).unwrap());
        }
    }

    #[test]
    fn json_roundtrip() {
        let spec = double_branch(5, &DoubleBranch::default());
        let text = spec.to_json().unwrap();
        assert!(text.contains("\"schema\": 1"));
        assert_eq!(ScenarioSpec::from_json(&text).unwrap(), spec);
        let bad = text.replace("\"schema\": 1", "\"schema\": 2");
        assert!(matches!(
            ScenarioSpec::from_json(&bad),
            Err(Error::Schema { found: 2, .. })
        ));
    }
}
