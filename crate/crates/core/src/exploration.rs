//! Frontier exploration-point selection and re-selection triggers.
//!
//! Candidates are scored on two factors: a goal factor `D_h = d1 + d2`
//! (straight-line distance from the candidate to the goal plus the planned
//! path length from the robot to the candidate) and a safety factor `V_h`
//! (the critic's value with the candidate as goal input). The selected
//! candidate minimises
//!
//! ```text
//! (D_h - D_min) / (D_max - D_min) + gamma * (V_max - V_h) / (V_max - V_min)
//! ```
//!
//! where a term whose denominator is zero is taken as 0.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, Vec2};
use crate::occupancy::{Cell, CellClass, OccupancyGrid};
use crate::planner::{distance_field, PlanningMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplorationConfig {
    /// Weight of the safety factor.
    pub gamma: f64,
    /// Relative entropy change that forces a new selection.
    pub entropy_trigger: f64,
    /// Maximum number of frontier clusters scored.
    pub candidate_cap: usize,
    /// Distance at which the robot counts as having reached its exploration point.
    pub arrival_radius: f64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            entropy_trigger: 0.10,
            candidate_cap: 64,
            arrival_radius: 0.3,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.gamma >= 0.0) || !(self.entropy_trigger > 0.0) || self.candidate_cap == 0 {
            return Err(crate::Error::Config(format!(
                "exploration config needs gamma >= 0, entropy_trigger > 0, candidate_cap > 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplorationState {
    pub current_point: Option<Cell>,
    pub entropy_at_selection: f64,
    pub goal_known: bool,
}

impl ExplorationState {
    pub fn new(grid: &OccupancyGrid, goal: Vec2) -> Self {
        Self {
            current_point: None,
            entropy_at_selection: grid.entropy(),
            goal_known: goal_is_known(grid, goal),
        }
    }

    pub fn select(&mut self, point: Cell, grid: &OccupancyGrid) {
        self.current_point = Some(point);
        self.entropy_at_selection = grid.entropy();
    }
}

pub fn goal_is_known(grid: &OccupancyGrid, goal: Vec2) -> bool {
    matches!(
        grid.classify(grid.world_to_cell(goal)),
        Some(CellClass::Free | CellClass::Occupied)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    EntropyChange,
    PointReached,
    PointChanged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Reselect {
    No,
    Reselect(Trigger),
    GoalNowKnown,
}

/// Evaluates the four re-selection triggers; the goal transition wins over
/// the others.
pub fn should_reselect(
    state: &ExplorationState,
    grid: &OccupancyGrid,
    goal: Vec2,
    pose: Pose,
    cfg: &ExplorationConfig,
) -> Reselect {
    if !state.goal_known && goal_is_known(grid, goal) {
        return Reselect::GoalNowKnown;
    }
    let Some(point) = state.current_point else {
        return Reselect::No;
    };
    let h = grid.entropy();
    let rel = (h - state.entropy_at_selection).abs() / state.entropy_at_selection.max(1e-12);
    if rel > cfg.entropy_trigger {
        return Reselect::Reselect(Trigger::EntropyChange);
    }
    if pose.position().distance(grid.cell_center(point)) < cfg.arrival_radius {
        return Reselect::Reselect(Trigger::PointReached);
    }
    if !grid.is_frontier(point) {
        return Reselect::Reselect(Trigger::PointChanged);
    }
    Reselect::No
}

/// One representative per 8-connected frontier cluster: the unblocked cell
/// closest to the cluster centroid (ties to the lowest index). Larger
/// clusters come first; at most `cap` are kept.
pub fn candidate_cells(grid: &OccupancyGrid, map: &PlanningMap, cap: usize) -> Vec<Cell> {
    let frontiers = grid.frontier_cells();
    let mut clusters = grid.clusters(&frontiers);
    clusters.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    clusters
        .iter()
        .filter_map(|cluster| {
            let n = cluster.len() as f64;
            let cx = cluster.iter().map(|c| c.x as f64).sum::<f64>() / n;
            let cy = cluster.iter().map(|c| c.y as f64).sum::<f64>() / n;
            cluster
                .iter()
                .filter(|&&c| !map.is_blocked(c))
                .min_by(|a, b| {
                    let da = (a.x as f64 - cx).powi(2) + (a.y as f64 - cy).powi(2);
                    let db = (b.x as f64 - cx).powi(2) + (b.y as f64 - cy).powi(2);
                    da.total_cmp(&db).then(a.cmp(b))
                })
                .copied()
        })
        .take(cap)
        .collect()
}

/// Safety estimate for a goal offset expressed in the robot frame.
pub trait SafetyCritic {
    fn safety(&self, goal_in_robot_frame: Vec2) -> f64;
}

impl<F: Fn(Vec2) -> f64> SafetyCritic for F {
    fn safety(&self, goal_in_robot_frame: Vec2) -> f64 {
        self(goal_in_robot_frame)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredCandidate {
    pub cell: Cell,
    pub point: Vec2,
    pub d1: f64,
    pub d2: f64,
    pub d_h: f64,
    pub v_h: f64,
}

/// Scores candidates; those the planner cannot reach from the robot are
/// dropped.
pub fn score_candidates(
    candidates: &[Cell],
    map: &PlanningMap,
    goal: Vec2,
    pose: Pose,
    critic: &impl SafetyCritic,
) -> Vec<ScoredCandidate> {
    let Some(start) = map.snap_to_free(map.world_to_cell(pose.position()), 3) else {
        return Vec::new();
    };
    let field = distance_field(map, start);
    candidates
        .iter()
        .filter_map(|&cell| {
            let cost = field[map.index(cell)?]?;
            let point = map.cell_center(cell);
            let d1 = point.distance(goal);
            let d2 = cost.cells() * map.resolution();
            Some(ScoredCandidate {
                cell,
                point,
                d1,
                d2,
                d_h: d1 + d2,
                v_h: critic.safety(pose.to_local(point)),
            })
        })
        .collect()
}

/// Normalised heuristic value of every candidate.
pub fn heuristic_scores(scored: &[ScoredCandidate], gamma: f64) -> Vec<f64> {
    let (d_min, d_max) = min_max(scored.iter().map(|s| s.d_h));
    let (v_min, v_max) = min_max(scored.iter().map(|s| s.v_h));
    scored
        .iter()
        .map(|s| {
            let goal_term = if d_max > d_min {
                (s.d_h - d_min) / (d_max - d_min)
            } else {
                0.0
            };
            let safety_term = if v_max > v_min {
                (v_max - s.v_h) / (v_max - v_min)
            } else {
                0.0
            };
            goal_term + gamma * safety_term
        })
        .collect()
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

/// Index of the selected candidate: lowest heuristic score, then smaller
/// `D_h`, then lowest cell index. `None` only for an empty slice.
pub fn select_exploration_point(scored: &[ScoredCandidate], gamma: f64) -> Option<usize> {
    let scores = heuristic_scores(scored, gamma);
    (0..scored.len()).min_by(|&i, &j| {
        scores[i]
            .total_cmp(&scores[j])
            .then(scored[i].d_h.total_cmp(&scored[j].d_h))
            .then(scored[i].cell.cmp(&scored[j].cell))
    })
}

/// CSV table of scored candidates with their heuristic value and the selection flag.
pub fn candidates_csv(scored: &[ScoredCandidate], gamma: f64, header: bool) -> String {
    let scores = heuristic_scores(scored, gamma);
    let chosen = select_exploration_point(scored, gamma);
    let mut out = String::new();
    if header {
        out.push_str("cell_x,cell_y,d1,d2,d_h,v_h,score,selected\n");
    }
    for (i, s) in scored.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            s.cell.x,
            s.cell.y,
            s.d1,
            s.d2,
            s.d_h,
            s.v_h,
            scores[i],
            u8::from(chosen == Some(i))
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::plan_path;

    fn cand(x: i32, d_h: f64, v_h: f64) -> ScoredCandidate {
        ScoredCandidate {
            cell: Cell::new(x, 0),
            point: Vec2::ZERO,
            d1: d_h,
            d2: 0.0,
            d_h,
            v_h,
        }
    }

    #[test]
    fn gamma_zero_is_min_distance() {
        let s = vec![cand(0, 5.0, 9.0), cand(1, 3.0, -1.0), cand(2, 4.0, 2.0)];
        assert_eq!(select_exploration_point(&s, 0.0), Some(1));
    }

    #[test]
    fn equal_distances_pick_safest() {
        let s = vec![cand(0, 4.0, 0.1), cand(1, 4.0, 0.7), cand(2, 4.0, 0.3)];
        assert_eq!(select_exploration_point(&s, 0.5), Some(1));
        assert_eq!(heuristic_scores(&s, 0.5)[1], 0.0);
    }

    #[test]
    fn ties_break_on_distance_then_cell() {
        // scores: 0 + 1 = 1 and 1 + 0 = 1
        let s = vec![cand(3, 4.0, 0.0), cand(1, 2.0, 1.0), cand(0, 4.0, 1.0)];
        let scores = heuristic_scores(&s, 1.0);
        assert_eq!(scores, vec![2.0, 0.0, 1.0]);
        let s = vec![cand(3, 4.0, 1.0), cand(1, 2.0, 0.0)];
        assert_eq!(select_exploration_point(&s, 1.0), Some(1));
        let s = vec![cand(3, 4.0, 1.0), cand(1, 4.0, 1.0)];
        assert_eq!(select_exploration_point(&s, 1.0), Some(1));
        assert_eq!(select_exploration_point(&[], 1.0), None);
    }

    fn corridor() -> OccupancyGrid {
        // 40x21 free grid with a wall at x = 20 spanning y 0..15
        let mut g = OccupancyGrid::from_probabilities(40, 21, 0.1, Vec2::ZERO, vec![0.1; 40 * 21]).unwrap();
        for y in 0..15 {
            g.set(Cell::new(20, y), 0.9);
        }
        g
    }

    #[test]
    fn candidate_at_goal_has_zero_d1() {
        let g = OccupancyGrid::from_probabilities(40, 5, 0.1, Vec2::ZERO, vec![0.1; 200]).unwrap();
        let map = PlanningMap::new(&g, 0.0);
        let target = Cell::new(35, 2);
        let goal = map.cell_center(target);
        let pose = Pose::new(0.55, 0.25, 0.0);
        let s = score_candidates(&[target], &map, goal, pose, &|_: Vec2| 0.0);
        assert_eq!(s[0].d1, 0.0);
        assert!((s[0].d2 - goal.distance(pose.position())).abs() <= 0.1);
    }

    #[test]
    fn walled_candidate_has_longer_path() {
        let g = corridor();
        let map = PlanningMap::new(&g, 0.0);
        let pose = Pose::new(1.55, 0.55, 0.0);
        let open = Cell::new(5, 15);
        let walled = Cell::new(25, 5);
        let goal = Vec2::new(1.55, 1.05);
        let s = score_candidates(&[open, walled], &map, goal, pose, &|_: Vec2| 0.0);
        let start = map.world_to_cell(pose.position());
        for c in &s {
            // d2 equals the planner's optimal length
            let p = plan_path(&map, start, c.cell).unwrap();
            assert_eq!(c.d2, p.length);
        }
        assert!(s[1].d2 > s[0].d2);
    }

    #[test]
    fn critic_is_pure_in_scoring() {
        let g = corridor();
        let map = PlanningMap::new(&g, 0.0);
        let critic = |v: Vec2| v.x * 0.3 - v.y;
        let pose = Pose::new(1.55, 0.55, 0.4);
        let a = score_candidates(&[Cell::new(5, 15)], &map, Vec2::ZERO, pose, &critic);
        let b = score_candidates(&[Cell::new(5, 15)], &map, Vec2::ZERO, pose, &critic);
        assert_eq!(a, b);
    }

    #[test]
    fn unreachable_candidates_dropped() {
        let mut g = corridor();
        for c in Cell::new(30, 10).neighbors8() {
            g.set(c, 0.9);
        }
        let map = PlanningMap::new(&g, 0.0);
        let s = score_candidates(&[Cell::new(30, 10)], &map, Vec2::ZERO, Pose::new(0.55, 0.55, 0.0), &|_: Vec2| 0.0);
        assert!(s.is_empty());
    }

    #[test]
    fn reselect_triggers() {
        let mut g = OccupancyGrid::new(30, 30, 0.1, Vec2::ZERO);
        for y in 0..30 {
            for x in 0..15 {
                g.set(Cell::new(x, y), 0.1);
            }
        }
        let goal = Vec2::new(2.55, 1.55); // unknown
        let cfg = ExplorationConfig::default();
        let mut st = ExplorationState::new(&g, goal);
        assert!(!st.goal_known);
        let point = Cell::new(14, 10);
        assert!(g.is_frontier(point));
        st.select(point, &g);
        let far = Pose::new(0.5, 0.5, 0.0);
        assert_eq!(should_reselect(&st, &g, goal, far, &cfg), Reselect::No);
        let on_point = Pose::new(1.45, 1.05, 0.0);
        assert_eq!(
            should_reselect(&st, &g, goal, on_point, &cfg),
            Reselect::Reselect(Trigger::PointReached)
        );
        let mut changed = g.clone();
        changed.set(point, 0.9);
        assert_eq!(
            should_reselect(&st, &changed, goal, far, &cfg),
            Reselect::Reselect(Trigger::PointChanged)
        );
        let mut seen = g.clone();
        seen.set(seen.world_to_cell(goal), 0.1);
        assert_eq!(should_reselect(&st, &seen, goal, far, &cfg), Reselect::GoalNowKnown);
    }
}
