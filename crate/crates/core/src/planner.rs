//! Grid path planning over an occupancy snapshot and sparse waypoint
//! extraction.
//!
//! Planning treats occupied and unknown cells as blocked and additionally
//! blocks every cell whose center lies within the inflation radius of an
//! occupied cell. Line of sight only cares about occupied (inflated) cells;
//! unknown space does not block it.
//!
//! Path costs are kept as exact counts of straight and diagonal moves so two
//! searches that find optimal paths report bit-identical lengths.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::SQRT_2;

use serde::Serialize;

use crate::geometry::Vec2;
use crate::occupancy::{Cell, CellClass, OccupancyGrid, NEIGHBORS8};

/// Number of straight and diagonal unit moves along a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
pub struct PathCost {
    pub straight: u32,
    pub diagonal: u32,
}

impl PathCost {
    pub fn cells(&self) -> f64 {
        self.straight as f64 + self.diagonal as f64 * SQRT_2
    }

    fn step(self, diagonal: bool) -> Self {
        if diagonal {
            Self {
                diagonal: self.diagonal + 1,
                ..self
            }
        } else {
            Self {
                straight: self.straight + 1,
                ..self
            }
        }
    }
}

impl Ord for PathCost {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cells()
            .total_cmp(&other.cells())
            .then(self.diagonal.cmp(&other.diagonal))
    }
}

impl PartialOrd for PathCost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPath {
    pub cells: Vec<Cell>,
    pub cost: PathCost,
    /// Meters: move count weighted by 1 or sqrt(2), times resolution.
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanError {
    StartBlocked,
    TargetBlocked,
    Unreachable,
}

impl std::fmt::Display for PlanError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlanError::StartBlocked => "start cell is blocked",
            PlanError::TargetBlocked => "target cell is blocked",
            PlanError::Unreachable => "target is unreachable",
        })
    }
}

impl std::error::Error for PlanError {}

/// Immutable planning view of an occupancy snapshot.
#[derive(Debug, Clone)]
pub struct PlanningMap {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Vec2,
    /// Blocks planning: not free, or inside inflation.
    blocked: Vec<bool>,
    /// Blocks line of sight: occupied, or inside inflation.
    obstacle: Vec<bool>,
}

impl PlanningMap {
    pub fn new(grid: &OccupancyGrid, inflation_radius: f64) -> Self {
        let (w, h) = (grid.width(), grid.height());
        let res = grid.resolution();
        let reach = (inflation_radius / res + 1e-9).floor() as i32;
        let kernel: Vec<(i32, i32)> = (-reach..=reach)
            .flat_map(|dy| (-reach..=reach).map(move |dx| (dx, dy)))
            .filter(|&(dx, dy)| ((dx * dx + dy * dy) as f64).sqrt() * res <= inflation_radius + 1e-9)
            .collect();
        let mut obstacle = vec![false; w * h];
        for i in 0..w * h {
            if grid.classify_index(i) != CellClass::Occupied {
                continue;
            }
            let c = grid.cell_at(i);
            for &(dx, dy) in &kernel {
                if let Some(j) = grid.index(Cell::new(c.x + dx, c.y + dy)) {
                    obstacle[j] = true;
                }
            }
        }
        let blocked = (0..w * h)
            .map(|i| obstacle[i] || grid.classify_index(i) != CellClass::Free)
            .collect();
        Self {
            width: w,
            height: h,
            resolution: res,
            origin: grid.origin(),
            blocked,
            obstacle,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn index(&self, c: Cell) -> Option<usize> {
        (c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height)
            .then(|| c.y as usize * self.width + c.x as usize)
    }

    fn cell_at(&self, i: usize) -> Cell {
        Cell::new((i % self.width) as i32, (i / self.width) as i32)
    }

    pub fn is_blocked(&self, c: Cell) -> bool {
        self.index(c).is_none_or(|i| self.blocked[i])
    }

    pub fn is_obstacle(&self, c: Cell) -> bool {
        self.index(c).is_none_or(|i| self.obstacle[i])
    }

    pub fn world_to_cell(&self, p: Vec2) -> Cell {
        Cell::new(
            ((p.x - self.origin.x) / self.resolution).floor() as i32,
            ((p.y - self.origin.y) / self.resolution).floor() as i32,
        )
    }

    pub fn cell_center(&self, c: Cell) -> Vec2 {
        Vec2::new(
            self.origin.x + (c.x as f64 + 0.5) * self.resolution,
            self.origin.y + (c.y as f64 + 0.5) * self.resolution,
        )
    }

    /// Nearest unblocked cell within `max_cells` (Chebyshev) of `c`; ties go
    /// to the lowest cell index.
    pub fn snap_to_free(&self, c: Cell, max_cells: i32) -> Option<Cell> {
        if !self.is_blocked(c) {
            return Some(c);
        }
        let mut best: Option<(i32, Cell)> = None;
        for dy in -max_cells..=max_cells {
            for dx in -max_cells..=max_cells {
                let n = Cell::new(c.x + dx, c.y + dy);
                if self.is_blocked(n) {
                    continue;
                }
                let d2 = dx * dx + dy * dy;
                if best.is_none_or(|(bd, bc)| d2 < bd || (d2 == bd && n < bc)) {
                    best = Some((d2, n));
                }
            }
        }
        best.map(|(_, c)| c)
    }

    /// Unblocked 8-neighbors; diagonal moves need both orthogonal cells open.
    fn successors(&self, c: Cell) -> impl Iterator<Item = (Cell, bool)> + '_ {
        NEIGHBORS8.iter().filter_map(move |&(dx, dy)| {
            let n = Cell::new(c.x + dx, c.y + dy);
            if self.is_blocked(n) {
                return None;
            }
            let diagonal = dx != 0 && dy != 0;
            if diagonal
                && (self.is_blocked(Cell::new(c.x + dx, c.y))
                    || self.is_blocked(Cell::new(c.x, c.y + dy)))
            {
                return None;
            }
            Some((n, diagonal))
        })
    }
}

fn octile(a: Cell, b: Cell) -> f64 {
    let dx = (a.x - b.x).unsigned_abs() as f64;
    let dy = (a.y - b.y).unsigned_abs() as f64;
    dx.max(dy) + (SQRT_2 - 1.0) * dx.min(dy)
}

struct Open {
    f: f64,
    g: PathCost,
    index: usize,
}

impl PartialEq for Open {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Open {}

impl Ord for Open {
    // reversed so BinaryHeap pops the smallest f, then the largest g, then lowest index
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then(self.g.cmp(&other.g))
            .then(other.index.cmp(&self.index))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest 8-connected path from `start` to `target` (A* with the octile
/// heuristic).
pub fn plan_path(map: &PlanningMap, start: Cell, target: Cell) -> Result<GridPath, PlanError> {
    if map.is_blocked(start) {
        return Err(PlanError::StartBlocked);
    }
    if map.is_blocked(target) {
        return Err(PlanError::TargetBlocked);
    }
    let n = map.width * map.height;
    let s = map.index(start).unwrap();
    let t = map.index(target).unwrap();
    let mut g: Vec<Option<PathCost>> = vec![None; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    g[s] = Some(PathCost::default());
    open.push(Open {
        f: octile(start, target),
        g: PathCost::default(),
        index: s,
    });
    while let Some(Open { g: gc, index, .. }) = open.pop() {
        if closed[index] {
            continue;
        }
        closed[index] = true;
        if index == t {
            let mut cells = vec![target];
            let mut cur = t;
            while cur != s {
                cur = parent[cur];
                cells.push(map.cell_at(cur));
            }
            cells.reverse();
            return Ok(GridPath {
                cells,
                cost: gc,
                length: gc.cells() * map.resolution,
            });
        }
        let c = map.cell_at(index);
        for (nb, diagonal) in map.successors(c) {
            let j = map.index(nb).unwrap();
            if closed[j] {
                continue;
            }
            let cand = gc.step(diagonal);
            if g[j].is_none_or(|old| cand < old) {
                g[j] = Some(cand);
                parent[j] = index;
                open.push(Open {
                    f: cand.cells() + octile(nb, target),
                    g: cand,
                    index: j,
                });
            }
        }
    }
    Err(PlanError::Unreachable)
}

/// Optimal path cost from `start` to every cell (None when unreachable).
pub fn distance_field(map: &PlanningMap, start: Cell) -> Vec<Option<PathCost>> {
    let n = map.width * map.height;
    let mut dist: Vec<Option<PathCost>> = vec![None; n];
    let Some(s) = map.index(start).filter(|_| !map.is_blocked(start)) else {
        return dist;
    };
    let mut done = vec![false; n];
    let mut open = BinaryHeap::new();
    dist[s] = Some(PathCost::default());
    open.push(Open {
        f: 0.0,
        g: PathCost::default(),
        index: s,
    });
    while let Some(Open { g: gc, index, .. }) = open.pop() {
        if done[index] {
            continue;
        }
        done[index] = true;
        for (nb, diagonal) in map.successors(map.cell_at(index)) {
            let j = map.index(nb).unwrap();
            let cand = gc.step(diagonal);
            if !done[j] && dist[j].is_none_or(|old| cand < old) {
                dist[j] = Some(cand);
                open.push(Open {
                    f: cand.cells(),
                    g: cand,
                    index: j,
                });
            }
        }
    }
    dist
}

/// True iff no occupied (inflated) cell lies on the supercover cell walk
/// from `a` to `b`. Leaving the grid counts as blocked.
pub fn line_of_sight(map: &PlanningMap, a: Vec2, b: Vec2) -> bool {
    supercover(map, a, b, |c| !map.is_obstacle(c))
}

/// Walks every cell the segment `a`-`b` touches, stopping early when `visit`
/// returns false. Returns whether the walk completed.
pub fn supercover(
    map: &PlanningMap,
    a: Vec2,
    b: Vec2,
    mut visit: impl FnMut(Cell) -> bool,
) -> bool {
    let res = map.resolution;
    let mut c = map.world_to_cell(a);
    let goal = map.world_to_cell(b);
    if !visit(c) {
        return false;
    }
    let d = b - a;
    let step_x = if d.x > 0.0 { 1 } else { -1 };
    let step_y = if d.y > 0.0 { 1 } else { -1 };
    let boundary = |cell: i32, step: i32, origin: f64| {
        origin + (cell + if step > 0 { 1 } else { 0 }) as f64 * res
    };
    let mut t_max_x = if d.x != 0.0 {
        (boundary(c.x, step_x, map.origin.x) - a.x) / d.x
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if d.y != 0.0 {
        (boundary(c.y, step_y, map.origin.y) - a.y) / d.y
    } else {
        f64::INFINITY
    };
    let t_dx = if d.x != 0.0 { res / d.x.abs() } else { f64::INFINITY };
    let t_dy = if d.y != 0.0 { res / d.y.abs() } else { f64::INFINITY };
    const TIE: f64 = 1e-12;
    while c != goal && (t_max_x <= 1.0 || t_max_y <= 1.0) {
        if (t_max_x - t_max_y).abs() < TIE {
            // passing through a cell corner touches both side cells
            if !visit(Cell::new(c.x + step_x, c.y)) || !visit(Cell::new(c.x, c.y + step_y)) {
                return false;
            }
            c.x += step_x;
            c.y += step_y;
            t_max_x += t_dx;
            t_max_y += t_dy;
        } else if t_max_x < t_max_y {
            c.x += step_x;
            t_max_x += t_dx;
        } else {
            c.y += step_y;
            t_max_y += t_dy;
        }
        if !visit(c) {
            return false;
        }
    }
    true
}

/// Farthest path cell whose center is in line of sight from `current`,
/// in world coordinates. Falls back to the first path cell.
pub fn extract_waypoint(path: &GridPath, map: &PlanningMap, current: Vec2) -> Vec2 {
    let first = path.cells.first().expect("extract_waypoint needs a non-empty path");
    path.cells
        .iter()
        .rev()
        .map(|&c| map.cell_center(c))
        .find(|&p| line_of_sight(map, current, p))
        .unwrap_or_else(|| map.cell_center(*first))
}
